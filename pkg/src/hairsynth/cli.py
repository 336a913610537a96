"""Command-line entry point: ``hairsynth <command> ...``.

Exit codes: 0 success, 1 validation error (bad arguments, missing files,
illegal stage order, failed gradient check), 2 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import htx, structure, synth
from . import training as tr
from .tensor import Tensor

log = logging.getLogger("hairsynth")


def _bank_from(arg):
    if arg is None:
        return structure.build_bank()
    p = Path(arg)
    params = json.loads(p.read_text() if p.exists() else arg)
    return structure.build_bank(**params)


def _read_image(path):
    path = Path(path)
    if path.suffix == ".htx":
        return htx.load(path)
    return synth.load_png(path)


def cmd_synth_data(args):
    manifest = synth.make_dataset(args.seed, args.count, split_ratio=args.split_ratio, out_dir=args.out, size=args.size)
    print(f"wrote {args.count} samples to {args.out} "
          f"({len(manifest['train'])} train / {len(manifest['test'])} test)")


def cmd_extract(args):
    bank = _bank_from(args.bank_params)
    image = _read_image(args.inp)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise tr.ValidationError(f"expected a 1- or 3-channel image, got shape {image.shape}")
    pair = structure.extract(Tensor(image.astype(np.float64)), bank)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    encoded = structure.encode_orientation(pair).data.astype(np.float32)
    htx.save(out / "structure.htx", encoded)
    tex = pair.texture.data[0]
    synth.save_png(out / "texture.png", np.repeat((tex / max(tex.max(), 1e-12))[None], 3, axis=0))
    rgb = structure.colorize_orientation(pair.orientation.data[0])
    synth.save_png(out / "orientation.png", rgb.transpose(2, 0, 1))
    print(f"structure {encoded.shape} written to {out}")


def cmd_dump_kernels(args):
    bank = _bank_from(args.bank_params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    htx.save(out / "kernels.htx", bank.kernels)
    htx.save(out / "raw_kernels.htx", bank.raw_kernels)
    meta = {
        "sigma_u": bank.sigma_u, "sigma_v": bank.sigma_v, "wavelength": bank.wavelength,
        "support": bank.support, "angles": [float(a) for a in bank.orientations],
        "dc_offsets": [float(d) for d in bank.dc_offsets],
    }
    (out / "bank.json").write_text(json.dumps(meta, indent=2))
    print(f"{bank.count} kernels of {bank.support}x{bank.support} written to {out}")


def _config(args):
    cfg = tr.TrainConfig.load(args.config) if args.config else tr.TrainConfig(task=args.task)
    if cfg.task != args.task:
        raise tr.ValidationError(f"--task {args.task} disagrees with config task {cfg.task}")
    return cfg


def cmd_train(args):
    cfg = _config(args)
    dataset = synth.Dataset(args.data)
    ckpt = Path(args.ckpt_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    cfg.save(ckpt / "config.json")
    if args.stage == "all":
        tr.run_pipeline(cfg, dataset, ckpt)
    else:
        tr.run_stage(args.stage, cfg, dataset, ckpt)
    print(f"stage {args.stage} done; checkpoints in {ckpt}")


def cmd_eval(args):
    ckpt = Path(args.ckpt_dir)
    saved = ckpt / "config.json"
    cfg = tr.TrainConfig.load(saved) if saved.exists() else tr.TrainConfig(task=args.task)
    if cfg.task != args.task:
        raise tr.ValidationError(f"--task {args.task} disagrees with the trained task {cfg.task}")
    result = tr.evaluate(ckpt, synth.Dataset(args.data), cfg, split=args.split,
                         report=args.report, panels=args.panels)
    for cand, metrics in result["mean"].items():
        print(f"{cand:>10}: " + "  ".join(f"{k}={v:.5g}" for k, v in metrics.items()))


def cmd_grad_check(args):
    from .gradcheck import grad_check_suite

    report = grad_check_suite(seeds=range(args.seeds), tol=args.tol)
    worst = {}
    for r in report.results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    for name, err in worst.items():
        print(f"{'ok  ' if err <= args.tol else 'FAIL'} {name:<24} {err:.2e}")
    print(f"{len(report.results)} checks in {report.seconds:.1f}s; "
          f"{len(report.failures())} failure(s)")
    if not report.passed:
        return 1
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hairsynth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate a synthetic hair dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=62)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--split-ratio", type=float, default=0.8)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("extract", help="texture and orientation maps of an image")
    s.add_argument("--in", dest="inp", required=True, help="PNG or HTX1 image")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--bank-params", help="JSON file or inline JSON with build_bank keywords")
    s.set_defaults(fn=cmd_extract)

    s = sub.add_parser("dump-kernels", help="write the filter bank as HTX1 tensors")
    s.add_argument("--out", required=True)
    s.add_argument("--bank-params")
    s.set_defaults(fn=cmd_dump_kernels)

    s = sub.add_parser("train", help="run one training stage (or all of them)")
    s.add_argument("--task", choices=tr.TASKS, required=True)
    s.add_argument("--stage", choices=tr.STAGES + ("all",), required=True)
    s.add_argument("--config", help="JSON file with TrainConfig fields")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt-dir", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="score I_c and I_f on a dataset split")
    s.add_argument("--task", choices=tr.TASKS, required=True)
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--panels", help="directory for side-by-side PNG panels")
    s.add_argument("--split", default="test")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("grad-check", help="finite-difference check of every op and loss")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args) or 0
    except tr.NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (tr.ValidationError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
