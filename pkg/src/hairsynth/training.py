"""Staged training for the two-phase generator and its evaluation harness.

Stages run in a fixed order::

    basic -> regen_gt_source -> regen_coarse_source -> joint

``basic`` trains G_b alone. The two ``regen`` stages train G_r with the
structure input extracted from the ground truth and then from G_b's coarse
output (G_b frozen). ``joint`` fine-tunes both generators end-to-end at the
reduced learning rate, with gradients flowing through the extraction layer.
"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses as L
from . import networks as N
from . import structure as S
from . import synth
from . import tensor as T
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

TASKS = ("sketch2hair", "hair_sr4", "hair_sr8")
STAGES = ("basic", "regen_gt_source", "regen_coarse_source", "joint")
CSV_COLUMNS = ("step", "pixel", "adv", "style", "fm", "total", "texture")


class ValidationError(ValueError):
    """Bad configuration, missing inputs or an illegal stage transition."""


class NumericalAbort(RuntimeError):
    """A loss went non-finite; the last good checkpoint is left in place."""


@dataclass
class TrainConfig:
    task: str = "sketch2hair"
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    stage_steps: tuple = (2000, 1000, 1000, 500)
    lr_base: float = 5e-4
    lr_finetune: float = 5e-5
    batch: int = 1
    seed: int = 0
    image_size: int = 64
    texture_weight: float = 0.01
    base_channels: int = 16
    regen_depth: int = 4
    rms_decay: float = 0.99
    adaptive: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        self.stage_steps = tuple(int(s) for s in self.stage_steps)
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if len(self.stage_steps) != len(STAGES) or min(self.stage_steps) < 1:
            raise ValidationError("stage_steps needs four step counts, each >= 1")
        if not 0 < self.lr_finetune < self.lr_base:
            raise ValidationError("lr_finetune must be positive and below lr_base")
        if self.batch < 1:
            raise ValidationError("batch must be >= 1")
        if self.texture_weight < 0:
            raise ValidationError("texture_weight must be nonnegative")
        if self.image_size & (self.image_size - 1):
            raise ValidationError("image_size must be a power of two")

    @property
    def sr_factor(self):
        return {"hair_sr4": 4, "hair_sr8": 8}.get(self.task)

    def steps(self, stage):
        return self.stage_steps[STAGES.index(stage)]

    def sub_seed(self, tag: str) -> int:
        return int(np.random.SeedSequence([self.seed, *tag.encode()]).generate_state(1)[0])

    def to_dict(self):
        d = asdict(self)
        d["stage_steps"] = list(self.stage_steps)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown config fields: {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


# --- stage bookkeeping -------------------------------------------------------

@dataclass
class StageState:
    completed: list = field(default_factory=list)
    stage: str | None = None
    step: int = 0
    checkpoints: dict = field(default_factory=dict)

    @classmethod
    def load(cls, ckpt_dir):
        p = Path(ckpt_dir) / "state.json"
        return cls(**json.loads(p.read_text())) if p.exists() else cls()

    def save(self, ckpt_dir):
        (Path(ckpt_dir) / "state.json").write_text(json.dumps(asdict(self), indent=2))

    def next_stage(self):
        return STAGES[len(self.completed)] if len(self.completed) < len(STAGES) else None

    def begin(self, stage):
        if stage not in STAGES:
            raise ValidationError(f"unknown stage {stage!r}")
        expected = self.next_stage()
        if stage != expected:
            raise ValidationError(f"stage {stage!r} cannot run now; next allowed stage is {expected!r}")
        self.stage = stage
        self.step = 0

    def finish(self, stage, ckpt):
        self.completed.append(stage)
        self.checkpoints[stage] = str(ckpt)
        self.stage = None


# --- optimizer ---------------------------------------------------------------

class RMSProp:
    """Momentum-free adaptive first-order method with bias-corrected second
    moment. ``adaptive=False`` degrades it to plain gradient descent."""

    def __init__(self, params, lr, decay=0.99, eps=1e-8, adaptive=True):
        self.params = list(params)
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.adaptive = adaptive
        self.t = 0
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict):
        self.t += 1
        corr = 1.0 - self.decay**self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            if self.adaptive:
                self.v[i] = self.decay * self.v[i] + (1.0 - self.decay) * g * g
                upd = g / (np.sqrt(self.v[i] / corr) + self.eps)
            else:
                upd = g
            p.data = (p.data - self.lr * upd).astype(p.dtype, copy=False)
            p.grad = None


@contextlib.contextmanager
def frozen(*modules):
    """Stop gradient tracking for every parameter of ``modules``."""
    params = [p for m in modules for p in m.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


# --- data plumbing -----------------------------------------------------------

class TaskData:
    """Float32 arrays for one task: guidance input, D condition, aux, target."""

    def __init__(self, dataset: synth.Dataset, config: TrainConfig):
        self.dataset = dataset
        self.config = config
        if dataset.size != config.image_size:
            raise ValidationError(f"dataset images are {dataset.size}px, config expects {config.image_size}px")
        self._cache = {}

    def item(self, key):
        if key not in self._cache:
            s = self.dataset.sample(key)
            gt = s["gt"]
            f = self.config.sr_factor
            if f is None:
                g = s["sketch"]
                cond, aux = g, None
            else:
                g = s[f"lr{f}"]
                aux = synth.bicubic_upsample(g, self.config.image_size).astype(np.float32)
                cond = aux
            self._cache[key] = {"g": g, "cond": cond, "aux": aux, "gt": gt}
        return self._cache[key]

    def batch(self, keys):
        items = [self.item(k) for k in keys]
        out = {}
        for name in ("g", "cond", "aux", "gt"):
            vals = [it[name] for it in items]
            out[name] = None if vals[0] is None else Tensor(np.stack(vals).astype(np.float32))
        return out


class Batcher:
    """Deterministic epoch-wise shuffling of the training split."""

    def __init__(self, keys, batch, seed):
        if not keys:
            raise ValidationError("training split is empty")
        self.keys = list(keys)
        self.batch = batch
        self.rng = np.random.default_rng(seed)
        self.order = []
        self.epoch_steps = max(1, len(self.keys) // batch)

    def next(self):
        if len(self.order) < self.batch:
            self.order = [self.keys[i] for i in self.rng.permutation(len(self.keys))]
        out, self.order = self.order[:self.batch], self.order[self.batch:]
        return out


class LossLog:
    """Append-only CSV of per-step loss terms."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self.fh = self.path.open("a", newline="")
        self.writer = csv.writer(self.fh)
        if new:
            self.writer.writerow(CSV_COLUMNS)

    def write(self, step, parts: dict, total):
        row = [step] + [repr(float(parts[k].data)) if k in parts else "0.0" for k in ("pixel", "adv", "style", "fm")]
        row += [repr(float(total.data)), repr(float(parts["texture"].data)) if "texture" in parts else "0.0"]
        self.writer.writerow(row)

    def close(self):
        self.fh.close()


def _finite(*tensors):
    return all(np.all(np.isfinite(t.data)) for t in tensors)


def _require_finite(parts: dict, where: str):
    bad = [k for k, v in parts.items() if not _finite(v)]
    if bad:
        raise NumericalAbort(f"{where}: non-finite {', '.join(bad)} loss")


# --- the trainer -------------------------------------------------------------

class Trainer:
    """Holds networks, the frozen style extractor and the Gabor bank; exposes
    single-step updates for each stage."""

    def __init__(self, config: TrainConfig, gb=None, db=None, gr=None, dr=None):
        c = config
        self.config = c
        self.bank = S.build_bank()
        self.extractor = L.FeatureExtractor(seed=c.sub_seed("extractor"))
        self.gb = gb or N.basic_net(c.task, c.image_size, c.base_channels, seed=c.sub_seed("gb"))
        self.db = db or N.discriminator(c.task, seed=c.sub_seed("db"))
        self.gr = gr or N.regen_net(c.task, c.base_channels, c.regen_depth, seed=c.sub_seed("gr"))
        self.dr = dr or N.discriminator(c.task, seed=c.sub_seed("dr"))

    def optimizer(self, modules, lr):
        params = [p for m in modules for p in m.parameters()]
        return RMSProp(params, lr, decay=self.config.rms_decay, adaptive=self.config.adaptive)

    def _disc_step(self, disc, opt, real, fake, cond):
        with Tape() as tape:
            rs, _ = N.forward_disc(disc, real, cond)
            fs, _ = N.forward_disc(disc, Tensor(fake.data), cond)
            loss = L.disc_loss(rs, fs)
        if not _finite(loss):
            raise NumericalAbort("discriminator loss is not finite")
        opt.step(tape.backward(loss))
        return loss

    def basic_step(self, b, opt_g, opt_d):
        c = self.config
        with frozen(self.db), Tape() as tape:
            coarse = N.forward_gb(self.gb, b["g"])
            scores, _ = N.forward_disc(self.db, coarse, b["cond"])
            parts = {"pixel": L.pixel_loss(coarse, b["gt"]), "adv": L.adv_loss_generator(scores)}
            _require_finite(parts, "basic stage")
            weights = L.LossWeights(c.weights.w_pixel, c.weights.w_adv, 0.0, 0.0)
            total = L.total_objective(parts, weights)
            if c.texture_weight > 0:
                parts["texture"] = L.texture_loss(coarse, b["gt"], self.bank)
                total = T.add(total, T.scale(parts["texture"], c.texture_weight))
        if not _finite(total, *parts.values()):
            raise NumericalAbort("basic-stage loss is not finite")
        grads = tape.backward(total)
        opt_g.step(grads)
        self._disc_step(self.db, opt_d, b["gt"], coarse, b["cond"])
        return parts, total, grads

    def structure(self, image: Tensor) -> Tensor:
        return S.encode_orientation(S.extract(image, self.bank))

    def regen_objective(self, final, b):
        scores, fake_feats = N.forward_disc(self.dr, final, b["cond"])
        with frozen(self.dr):
            _, real_feats = N.forward_disc(self.dr, b["gt"], b["cond"])
        parts = {
            "pixel": L.pixel_loss(final, b["gt"]),
            "adv": L.adv_loss_generator(scores),
            "style": L.style_loss(final, b["gt"], self.extractor),
            "fm": L.fm_loss(real_feats, fake_feats),
        }
        _require_finite(parts, "re-generation")
        return parts, L.total_objective(parts, self.config.weights)

    def regen_step(self, b, coarse: Tensor, struct: Tensor, opt_g, opt_d):
        with frozen(self.dr), Tape() as tape:
            final = N.forward_gr(self.gr, coarse, struct, b["aux"])
            parts, total = self.regen_objective(final, b)
        if not _finite(total, *parts.values()):
            raise NumericalAbort("regen-stage loss is not finite")
        grads = tape.backward(total)
        opt_g.step(grads)
        self._disc_step(self.dr, opt_d, b["gt"], final, b["cond"])
        return parts, total, grads

    def joint_forward(self, b):
        coarse = N.forward_gb(self.gb, b["g"])
        final = N.forward_gr(self.gr, coarse, self.structure(coarse), b["aux"])
        return coarse, final

    def joint_step(self, b, opt_g, opt_d, apply=True):
        with frozen(self.dr), Tape() as tape:
            _, final = self.joint_forward(b)
            parts, total = self.regen_objective(final, b)
        if not _finite(total, *parts.values()):
            raise NumericalAbort("joint-stage loss is not finite")
        grads = tape.backward(total)
        if apply:
            opt_g.step(grads)
            self._disc_step(self.dr, opt_d, b["gt"], final, b["cond"])
        return parts, total, grads

    def standin_coarse(self, b):
        """Coarse input for ground-truth-sourced regen training when no G_b
        checkpoint exists: the bicubic upsample for super-resolution, a
        blurred target for sketches."""
        if b["aux"] is not None:
            return b["aux"]
        from scipy.ndimage import gaussian_filter

        return Tensor(gaussian_filter(b["gt"].data, sigma=(0, 0, 1.5, 1.5)).astype(np.float32))


# --- stage drivers -----------------------------------------------------------

def _stage_paths(ckpt_dir, stage):
    root = Path(ckpt_dir)
    root.mkdir(parents=True, exist_ok=True)
    return root / stage, root / f"losses_{stage}.csv"


def _meta(config, stage, step):
    return {"stage": stage, "step": step, "seed": config.seed, "task": config.task, "config": config.to_dict()}


def _run_loop(stage, config, data: TaskData, ckpt_dir, step_fn, save_modules):
    ckpt, csv_path = _stage_paths(ckpt_dir, stage)
    batcher = Batcher(data.dataset.split("train"), config.batch, config.sub_seed(f"batches-{stage}"))
    logger = LossLog(csv_path)
    steps = config.steps(stage)
    try:
        for step in range(steps):
            keys = batcher.next()
            parts, total = step_fn(keys, data.batch(keys))
            logger.write(step, parts, total)
            if (step + 1) % batcher.epoch_steps == 0 or step + 1 == steps:
                N.save_checkpoint(ckpt, save_modules(), _meta(config, stage, step + 1))
    finally:
        logger.close()
    log.info("%s: %d steps done, checkpoint %s", stage, steps, ckpt)
    return ckpt


def _load_pair(path, gen_key="gen", disc_key="disc"):
    if path is None or not (Path(path) / "manifest.json").exists():
        raise ValidationError(f"checkpoint {path} not found")
    mods, manifest = N.load_checkpoint(path)
    return mods[gen_key], mods.get(disc_key), manifest


def train_basic(config: TrainConfig, dataset: synth.Dataset, ckpt_dir):
    data = TaskData(dataset, config)
    tr = Trainer(config)
    opt_g = tr.optimizer([tr.gb], config.lr_base)
    opt_d = tr.optimizer([tr.db], config.lr_base)

    def step(keys, b):
        parts, total, _ = tr.basic_step(b, opt_g, opt_d)
        return parts, total

    return _run_loop("basic", config, data, ckpt_dir, step, lambda: {"gen": tr.gb, "disc": tr.db})


def train_regen(config: TrainConfig, dataset: synth.Dataset, ckpt_dir, source="ground_truth",
                basic_ckpt=None, regen_ckpt=None):
    """Train G_r with structure taken from ``source`` ('ground_truth' or 'coarse').

    G_b (if given) is frozen; its coarse outputs are computed once up front.
    ``regen_ckpt`` continues a previous regen stage (G_r and its discriminator).
    """
    if source not in ("ground_truth", "coarse"):
        raise ValidationError(f"unknown structure source {source!r}")
    if source == "coarse" and basic_ckpt is None:
        raise ValidationError("coarse-sourced regen training needs a basic checkpoint")
    data = TaskData(dataset, config)
    gb = _load_pair(basic_ckpt)[0] if basic_ckpt is not None else None
    gr = dr = None
    if regen_ckpt is not None:
        gr, dr, _ = _load_pair(regen_ckpt)
    tr = Trainer(config, gb=gb, gr=gr, dr=dr)
    stage = "regen_gt_source" if source == "ground_truth" else "regen_coarse_source"

    # G_b is frozen here, so coarse images and their structure maps are constants
    cache = {}
    for key in dataset.split("train"):
        b = data.batch([key])
        coarse = tr.gb(b["g"]) if gb is not None else tr.standin_coarse(b)
        src = b["gt"] if source == "ground_truth" else coarse
        cache[key] = (coarse.data[0], tr.structure(src).data[0])

    opt_g = tr.optimizer([tr.gr], config.lr_base)
    opt_d = tr.optimizer([tr.dr], config.lr_base)

    def step(keys, b):
        coarse = Tensor(np.stack([cache[k][0] for k in keys]))
        struct = Tensor(np.stack([cache[k][1] for k in keys]))
        parts, total, _ = tr.regen_step(b, coarse, struct, opt_g, opt_d)
        return parts, total

    return _run_loop(stage, config, data, ckpt_dir, step, lambda: {"gen": tr.gr, "disc": tr.dr})


def train_joint(config: TrainConfig, basic_ckpt, regen_ckpt, dataset: synth.Dataset, ckpt_dir):
    data = TaskData(dataset, config)
    gb, _, _ = _load_pair(basic_ckpt)
    gr, dr, _ = _load_pair(regen_ckpt)
    ref = Trainer(config)
    for got, want in ((gb, ref.gb), (gr, ref.gr), (dr, ref.dr)):
        if got.config() | {"seed": 0} != want.config() | {"seed": 0}:
            raise ValidationError("checkpoint architecture does not match the configuration")
    tr = Trainer(config, gb=gb, gr=gr, dr=dr)
    opt_g = tr.optimizer([tr.gb, tr.gr], config.lr_finetune)
    opt_d = tr.optimizer([tr.dr], config.lr_finetune)

    def step(keys, b):
        parts, total, _ = tr.joint_step(b, opt_g, opt_d)
        return parts, total

    return _run_loop("joint", config, data, ckpt_dir, step,
                     lambda: {"gen_basic": tr.gb, "gen": tr.gr, "disc": tr.dr})


def run_stage(stage, config: TrainConfig, dataset: synth.Dataset, ckpt_dir):
    """Run one stage in order, reading earlier checkpoints from ``ckpt_dir``."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    state = StageState.load(ckpt_dir)
    state.begin(stage)
    root = ckpt_dir
    if stage == "basic":
        ckpt = train_basic(config, dataset, root)
    elif stage == "regen_gt_source":
        ckpt = train_regen(config, dataset, root, "ground_truth", basic_ckpt=root / "basic")
    elif stage == "regen_coarse_source":
        ckpt = train_regen(config, dataset, root, "coarse", basic_ckpt=root / "basic", regen_ckpt=root / "regen_gt_source")
    else:
        ckpt = train_joint(config, root / "basic", root / "regen_coarse_source", dataset, root)
    state.finish(stage, ckpt)
    state.step = config.steps(stage)
    state.save(ckpt_dir)
    return ckpt


def run_pipeline(config: TrainConfig, dataset: synth.Dataset, ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    state = StageState.load(ckpt_dir)
    while state.next_stage() is not None:
        run_stage(state.next_stage(), config, dataset, ckpt_dir)
        state = StageState.load(ckpt_dir)
    return ckpt_dir


# --- evaluation --------------------------------------------------------------

def image_metrics(output, target, bank, extractor) -> dict:
    out = Tensor(np.asarray(output, dtype=np.float32))
    tgt = Tensor(np.asarray(target, dtype=np.float32))
    tex = float(L.texture_loss(out, tgt, bank).data)
    return {
        "pixel": float(L.pixel_loss(out, tgt).data),
        "texture": tex,
        "texture_per_pixel": tex / (out.shape[-1] * out.shape[-2]),
        "style": float(L.style_loss(out, tgt, extractor).data),
    }


def load_generators(ckpt_dir):
    """(G_b, G_r) from the most advanced checkpoint in ``ckpt_dir``."""
    root = Path(ckpt_dir)
    if (root / "joint" / "manifest.json").exists():
        mods, manifest = N.load_checkpoint(root / "joint")
        return mods["gen_basic"], mods["gen"], manifest
    for stage in ("regen_coarse_source", "regen_gt_source"):
        if (root / stage / "manifest.json").exists() and (root / "basic" / "manifest.json").exists():
            gr, _, manifest = _load_pair(root / stage)
            gb, _, _ = _load_pair(root / "basic")
            return gb, gr, manifest
    raise ValidationError(f"no usable checkpoints under {root}")


def _panel(images):
    h = images[0].shape[-2]
    gap = np.ones((3, h, 2), dtype=np.float32)
    row = []
    for im in images:
        im = np.asarray(im, dtype=np.float32)
        if im.shape[0] == 2:  # sketch: strokes drawn dark inside the mask
            gray = im[0] * (0.35 + 0.65 * im[1])
            im = np.stack([gray] * 3)
        row += [im, gap]
    return np.concatenate(row[:-1], axis=-1)


def evaluate(ckpt_dir, dataset: synth.Dataset, config: TrainConfig, split="test", report=None, panels=None):
    """Per-image and mean pixel/texture/style losses of I_c and I_f against I_gt.

    For super-resolution tasks the bicubic input is scored as a third
    candidate ("upsampled"). Writes a JSON report and, if ``panels`` is given,
    one ``input | I_c | I_f | I_gt`` PNG per image.
    """
    keys = dataset.split(split)
    if not keys:
        raise ValidationError(f"split {split!r} is empty")
    gb, gr, manifest = load_generators(ckpt_dir)
    tr = Trainer(config, gb=gb, gr=gr)
    data = TaskData(dataset, config)
    if panels is not None:
        Path(panels).mkdir(parents=True, exist_ok=True)
    items = []
    for key in keys:
        b = data.batch([key])
        coarse, final = tr.joint_forward(b)
        entry = {
            "id": key,
            "coarse": image_metrics(coarse.data[0], b["gt"].data[0], tr.bank, tr.extractor),
            "final": image_metrics(final.data[0], b["gt"].data[0], tr.bank, tr.extractor),
        }
        if b["aux"] is not None:
            entry["upsampled"] = image_metrics(b["aux"].data[0], b["gt"].data[0], tr.bank, tr.extractor)
        items.append(entry)
        if panels is not None:
            shown = b["g"].data[0] if b["aux"] is None else b["aux"].data[0]
            synth.save_png(Path(panels) / f"{key}.png",
                           _panel([shown, coarse.data[0], final.data[0], b["gt"].data[0]]))
    means = {}
    for cand in [k for k in items[0] if k != "id"]:
        means[cand] = {m: float(np.mean([it[cand][m] for it in items])) for m in items[0][cand]}
    result = {
        "task": config.task, "split": split, "count": len(items),
        "checkpoint_stage": manifest.get("stage"), "mean": means, "items": items,
    }
    if report is not None:
        Path(report).parent.mkdir(parents=True, exist_ok=True)
        Path(report).write_text(json.dumps(result, indent=2, sort_keys=True))
    return result
