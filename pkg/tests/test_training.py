import json
import math

import numpy as np
import pytest

from conftest import micro_config
from hairsynth import losses as L
from hairsynth import networks as N
from hairsynth import training as tr
from hairsynth.tensor import Tensor


def read_csv(path):
    return np.genfromtxt(path, delimiter=",", names=True)


def snapshot(module):
    return {k: v.copy() for k, v in module.snapshot().items()}


def same(a, b):
    return all(a[k].tobytes() == b[k].tobytes() for k in a)


# --- configuration and stage order ---------------------------------------------

def test_config_round_trips_through_json(tmp_path):
    cfg = micro_config(task="hair_sr8", seed=11, texture_weight=0.0)
    cfg.save(tmp_path / "c.json")
    back = tr.TrainConfig.load(tmp_path / "c.json")
    assert back == cfg
    assert set(json.loads((tmp_path / "c.json").read_text())) == set(cfg.to_dict())


@pytest.mark.parametrize("bad", [
    {"lr_finetune": 1e-3, "lr_base": 1e-4},
    {"lr_finetune": 1e-3, "lr_base": 1e-3},
    {"stage_steps": (1, 0, 1, 1)},
    {"stage_steps": (1, 1, 1)},
    {"task": "colorize"},
    {"batch": 0},
    {"texture_weight": -1.0},
    {"weights": {"w_pixel": 0, "w_adv": 0, "w_style": 0, "w_fm": 0}},
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        tr.TrainConfig.from_dict({**micro_config().to_dict(), **bad})


def test_unknown_config_field_rejected():
    with pytest.raises(tr.ValidationError):
        tr.TrainConfig.from_dict({"learning_rate": 1.0})


def test_stage_order_is_enforced():
    state = tr.StageState()
    for stage in ("regen_gt_source", "joint", "regen_coarse_source"):
        with pytest.raises(tr.ValidationError):
            state.begin(stage)
    for stage in tr.STAGES:
        state.begin(stage)
        state.finish(stage, f"/ck/{stage}")
    assert state.next_stage() is None
    with pytest.raises(tr.ValidationError):
        state.begin("basic")


def test_run_stage_out_of_order_fails_before_training(tmp_path, micro_data):
    with pytest.raises(tr.ValidationError):
        tr.run_stage("joint", micro_config(), micro_data, tmp_path)
    assert not list(tmp_path.glob("losses_*"))


# --- optimizer -------------------------------------------------------------------

def test_plain_descent_step():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tr.RMSProp([p], lr=0.1, adaptive=False).step({p: np.array([0.5, -1.0])})
    np.testing.assert_allclose(p.data, [0.95, 2.1])


def test_first_adaptive_step_has_magnitude_lr():
    # bias correction makes the first second-moment estimate exactly g^2
    p = Tensor(np.zeros(3), requires_grad=True)
    tr.RMSProp([p], lr=0.01).step({p: np.array([3.0, -0.2, 1e-3])})
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_missing_gradients_leave_parameters_alone():
    p = Tensor(np.ones(2), requires_grad=True)
    tr.RMSProp([p], lr=1.0).step({})
    np.testing.assert_array_equal(p.data, 1.0)


# --- basic stage -----------------------------------------------------------------

def test_one_basic_step_is_finite_and_checkpointed(tmp_path, micro_data):
    cfg = micro_config(stage_steps=(1, 1, 1, 1))
    ckpt = tr.train_basic(cfg, micro_data, tmp_path)
    rows = read_csv(tmp_path / "losses_basic.csv")
    assert all(math.isfinite(float(rows[k])) for k in ("pixel", "adv", "total", "texture"))
    mods, manifest = N.load_checkpoint(ckpt)
    assert manifest["stage"] == "basic" and manifest["step"] == 1
    again = tmp_path / "copy"
    N.save_checkpoint(again, mods, manifest)
    mods2, _ = N.load_checkpoint(again)
    assert same(mods["gen"].snapshot(), mods2["gen"].snapshot())


def test_zero_texture_weight_leaves_pixel_plus_adv(micro_data):
    cfg = micro_config(texture_weight=0.0)
    trainer = tr.Trainer(cfg)
    b = tr.TaskData(micro_data, cfg).batch(micro_data.split("train")[:1])
    opt_g = trainer.optimizer([trainer.gb], cfg.lr_base)
    opt_d = trainer.optimizer([trainer.db], cfg.lr_base)
    parts, total, _ = trainer.basic_step(b, opt_g, opt_d)
    assert "texture" not in parts
    expected = L.total_objective({**parts, "style": Tensor(0.0), "fm": Tensor(0.0)},
                                 L.LossWeights(cfg.weights.w_pixel, cfg.weights.w_adv, 0, 0))
    assert total.data.tobytes() == expected.data.tobytes()


def test_basic_training_reduces_pixel_loss(tmp_path, micro_data):
    # recorded on this fixture: pixel loss falls well below its step-0 value
    cfg = micro_config(stage_steps=(200, 1, 1, 1))
    tr.train_basic(cfg, micro_data, tmp_path)
    pixel = read_csv(tmp_path / "losses_basic.csv")["pixel"]
    assert pixel[-20:].mean() < pixel[0]


def test_missing_dataset_fails_before_any_step(tmp_path):
    from hairsynth import synth

    with pytest.raises(FileNotFoundError):
        tr.train_basic(micro_config(), synth.Dataset(tmp_path / "missing"), tmp_path)


def test_non_finite_loss_aborts_and_keeps_last_checkpoint(tmp_path, micro_data, monkeypatch):
    cfg = micro_config(stage_steps=(9, 1, 1, 1))
    calls = {"n": 0}
    real = L.pixel_loss

    def flaky(out, tgt):
        calls["n"] += 1
        value = real(out, tgt)
        return Tensor(np.float32(np.nan)) if calls["n"] == 8 else value

    monkeypatch.setattr(tr.L, "pixel_loss", flaky)
    with pytest.raises(tr.NumericalAbort):
        tr.train_basic(cfg, micro_data, tmp_path)
    # one epoch is six steps on the micro split; that checkpoint survives
    _, manifest = N.load_checkpoint(tmp_path / "basic")
    assert manifest["step"] == 6


# --- regen stages ---------------------------------------------------------------

def test_ground_truth_source_needs_no_basic_checkpoint(tmp_path, micro_data):
    ckpt = tr.train_regen(micro_config(), micro_data, tmp_path, source="ground_truth")
    assert (ckpt / "manifest.json").exists()


def test_coarse_source_requires_basic_checkpoint(tmp_path, micro_data):
    with pytest.raises(tr.ValidationError):
        tr.train_regen(micro_config(), micro_data, tmp_path, source="coarse")


def test_basic_generator_is_frozen_during_coarse_regen(tmp_path, micro_data):
    cfg = micro_config(stage_steps=(1, 1, 3, 1))
    basic = tr.train_basic(cfg, micro_data, tmp_path)
    before = {p.name: p.read_bytes() for p in (basic / "gen").iterdir()}
    trainer = tr.Trainer(cfg, gb=N.load_checkpoint(basic)[0]["gen"])
    gb_before = snapshot(trainer.gb)
    data = tr.TaskData(micro_data, cfg)
    b = data.batch(micro_data.split("train")[:1])
    coarse = trainer.gb(b["g"])
    opt_g = trainer.optimizer([trainer.gr], cfg.lr_base)
    opt_d = trainer.optimizer([trainer.dr], cfg.lr_base)
    trainer.regen_step(b, coarse, trainer.structure(coarse), opt_g, opt_d)
    assert same(gb_before, trainer.gb.snapshot())
    tr.train_regen(cfg, micro_data, tmp_path, source="coarse", basic_ckpt=basic)
    assert before == {p.name: p.read_bytes() for p in (basic / "gen").iterdir()}


def test_regen_objective_decreases_over_fifty_steps(tmp_path, micro_data):
    cfg = micro_config(stage_steps=(1, 50, 1, 1))
    tr.train_regen(cfg, micro_data, tmp_path, source="ground_truth")
    total = read_csv(tmp_path / "losses_regen_gt_source.csv")["total"]
    assert np.isfinite(total).all()
    assert total[-10:].mean() < total[:10].mean()


# --- joint stage ----------------------------------------------------------------

def joint_trainer(micro_run, task="sketch2hair", **overrides):
    cfg, ckpt = micro_run[task]
    cfg = tr.TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    gb, _, _ = tr._load_pair(ckpt / "basic")
    gr, dr, _ = tr._load_pair(ckpt / "regen_coarse_source")
    return cfg, tr.Trainer(cfg, gb=gb, gr=gr, dr=dr)


def test_gradient_reaches_basic_generator_through_extraction(micro_run, micro_data):
    cfg, trainer = joint_trainer(micro_run)
    b = tr.TaskData(micro_data, cfg).batch(micro_data.split("train")[:1])
    _, _, grads = trainer.joint_step(b, None, None, apply=False)
    probe = trainer.gb.named_parameters()["enc0.weight"]
    assert np.abs(grads[probe]).max() > 0


def test_joint_step_uses_finetune_learning_rate(micro_run, micro_data):
    cfg, trainer = joint_trainer(micro_run, adaptive=False)
    b = tr.TaskData(micro_data, cfg).batch(micro_data.split("train")[:1])
    probe = trainer.gb.named_parameters()["head.weight"]
    before = probe.data.copy()
    opt_g = trainer.optimizer([trainer.gb, trainer.gr], cfg.lr_finetune)
    opt_d = trainer.optimizer([trainer.dr], cfg.lr_finetune)
    _, _, grads = trainer.joint_step(b, opt_g, opt_d)
    # with moments disabled the step is exactly lr_finetune * gradient
    np.testing.assert_array_equal(probe.data, before - cfg.lr_finetune * grads[probe])
    assert not np.array_equal(probe.data, before - cfg.lr_base * grads[probe])


def test_joint_rejects_incompatible_checkpoints(tmp_path, micro_run, micro_data):
    _, ckpt = micro_run["sketch2hair"]
    wider = micro_config(base_channels=8)
    with pytest.raises(tr.ValidationError):
        tr.train_joint(wider, ckpt / "basic", ckpt / "regen_coarse_source", micro_data, tmp_path)


def test_joint_is_deterministic(tmp_path, micro_run, micro_data):
    cfg, ckpt = micro_run["hair_sr4"]
    outs = []
    for name in ("a", "b"):
        tr.train_joint(cfg, ckpt / "basic", ckpt / "regen_coarse_source", micro_data, tmp_path / name)
        outs.append((tmp_path / name / "losses_joint.csv").read_bytes())
    assert outs[0] == outs[1]


def test_pipeline_writes_state_and_all_checkpoints(micro_run):
    for cfg, ckpt in micro_run.values():
        state = tr.StageState.load(ckpt)
        assert state.completed == list(tr.STAGES)
        for stage in tr.STAGES:
            assert (ckpt / stage / "manifest.json").exists()
            assert len(read_csv(ckpt / f"losses_{stage}.csv")) == cfg.steps(stage)


# --- evaluation -----------------------------------------------------------------

def test_target_against_itself_scores_zero(micro_data):
    trainer = tr.Trainer(micro_config())
    gt = micro_data.sample(micro_data.split("test")[0])["gt"]
    metrics = tr.image_metrics(gt, gt, trainer.bank, trainer.extractor)
    assert all(v == 0.0 for v in metrics.values())


@pytest.mark.parametrize("task", ["sketch2hair", "hair_sr4"])
def test_report_covers_test_split(tmp_path, micro_run, micro_data, task):
    cfg, ckpt = micro_run[task]
    report = tr.evaluate(ckpt, micro_data, cfg, report=tmp_path / "r.json", panels=tmp_path / "p")
    assert report["count"] == len(micro_data.split("test")) == len(report["items"])
    assert json.loads((tmp_path / "r.json").read_text()) == report
    assert len(list((tmp_path / "p").glob("*.png"))) == report["count"]
    assert ("upsampled" in report["mean"]) == (task == "hair_sr4")
    for cand in ("coarse", "final"):
        assert set(report["mean"][cand]) == {"pixel", "texture", "texture_per_pixel", "style"}


def test_empty_split_rejected(micro_run, micro_data):
    cfg, ckpt = micro_run["sketch2hair"]
    micro_data.manifest["empty"] = []
    with pytest.raises(tr.ValidationError):
        tr.evaluate(ckpt, micro_data, cfg, split="empty")
