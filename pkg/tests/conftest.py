import pytest

from hairsynth import synth
from hairsynth import training as tr


def micro_config(**overrides):
    base = dict(stage_steps=(2, 2, 2, 2), image_size=16, base_channels=4, regen_depth=2)
    base.update(overrides)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="session")
def micro_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro_data")
    synth.make_dataset(3, 8, out_dir=root, size=16)
    return synth.Dataset(root)


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory, micro_data):
    """A completed four-stage run per task on the micro dataset."""
    runs = {}
    for task in ("sketch2hair", "hair_sr4"):
        ckpt = tmp_path_factory.mktemp(f"ckpt_{task}")
        cfg = micro_config(task=task)
        tr.run_pipeline(cfg, micro_data, ckpt)
        runs[task] = (cfg, ckpt)
    return runs
