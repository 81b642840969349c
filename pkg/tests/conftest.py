import pytest

from semirain.net import NetConfig
from semirain.rain import build_dataset, write_scenes
from semirain.trainer import TrainConfig


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small styleA pairs plus styleB unsupervised and validation sets."""
    root = tmp_path_factory.mktemp("data")
    for name, mode, k in (("sup", "styleA", 0), ("unsup", "styleB", 1), ("val", "styleB", 2)):
        write_scenes(root / "scenes" / name, 3, 40, seed=k)
        build_dataset(root / "scenes" / name, root / name, mode, "sparse", 3, seed=10 + k)
    return root


@pytest.fixture
def tiny_config(tiny_data, tmp_path):
    return TrainConfig(
        supervised_dir=str(tiny_data / "sup"),
        unsupervised_dir=str(tiny_data / "unsup"),
        validation_dir=str(tiny_data / "val"),
        out_dir=str(tmp_path / "run"),
        patch_size=8,
        batch_size=10,
        epochs=2,
        net=NetConfig(layers=3, channels=4),
        supervised_patches=40,
        unsupervised_patches=30,
        train_eval_patches=10,
        em_subsample_size=500,
        lr_decay_every=1,
        record_wall_clock=False,
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and getattr(mod, "RESULTS", None):
            terminalreporter.section("acceptance criteria")
            for line in mod.RESULTS:
                terminalreporter.write_line(line)
