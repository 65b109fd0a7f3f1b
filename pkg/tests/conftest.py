import pytest

from bevfuse.config import ExperimentConfig, dump_config
from bevfuse.synthetic import write_dataset

TINY = {
    "cameras.width": 16, "cameras.height": 4, "channels.c_lidar": 8, "channels.c_camera": 4,
    "channels.bev_hidden": [4, 4, 4], "scene.n_objects": [1, 3], "scene.ground_points": 200,
    "scene.train_scenes": 3, "scene.eval_scenes": 3, "train.iterations": 3, "train.batch": 2,
}


@pytest.fixture(scope="session")
def tiny_cfg():
    return ExperimentConfig().replace(**TINY)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_cfg):
    root = tmp_path_factory.mktemp("tiny")
    write_dataset(root / "data", tiny_cfg.scene_spec(), 3)
    (root / "tiny.toml").write_text(dump_config(tiny_cfg))
    return root


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
