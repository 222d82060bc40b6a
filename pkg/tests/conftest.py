import pytest

from drivelatent.config import load_config
from drivelatent.scenario import GeneratorConfig, generate_dataset

MICRO_GEN = GeneratorConfig(n=4, height=16, width=24)

MICRO_OVERRIDES = {
    "epochs": 1, "batch_size": 2,
    "model": {
        "encoder": {"image_size": [16, 24], "channels": 16, "depth": 1, "heads": 2, "static_depth": 1},
        "decoder": {"ego_layers": 1},
        "dit": {"depth": 1, "heads": 2, "traj_depth": 1, "frame_steps": 3, "traj_steps": 2},
    },
    "objective": {"sigreg": {"projections": 4, "max_tokens": 64}},
}


def micro_config(**extra):
    return load_config(overrides=[MICRO_OVERRIDES, extra])


@pytest.fixture(scope="session")
def micro_scenes():
    return generate_dataset(range(6), MICRO_GEN)


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory, micro_scenes):
    from drivelatent.scenario import write_dataset

    path = tmp_path_factory.mktemp("micro_data")
    write_dataset(path, micro_scenes)
    return path


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
