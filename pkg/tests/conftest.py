import numpy as np
import pytest

from bindsep.model import ModelConfig, build_model
from bindsep.synthdata import TaskSpec, generate_task_stream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(model_dim=8, num_layers=1, num_heads=2, vocab_size=64, max_seq_len=24,
                       prompt_len=2, prompt_layers=1, num_frames=8, frame_feature_dim=16, max_tasks=4)


@pytest.fixture
def tiny_params(tiny_config):
    return build_model(tiny_config, 0)


@pytest.fixture(scope="session")
def small_stream():
    specs = [TaskSpec("COUNT", 24, 8, seed=0), TaskSpec("AFTER", 24, 8, seed=1)]
    return generate_task_stream(specs, master_seed=0)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
