import numpy as np
import pytest
import torch

from dpat.config import make_config


def tiny_config(**train):
    """2 blocks, D=8, T=2, N=4 patches; float64 and no stand-in pretraining."""
    overrides = {
        "model": {
            "blocks": 2, "dim": 8, "heads": 2, "patch": 4, "frames": 2, "height": 8, "width": 8,
            "channels": 1, "pretrain_steps": 0, "dtype": "float64", "temporal_pos_embed": True,
            "adapter_up_init_std": 0.3,
        },
        "prompts": {"agnostic_length": 2, "specific_length": 1, "agnostic_layers": [1, 1], "specific_layers": [2, 2]},
        "train": {"batch_size": 4, "epochs": 1, **train},
        "data": {"tasks": 2, "shapes": 2, "motions": 2, "train_per_class": 3, "test_per_class": 2,
                 "sprite_size": 3, "speed": 1},
    }
    return make_config(None, overrides)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


# acceptance criteria append (number, passed, detail) here; printed once at the end of the session
ACCEPTANCE = []


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
