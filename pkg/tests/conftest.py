import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from accovidnet.config import RunConfig  # noqa: E402
from accovidnet.data import generate_synthetic, load_split  # noqa: E402
from accovidnet.model import EncoderConfig, StageConfig  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """16 images per class at 32x32 (12 train / 4 test)."""
    d = tmp_path_factory.mktemp("synth16")
    generate_synthetic(d, per_class=16, size=32, seed=3)
    return d


@pytest.fixture(scope="session")
def synth_manifest(synth_dir):
    from accovidnet.data import load_manifest

    return load_manifest(synth_dir / "manifest.csv")


@pytest.fixture(scope="session")
def synth_train(synth_manifest):
    return load_split(synth_manifest, "train", 32)


@pytest.fixture(scope="session")
def synth_test(synth_manifest):
    return load_split(synth_manifest, "test", 32)


def tiny_encoder_config(size=8):
    return EncoderConfig(
        input_height=size,
        input_width=size,
        stem_channels=4,
        stem_kernel=3,
        stem_stride=1,
        stages=(StageConfig(1, 6, False), StageConfig(2, 8, True)),
    )


@pytest.fixture
def desk_config():
    return RunConfig.desk(32, batch_size=16, epochs_stage1=2, epochs_stage2=2)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
