import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from retinal_landmarks import pipeline, synthetic  # noqa: E402

TRAIN_SEED = 1
CROPS_PER_CLASS = 60

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@dataclass
class TrainedSynthetic:
    config: pipeline.PipelineConfig
    artifacts: pipeline.Artifacts
    crop_dir: Path
    model_dir: Path
    seconds: float


@pytest.fixture(scope="session")
def trained_synthetic(tmp_path_factory) -> TrainedSynthetic:
    """Crop set written to disk by the synthetic generator, then ``train``."""
    root = tmp_path_factory.mktemp("synthetic_model")
    cfg = pipeline.PipelineConfig()
    t0 = time.perf_counter()
    synthetic.write_training_set(
        TRAIN_SEED, CROPS_PER_CLASS, root / "train", negative_centres=pipeline.candidate_centres(cfg)
    )
    artifacts = pipeline.train(root / "train", cfg, root / "model")
    return TrainedSynthetic(cfg, artifacts, root / "train", root / "model", time.perf_counter() - t0)


@pytest.fixture(scope="session")
def fundus_1000() -> synthetic.SyntheticFundus:
    return synthetic.render_fundus(1000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
