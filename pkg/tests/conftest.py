import json
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from hers.pipeline import PipelineConfig, run_all


@dataclass
class DefaultRun:
    cfg: PipelineConfig
    out: Path
    report: dict
    elapsed: float


@pytest.fixture(scope="session")
def default_run(tmp_path_factory) -> DefaultRun:
    """One full pipeline run at the pinned default config, shared by all tests."""
    cfg = PipelineConfig.default(seed=42)
    out = tmp_path_factory.mktemp("default_run")
    started = time.perf_counter()
    report_path = run_all(cfg, out)
    elapsed = time.perf_counter() - started
    report = json.loads(report_path.read_text(encoding="utf-8"))
    return DefaultRun(cfg=cfg, out=out, report=report, elapsed=elapsed)


@pytest.fixture(scope="session")
def tiny_config() -> PipelineConfig:
    """A minutes-to-milliseconds config for structural pipeline tests."""
    return PipelineConfig.default(
        seed=7,
        n_per_domain=24,
        pretrain_steps=30,
        expert_steps=40,
        timesteps=20,
        hidden=(16, 16, 16),
        eval_samples=48,
        batch_size=8,
    )
