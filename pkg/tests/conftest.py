from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ROOT = Path(__file__).resolve().parents[1]
DEMO_CONFIG = ROOT / "configs" / "demo.json"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_host():
    """Untrained two-layer GDN host, small enough for exhaustive checks."""
    from cachesae.hosts import HostConfig, init_host
    return init_host(HostConfig("gated_delta", n_layers=2, n_heads=2, d_k=6, d_v=5, d_model=12,
                                vocab_size=11, d_mlp=16, seed=3))


@pytest.fixture(scope="session")
def tiny_ssm():
    from cachesae.hosts import HostConfig, init_host
    return init_host(HostConfig("diagonal_ssm", n_layers=2, n_heads=2, d_k=6, d_v=5, d_model=12,
                                vocab_size=11, d_mlp=16, seed=4))


@pytest.fixture(scope="session")
def demo_runs(tmp_path_factory):
    """The bundled demo pipeline, run twice; returns (dirA, dirB, seconds for A)."""
    from cachesae.config import load_config
    from cachesae.pipeline import run_pipeline

    cfg = load_config(DEMO_CONFIG)
    a = tmp_path_factory.mktemp("demoA")
    b = tmp_path_factory.mktemp("demoB")
    t0 = time.perf_counter()
    run_pipeline(cfg, a)
    elapsed = time.perf_counter() - t0
    run_pipeline(cfg, b)
    return a, b, elapsed


@pytest.fixture(scope="session")
def demo_artifacts(demo_runs):
    """Trained host, centered capture and dictionary from the first demo run."""
    from cachesae.pipeline import Run
    from cachesae.config import load_config

    run = Run(load_config(DEMO_CONFIG), demo_runs[0])
    return run


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def gate(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        with capsys.disabled():
            print(f"\nCRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
