"""Shared fixtures: the reference training run reused across acceptance checks.

The heavy fixtures are session-scoped and lazy, so ordinary unit-test runs
never pay for them.
"""
import time

import pytest

from awsdf.dataio import DEFAULT_INTRINSICS, aw_apartment, synth_sequence
from awsdf.trainer import Engine

ACCEPT_SEED = 7
ACCEPT_STEPS = 2000
ACCEPT_FRAMES = 120

_criterion_lines = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    _criterion_lines[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_criterion_lines):
            terminalreporter.write_line(_criterion_lines[n])


@pytest.fixture
def criterion_report():
    return record_criterion


@pytest.fixture(scope="session")
def apartment_data():
    """Noiseless orbit sequence over the built-in apartment scene."""
    scene = aw_apartment()
    K = DEFAULT_INTRINSICS
    seq = synth_sequence(scene, n_frames=ACCEPT_FRAMES)
    triples = list(seq.frames())
    frames = [(d, p) for _, d, p in triples]
    return scene, K, triples, frames


@pytest.fixture(scope="session")
def trained_engine(apartment_data):
    """Reference run: default config, fixed seed, 2000 steps."""
    scene, K, triples, frames = apartment_data
    eng = Engine(K, seed=ACCEPT_SEED)
    t0 = time.perf_counter()
    eng.run_sequence(triples, total_steps=ACCEPT_STEPS)
    elapsed = time.perf_counter() - t0
    return eng, elapsed


@pytest.fixture(scope="session")
def ablated_engine(apartment_data):
    """Same run with surfel supervision fully disabled (mask and loss)."""
    scene, K, triples, frames = apartment_data
    eng = Engine(K, seed=ACCEPT_SEED, surfel_share=0.0, use_surfel_mask=False)
    eng.run_sequence(triples, total_steps=ACCEPT_STEPS)
    return eng
