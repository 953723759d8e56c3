import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pytest

from mdan.hierarchy import load_hierarchy
from mdan.model import MdanConfig, MdanModel
from mdan.training import (EvalReport, SyntheticSpec, TrainConfig, TrainResult, channel_stats, evaluate,
                           generate_dataset, normalize, train)

HELD_OUT_BATCH = 32


@dataclass
class ToyRun:
    model: MdanModel
    result: TrainResult
    report: EvalReport
    seconds: float
    x_test: np.ndarray
    paths_test: np.ndarray


@lru_cache(maxsize=1)
def toy_data():
    """2000/500 split of the depth-2 synthetic set, normalised with training statistics."""
    h = load_hierarchy("ekman")
    ds = generate_dataset(SyntheticSpec(n_samples=2500, seed=7), h)
    tr, te = ds.split(2000)
    mean, std = channel_stats(tr.images)
    return h, normalize(tr.images, mean, std), tr.paths, normalize(te.images, mean, std), te.paths


@lru_cache(maxsize=None)
def toy_run(seed: int) -> ToyRun:
    """The standard 20-epoch toy run; cached so several criteria share one training."""
    h, x_tr, p_tr, x_te, p_te = toy_data()
    model = MdanModel(MdanConfig(), h, seed=seed)
    start = time.perf_counter()
    result = train(model, x_tr, p_tr, TrainConfig(seed=seed),
                   held_out=(x_te[:HELD_OUT_BATCH], p_te[:HELD_OUT_BATCH]))
    report = evaluate(model, x_te, p_te)
    return ToyRun(model, result, report, time.perf_counter() - start, x_te, p_te)


@pytest.fixture(scope="session")
def toy_run_0() -> ToyRun:
    return toy_run(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion; the line is also printed at the end of the run."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
