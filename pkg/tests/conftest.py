"""Acceptance verdict lines plus the end-to-end experiments shared by the acceptance tests."""

import time

import pytest

from natias.evalharness import DataConfig, DetectorSpec, ExperimentConfig, transfer_experiment

_VERDICTS: dict[int, str] = {}
_RUNS: dict[int, tuple] = {}


@pytest.fixture(scope="session")
def verdict():
    def record(number: int, passed: bool, detail: str) -> bool:
        _VERDICTS[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])


def acceptance_experiment(seed: int) -> ExperimentConfig:
    # 2000 synthetic 64x64 covers split 1400/100/500; every test cover is attacked
    return ExperimentConfig(data=DataConfig(n_images=2000, size=64, seed=seed),
                            target=DetectorSpec("target", seed=seed), seed=seed)


@pytest.fixture(scope="session")
def transfer_run():
    """``transfer_run(seed) -> (TransferResult, seconds)``, computed once per seed."""
    def get(seed: int):
        if seed not in _RUNS:
            t0 = time.perf_counter()
            result = transfer_experiment(acceptance_experiment(seed))
            _RUNS[seed] = (result, time.perf_counter() - t0)
        return _RUNS[seed]
    return get
