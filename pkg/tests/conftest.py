import numpy as np
import pytest
import torch

from neuflow import NeuFlow, NeuFlowConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    return NeuFlow(NeuFlowConfig.tiny()).eval()


@pytest.fixture(scope="session")
def base_model():
    return NeuFlow(NeuFlowConfig.base()).eval()


def random_images(gen, n, h, w):
    return torch.rand(n, 3, h, w, generator=gen) * 2 - 1


ACCEPTANCE_TITLES = {
    1: "correlation oracle equivalence",
    2: "global matching",
    3: "convexity properties",
    4: "warp identities",
    5: "gradient check",
    6: "overfit run",
    7: "parameter budget",
    8: "dual-path latency ordering",
    9: "format round-trips",
    10: "streaming equivalence",
}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the end-of-run summary."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, ok: bool, detail: str) -> None:
        results[number] = (ok, detail)
        print(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {ACCEPTANCE_TITLES[number]}: {detail}")
        assert ok, detail

    return record


_RESULTS = pytest.StashKey[dict]()


_ran_numbers: set[int] = set()


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py::test_" in report.nodeid:
        _ran_numbers.add(int(report.nodeid.split("::test_")[1].split("_")[0]))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results and not _ran_numbers:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in ACCEPTANCE_TITLES.items():
        if number in results:
            ok, detail = results[number]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
        elif number in _ran_numbers:
            terminalreporter.write_line(f"[FAIL] {number:>2}. {title}: crashed before reporting")
        else:
            terminalreporter.write_line(f"[ -- ] {number:>2}. {title}: not run")
