import numpy as np
import pytest

CRITERIA = {
    1: "gradient correctness (rel err <= 1e-6, h=1e-5)",
    2: "second-order penalty gradient (rel err <= 1e-5)",
    3: "FGSM is the exact worst case for binary linear models (eps=0.1, 11x11 grid)",
    4: "JSMA pair selection equals exhaustive search (100 linear models, 4 pixels)",
    5: "black-box robustness of gradient regularization (eps=0.4, >= +20 points)",
    6: "distilled gradient underflow (median norm ratio <= 1e-3, floor 1e-20)",
    7: "TGSM trend (regularized victim beats every non-regularized victim)",
    8: "combined defense >= each single defense (normal generator, eps=0.4, 2-point band)",
    9: "softmax at T=1e6 within 1e-4 of 1/K",
    10: "CLI determinism (train/attack/eval bit-identical)",
}
_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record_criterion():
    def record(n: int, passed: bool, detail: str) -> bool:
        _RESULTS[n] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in _RESULTS:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN: {title} | errored before measuring, or deselected")
            continue
        passed, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}: {title} | {detail}")
