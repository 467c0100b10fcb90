import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Small enough that a full three-phase run takes a few seconds.
TINY = {
    "task": "copy", "content_vocab": 8, "n_polysemous": 0, "min_len": 3, "max_len": 6,
    "n_train": 120, "n_valid": 20, "n_test": 20,
    "bert_layers": 1, "bert_dim": 8, "bert_heads": 2, "bert_ff": 16, "bert_steps": 20, "bert_batch": 16,
    "d_model": 16, "d_ff": 32, "n_heads": 2, "n_layers": 1, "dropout": 0.1,
    "phase_epochs": "1,1,2", "warmup": 20, "peak_lr": 5e-3, "max_tokens": 128, "avg_window": 2, "beam": 2,
}


@pytest.fixture
def tiny_cfg():
    from bertjam.config import resolve
    return resolve(TINY)


# -- acceptance criteria report ------------------------------------------------------

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None or (report.when != "call" and report.passed):
        return
    n, title = mark
    _CRITERIA.setdefault(n, (title, []))[1].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[n]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif outcomes and all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {title}")
