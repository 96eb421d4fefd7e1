import pytest

from nuc.knn_index import build_index
from nuc.synth import SynthConfig, generate

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def small_data():
    cfg = SynthConfig(n_classes=5, dim=8, n_train_per_class=80, n_test_per_class=30,
                      separation=5.0, overlap=0.2, n_ood_per_cluster=40, seed=3)
    return generate(cfg)


@pytest.fixture(scope="session")
def small_index(small_data):
    return build_index(small_data.train)


@pytest.fixture(scope="session")
def default_data():
    return generate(SynthConfig())


@pytest.fixture(scope="session")
def default_index(default_data):
    return build_index(default_data.train)


@pytest.fixture
def record_criterion():
    """Record a pass/fail line for an acceptance criterion."""

    def record(number, title, passed, detail=""):
        _ACCEPTANCE.append((number, title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        mark = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{mark}] {number}. {title}  {detail}".rstrip())
