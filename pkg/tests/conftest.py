import warnings

import pytest
from hypothesis import HealthCheck, settings

from srblab.map_family import logistic

settings.register_profile(
    "default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def fam():
    return logistic()


@pytest.fixture(scope="session")
def mt0(fam):
    from srblab.parameter_select import find_misiurewicz_thurston

    return find_misiurewicz_thurston(fam, (3.6, 3.7), 3, 1)


@pytest.fixture(scope="session")
def tower4(fam):
    from srblab.tower import build_tower

    return build_tower(fam, 4.0, 0.05, K_max=40)


@pytest.fixture(scope="session")
def op4(tower4):
    from srblab.tower import cutoff_family
    from srblab.transfer_op import TowerGrid, TransferOperator, default_lambda

    cf = cutoff_family(tower4)
    return TransferOperator(tower4, cf, TowerGrid(tower4, default_lambda(4.0, 2.0)))


@pytest.fixture(scope="session")
def mt_seq(fam, mt0):
    from srblab.parameter_select import mt_sequence

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return mt_sequence(fam, mt0, 12)


ACCEPTANCE_LINES = []


def pytest_collection_modifyitems(config, items):
    for item in items:
        fn = getattr(item, "function", None)
        if getattr(fn, "is_hypothesis_test", False):
            item.add_marker(pytest.mark.property)
        if "example" in item.name:
            item.add_marker(pytest.mark.trivial)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
