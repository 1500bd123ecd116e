import pytest

from gmvlab.core import ClickSample, PurchaseEvent
from gmvlab.datagen import GeneratorConfig, generate


def make_sample(click_id=0, click_ts=0, purchases=((0, 1.0),), features=(1, 2)):
    return ClickSample(click_id, tuple(features), click_ts,
                       tuple(PurchaseEvent(ts, float(p)) for ts, p in purchases))


@pytest.fixture(scope="session")
def small_samples():
    return generate(GeneratorConfig(seed=3, n_clicks=1500))


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
