import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_patch(rng, h, w):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): one acceptance criterion, summarised at the end")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
    _criteria[number] = (title, status, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        title, status, seconds, detail = _criteria[number]
        line = f"criterion {number:2d}  {status}  {title} ({seconds:.1f} s)"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
