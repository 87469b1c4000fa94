import numpy as np
import pytest
from hypothesis import settings

from segens.types import SampleTensor, Transform

settings.register_profile("segens", max_examples=60, deadline=None)
settings.load_profile("segens")

SAT = 40.0

_acceptance = []


def rect_sample(rects, h, w, c_total, classes=None, transform=Transform()):
    """One saturated query per rectangle ``(y0, x0, y1, x1)``."""
    p = len(rects)
    classes = list(range(p)) if classes is None else classes
    logits = np.full((p, c_total), -SAT, dtype=np.float32)
    masks = np.full((p, h, w), -SAT, dtype=np.float32)
    for q, ((y0, x0, y1, x1), k) in enumerate(zip(rects, classes)):
        logits[q, k] = SAT
        masks[q, y0:y1, x0:x1] = SAT
    return SampleTensor(logits, masks, transform)


def random_sample(gen, p, c_total, h, w, scale=3.0, transform=Transform()):
    return SampleTensor((scale * gen.standard_normal((p, c_total))).astype(np.float32),
                        (scale * gen.standard_normal((p, h, w))).astype(np.float32), transform)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _acceptance.append((int(marker.args[0]), marker.args[1], report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, detail in sorted(_acceptance):
        flag = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{flag}] criterion {number:2d}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
