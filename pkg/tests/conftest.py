import numpy as np
import pytest

from hmae.vit import MaeModel, ViTConfig

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.outcome != "passed":
        entry["seen"] = True
        entry["ok"] = entry["ok"] and report.outcome == "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {e['title']}")


def tiny_config(**overrides) -> ViTConfig:
    base = dict(input_size=16, patch_size=4, encoder_dim=16, encoder_depth=2, encoder_heads=2,
                decoder_dim=8, decoder_depth=1, decoder_heads=2)
    base.update(overrides)
    return ViTConfig(**base).validate()


@pytest.fixture
def tiny_model():
    return MaeModel(tiny_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
