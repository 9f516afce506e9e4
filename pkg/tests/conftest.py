import numpy as np
import pytest

from aejoint.corpus import Clip, MixturePlanSpec
from aejoint.enhancer import UNetConfig
from aejoint.signal_core import Waveform
from aejoint.strategies import TaskData
from aejoint.tasks import TaskModelConfig

TINY_AE = UNetConfig(depth=2, base_channels=4)
TINY_CAT = TaskModelConfig(channels=8, rnn_dim=16, rnn_layers=1, res_blocks=1)


def tone_clips(n_per_class=8, length=4000, seed=0):
    """Two separable classes: low and high tone bursts with random phase and level."""
    rng = np.random.default_rng(seed)
    t = np.arange(length) / 16000
    clips = []
    for label, f in (("lo", 400.0), ("hi", 2000.0)):
        for i in range(n_per_class):
            x = rng.uniform(0.3, 0.8) * np.sin(2 * np.pi * f * rng.uniform(0.95, 1.05) * t + rng.uniform(0, 6))
            clips.append(Clip(f"{label}{i}", Waveform(x * np.hanning(length)), label))
    return clips


def noise_clips(n=4, length=6000, seed=1):
    rng = np.random.default_rng(seed)
    return [Clip(f"n{i}", Waveform(rng.standard_normal(length) * 0.3)) for i in range(n)]


@pytest.fixture
def toy_data():
    return TaskData("scr", ["lo", "hi"], tone_clips(), noise_clips(), MixturePlanSpec.for_task("scr", 0))


# --------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion at the end of the run
# --------------------------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test covers")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed or rep.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        verdict = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {entry['title']}")
