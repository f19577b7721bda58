from pathlib import Path

import numpy as np
import pytest

from kwsattn.audio_io import build_manifest, get_task, load_examples, resolve_label
from kwsattn.dsp import SpectrogramConfig
from kwsattn.model import AttRnnConfig
from kwsattn.training import FeatureSet, TrainConfig, fit

TOY_ROOT = Path(__file__).parent / "fixtures" / "toy"

# the toy set has 16 clips, so the default batch of 64 would give one step per epoch
TOY_TRAIN_CFG = TrainConfig(batch_size=4, seed=0)

_acceptance: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    _, outcomes = _acceptance.setdefault(number, (title, []))
    if call.excinfo is not None:
        outcomes.append("skip" if call.excinfo.errisinstance(pytest.skip.Exception) else "fail")
    elif call.when == "call":
        outcomes.append("pass")


def pytest_deselected(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            _acceptance.setdefault(marker.args[0], (marker.args[1], []))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, outcomes = _acceptance[number]
        if "fail" in outcomes:
            status = "FAIL"
        elif not outcomes:
            status = "NOT RUN"
        elif all(o == "skip" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {number} [{status}] {title} ({len(outcomes)} checks)")


@pytest.fixture(scope="session")
def toy_root():
    return TOY_ROOT


@pytest.fixture(scope="session")
def toy_task():
    return get_task("left_right")


@pytest.fixture(scope="session")
def toy_features(toy_task):
    manifest = build_manifest(TOY_ROOT)
    items = [(p, resolve_label(w, toy_task)) for p, w, _ in manifest.entries]
    return FeatureSet.from_clips(load_examples(TOY_ROOT, items), SpectrogramConfig())


@pytest.fixture(scope="session")
def toy_run(toy_features, toy_task):
    return fit(toy_features, toy_features, AttRnnConfig(n_classes=toy_task.n_classes), TOY_TRAIN_CFG,
               labels=toy_task.target_labels, task=toy_task.name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
