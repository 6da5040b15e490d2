import numpy as np
import pytest
import torch

from mmsn.data import DatasetManifest, EhrRecord, LabelVector, Sample, generate_synthetic_dataset


@pytest.fixture(autouse=True)
def _quiet_torch():
    torch.set_num_threads(1)
    yield


def make_sample(i=0, patient="p0", age=50, labels=None, image=None):
    ehr = EhrRecord(age, "Male", "AP", "Erect", "Negative", "Negative")
    labels = labels if labels is not None else (0,) * 13 + (1,)
    return Sample(f"s{i}", patient, ehr, LabelVector(tuple(labels)), image=image)


@pytest.fixture(scope="session")
def coupled_small():
    """A 12-patient coupled set at the smallest supported image size."""
    return generate_synthetic_dataset(12, 2, 96, "ehr_coupled", seed=3)


@pytest.fixture
def tiny_manifest(coupled_small):
    return DatasetManifest(tuple(coupled_small[:8]))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance summary: one PASS/FAIL line per criterion -----------------

_criteria: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    n, title = marker
    failed = report.failed or (report.when == "call" and report.skipped)
    ok = _criteria.get(n, (title, True))[1] and not failed
    _criteria[n] = (title, ok)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
