import numpy as np
import pytest
import torch

from detdistill.data import ClassCatalog, ShapesConfig, generate_shapes


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def shapes_catalog():
    return ClassCatalog.shapes()


@pytest.fixture(scope="session")
def toy_samples(shapes_catalog):
    return generate_shapes(ShapesConfig(n_images=24, image_size=64, seed=3), shapes_catalog)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    n = dict(report.user_properties).get("criterion")
    if n is None:
        return
    entry = _CRITERIA.setdefault(n, {"outcomes": [], "notes": []})
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append(report.outcome)
    entry["notes"] += [v for k, v in report.user_properties if k == "note" and v not in entry["notes"]]


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcomes = _CRITERIA[n]["outcomes"]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif outcomes and all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        notes = "; ".join(_CRITERIA[n]["notes"])
        terminalreporter.write_line(f"criterion {n}: {verdict}" + (f" ({notes})" if notes else ""))
