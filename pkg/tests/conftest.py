import numpy as np
import pytest
import torch

from stormse.data import make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12/4/4 short denoise utterances shared by the CLI and pipeline tests."""
    root = tmp_path_factory.mktemp("tiny")
    make_dataset("denoise", root, 12, 4, 4, seed=3, duration_range=(1.0, 1.5))
    return root


# --- acceptance summary -----------------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    details = [v for k, v in item.user_properties if k == "detail"]
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and report.passed
    entry["details"].extend(details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {number:>2} {status}  {entry['title']}" + (f"  [{detail}]" if detail else ""))
