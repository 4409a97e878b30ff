import os

import pytest
import torch

torch.set_num_threads(1)
os.environ.setdefault("OMP_NUM_THREADS", "1")


@pytest.fixture(scope="session")
def tiny_data():
    from elastic_stereo.data import make_dataset
    return make_dataset(8, 123, 48, 48, 24)


# -- acceptance report -------------------------------------------------------
# Tests marked ``criterion(n, title)`` are folded into one pass/fail line per
# criterion, printed at the end of the run. Details come from the ``note``
# fixture.

_CRITERIA: dict = {}
_NOTES = pytest.StashKey[list]()


@pytest.fixture
def note(request):
    notes = request.node.stash.setdefault(_NOTES, [])

    def add(text):
        notes.append(str(text))
        print(text)
    return add


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return rep
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    if hasattr(rep, "wasxfail"):
        entry["notes"].append(f"expected discrepancy confirmed ({rep.wasxfail})")
    elif not rep.passed:
        entry["ok"] = False
    entry["notes"].extend(item.stash.get(_NOTES, []))
    return rep


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        detail = "; ".join(e["notes"])
        terminalreporter.write_line(
            f"criterion {number:>2} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
            + (f"  [{detail}]" if detail else ""))
