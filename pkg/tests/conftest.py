import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cbrkg import build_graph, build_memory  # noqa: E402

TOY = [
    ("USA", "has_state", "Massachusetts"),
    ("Massachusetts", "contains_city", "Boston"),
    ("USA", "has_city", "Boston"),
    ("Canada", "has_state", "Ontario"),
    ("Ontario", "contains_city", "Toronto"),
    ("Canada", "has_city", "Montreal"),
]


@pytest.fixture
def toy_triples():
    return list(TOY)


@pytest.fixture
def toy_graph(toy_triples):
    return build_graph(toy_triples)


@pytest.fixture
def toy_memory(toy_graph):
    return build_memory(toy_graph, walks=2000, max_len=3, seed=7)


@pytest.fixture
def toy_files(tmp_path, toy_triples):
    train = tmp_path / "train.txt"
    train.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in toy_triples))
    test = tmp_path / "test.txt"
    test.write_text("Canada\thas_city\tToronto\n")
    valid = tmp_path / "valid.txt"
    valid.write_text("Canada\thas_city\tToronto\n")
    return tmp_path, train, valid, test


# one summary line per acceptance criterion, aggregated over its tests
_CRITERIA: dict[str, dict] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    tag, title = marker
    entry = _CRITERIA.setdefault(tag, {"title": title, "outcomes": []})
    if report.when == "call" or report.outcome != "passed":
        entry["outcomes"].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = m.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(_CRITERIA, key=lambda t: int(t[2:])):
        entry = _CRITERIA[tag]
        outs = entry["outcomes"]
        if any(o == "failed" for o in outs):
            verdict = "FAIL"
        elif outs and all(o == "skipped" for o in outs):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"{tag} {verdict}  {entry['title']}")
