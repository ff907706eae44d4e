import pytest

from deskmusic import corpus as cp


@pytest.fixture(scope="session")
def eval_corpus(tmp_path_factory):
    """32 one-second clips per genre, shared by the metric tests."""
    root = tmp_path_factory.mktemp("eval_corpus")
    return cp.build_dataset(256, root, seed=0, duration_s=1.0), root


# one PASS/FAIL line per acceptance criterion, printed in the terminal summary
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    if call.when == "call" or failed:
        prev = _CRITERIA.get(n, (title, "PASS"))[1]
        _CRITERIA[n] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, verdict = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}: {title}")
