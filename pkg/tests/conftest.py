import pytest

_RESULTS = pytest.StashKey[dict]()


class Criterion:
    def __init__(self, store, number, title):
        self.number, self.title = number, title
        self.passed, self.detail = False, "did not finish"
        store[number] = self

    def done(self, passed, detail=""):
        self.passed, self.detail = bool(passed), detail
        print(self.line())
        return self.passed

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:>2}. {self.title}: {self.detail}"


@pytest.fixture
def criterion(request):
    store = request.config.stash.setdefault(_RESULTS, {})

    def make(number, title):
        return Criterion(store, number, title)

    return make


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_RESULTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        terminalreporter.write_line(store[n].line())
