import pytest
import torch

from trained import held_out_clouds, load_trained


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def trained():
    return load_trained()


@pytest.fixture(scope="session")
def held_out():
    return held_out_clouds()


_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion as PASS or FAIL and print the line."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
