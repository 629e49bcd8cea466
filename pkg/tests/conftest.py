import contextlib
import os
import shutil
import tempfile
import time

import pytest

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def fast_tmp(tmp_path):
    """A scratch directory on tmpfs when available; stores write thousands of small files."""
    if os.path.isdir("/dev/shm") and os.access("/dev/shm", os.W_OK):
        d = tempfile.mkdtemp(prefix="dreamweave-", dir="/dev/shm")
        yield d
        shutil.rmtree(d, ignore_errors=True)
    else:
        yield str(tmp_path)


class Verdict:
    def __init__(self):
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture
def criterion(request):
    """``with criterion(3, "title") as v:`` records one PASS/FAIL line for the block."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    @contextlib.contextmanager
    def run(number: int, title: str):
        v = Verdict()
        t0 = time.perf_counter()
        try:
            yield v
        except BaseException as exc:
            v.note(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            status = "FAIL"
            raise
        else:
            status = "PASS"
        finally:
            line = (f"{status} criterion {number:2d} {title} ({time.perf_counter() - t0:.1f} s)"
                    + ("".join(f"; {d}" for d in v.details)))
            lines.append((number, line))
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
