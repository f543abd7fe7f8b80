import os
import time
from contextlib import contextmanager

import pytest

from npnprobe.corpus import filter_corpus
from npnprobe.synthetic import npn_corpus, small_corpus, smoke_experiment

# stay off the model hub unless the full-scale run was asked for
if not os.environ.get("NPNPROBE_MODEL"):
    os.environ.setdefault("HF_HUB_OFFLINE", "1")
    os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")


@pytest.fixture(scope="session")
def full_corpus():
    """Filtered synthetic corpus with the real dataset's composition."""
    return filter_corpus(npn_corpus(0))


@pytest.fixture(scope="session")
def toy_corpus():
    return small_corpus(200)


@pytest.fixture(scope="session")
def smoke_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    smoke_experiment(root)
    return root


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


class CriterionLog:
    """Records one PASS / FAIL / NOT RUN line per acceptance criterion."""

    def __init__(self, results):
        self.results = results

    @contextmanager
    def check(self, number, detail=""):
        start = time.perf_counter()
        notes = []
        try:
            yield notes
        except pytest.skip.Exception:
            raise
        except BaseException as exc:
            self.results[number] = ("FAIL", f"{type(exc).__name__}: {str(exc).splitlines()[0][:160]}"
                                    if str(exc) else type(exc).__name__)
            raise
        else:
            extra = "; ".join(x for x in (detail, *notes) if x)
            self.results[number] = ("PASS", f"{extra} ({time.perf_counter() - start:.1f} s)".strip())

    def not_run(self, number, reason):
        self.results[number] = ("NOT RUN", reason)
        pytest.skip(reason)


@pytest.fixture
def criterion(request):
    return CriterionLog(request.config.stash[_CRITERIA])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        status, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
