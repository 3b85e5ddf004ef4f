import numpy as np
import pytest

from minivlm import data
from minivlm import tensor as T


@pytest.fixture(autouse=True)
def float64():
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    spec = data.SyntheticSpec(counts={"alignment": 16, "instruction": 16, "eval": 8, "text": 32})
    return data.generate_corpus(out, spec, seed=7)


@pytest.fixture(scope="session")
def small_corpus(small_corpus_dir):
    return data.load_corpus(small_corpus_dir)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion this test decides")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(RESULTS, key=lambda s: int(s.split()[0])):
        terminalreporter.write_line(f"{'PASS' if RESULTS[label] else 'FAIL'}  {label}")
