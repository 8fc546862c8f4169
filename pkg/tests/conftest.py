import numpy as np
import pytest

from packfuse.scorer import TableModel, Vocabulary


@pytest.fixture
def vocab4():
    return Vocabulary(("a", "b", "c", "d"), name="v4")


@pytest.fixture
def ab_vocab():
    return Vocabulary(("a", "b"), name="ab")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tables(rng, vocab, k, rows=3, scale=2.0):
    return [TableModel(f"m{i}", vocab, rng.normal(scale=scale, size=(rows, len(vocab)))) for i in range(k)]


def random_prompt(rng, vocab, length):
    return vocab.sequence(rng.integers(len(vocab), size=length))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
