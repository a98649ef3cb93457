import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mxnum.minifloat import get_format


@pytest.fixture(scope="session")
def e4m3():
    return get_format("e4m3")


@pytest.fixture(scope="session")
def e5m2():
    return get_format("e5m2")


@pytest.fixture(scope="session")
def e3m4():
    return get_format("e3m4")


@pytest.fixture(scope="session")
def e5m10():
    return get_format("e5m10")


@pytest.fixture(scope="session")
def e8m7():
    return get_format("e8m7")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def make_corpus_text(n_chars: int = 30000, seed: int = 0) -> str:
    """Deterministic word-salad text with a learnable byte distribution."""
    gen = np.random.default_rng(seed)
    words = ["the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog",
             "while", "murky", "rivers", "flow", "under", "quiet", "stars",
             "and", "old", "boats", "drift", "home"]
    parts: list[str] = []
    total = 0
    while total < n_chars:
        n = int(gen.integers(5, 10))
        s = " ".join(gen.choice(words, n)) + ". "
        parts.append(s)
        total += len(s)
    return "".join(parts)


@pytest.fixture(scope="session")
def corpus_tokens():
    text = make_corpus_text()
    return np.frombuffer(text.encode(), dtype=np.uint8).astype(np.int64)


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    path.write_text(make_corpus_text())
    return path


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance criteria verdicts after capture ends."""
    mod = sys.modules.get("test_acceptance")
    if mod is not None and getattr(mod, "RESULTS", None):
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
