import numpy as np
import pytest

from dmr.corpus import PairExample
from dmr.encoder import EncoderParams
from dmr.model import DmrParams


def random_params(rng, k, n, d=3, d_e=2, scale=1.0):
    return DmrParams(
        w1=rng.normal(0, scale, (d, 4 * d_e)),
        b1=rng.normal(0, scale, d),
        w2=rng.normal(0, scale, (k, d)),
        b2=rng.normal(0, scale, k),
        phi=rng.normal(0, scale, (k, n)),
    )


def random_encoder(rng, vocab, d_e, scale=1.0):
    return EncoderParams(rng.normal(0, scale, (vocab, d_e)))


def random_examples(rng, count, vocab, n_markers, max_len=6):
    out = []
    for _ in range(count):
        s1 = tuple(int(t) for t in rng.integers(0, vocab, rng.integers(1, max_len + 1)))
        s2 = tuple(int(t) for t in rng.integers(0, vocab, rng.integers(1, max_len + 1)))
        out.append(PairExample(s1, s2, int(rng.integers(0, n_markers))))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance verdict lines, echoed after the run even when output is captured
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
