import sys

import numpy as np
import pytest

from ewcnmt.data import MonolingualExample, ParallelExample, collate
from ewcnmt.tokenizer import BOS, EOS
from ewcnmt.transformer import ModelConfig


def random_ids(rng, vocab, length):
    return (BOS, *(int(t) for t in rng.integers(4, vocab, size=length - 2)), EOS)


def parallel_batch(rng, cfg, n=3, max_len=7):
    ex = [
        ParallelExample(random_ids(rng, cfg.src_vocab, int(rng.integers(3, max_len))),
                        random_ids(rng, cfg.tgt_vocab, int(rng.integers(3, max_len))))
        for _ in range(n)
    ]
    return collate(ex)


def mono_batch(rng, vocab, side, n=3, max_len=7):
    ex = [MonolingualExample(random_ids(rng, vocab, int(rng.integers(3, max_len)))) for _ in range(n)]
    return collate(ex, side=side)


@pytest.fixture
def tiny_config():
    return ModelConfig(enc_layers=2, dec_layers=2, model_dim=32, ff_dim=64, heads=4, src_vocab=100, tgt_vocab=100, dropout=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, notes = results[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" [{notes}]" if notes else ""))
