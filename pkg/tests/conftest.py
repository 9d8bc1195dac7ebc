import numpy as np
import pytest

from tssr.data import build_batch
from tssr.model import ModelConfig, init_params


def tiny_config(mode="tssr", **kw):
    base = dict(n_items=20, d=8, max_len=5, n_heads=2, n_uni_layers=1, n_multi_layers=1,
                dropout=0.0, dim_raw=6, mode=mode, init_std=0.5)
    base.update(kw)
    return ModelConfig(**base)


def tiny_content(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return np.vstack([rng.normal(size=(cfg.n_items, cfg.dim_raw)), np.zeros((1, cfg.dim_raw))])


def tiny_batch(cfg, n=4, seed=0, lengths=None):
    rng = np.random.default_rng(seed)
    lengths = lengths or [cfg.max_len + 1 - (r % 3) for r in range(n)]
    seqs = [list(rng.integers(0, cfg.n_items, size=k)) for k in lengths]
    return build_batch(seqs, cfg.max_len, cfg.pad), seqs


@pytest.fixture
def tiny():
    cfg = tiny_config()
    params = init_params(cfg, tiny_content(cfg), seed=1)
    batch, seqs = tiny_batch(cfg)
    return cfg, params, batch, seqs


# one line per acceptance criterion, shown at the end of the run
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
