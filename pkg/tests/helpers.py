"""Shared oracles for the test suite."""

import numpy as np

from choplab.encoder import EncoderConfig, init_params
from choplab.seeding import rng_for

# absolute floor so parameters whose true gradient is ~0 (e.g. key biases,
# which softmax is invariant to) do not blow up the relative error
GRAD_FLOOR = 1e-5


def numeric_grad(f, arrays: dict, name: str, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f(arrays)`` w.r.t. ``arrays[name]``."""
    base = {k: v.copy() for k, v in arrays.items()}
    x = base[name]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(base)
        x[i] = old - h
        fm = f(base)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), GRAD_FLOOR)))


def small_config(**kw) -> EncoderConfig:
    base = dict(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=24, max_seq_len=9,
                num_classes=4)
    base.update(kw)
    return EncoderConfig(**base)


def random_params(cfg: EncoderConfig, seed: int = 0, label: str = "test/init"):
    return init_params(cfg, rng_for(seed, label))


def random_tokens(cfg: EncoderConfig, n: int, seq: int | None = None, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    seq = seq or cfg.max_seq_len
    toks = rng.integers(2, cfg.vocab_size, size=(n, seq))
    toks[:, 0] = 1
    return toks
