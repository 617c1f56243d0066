"""Shared fixtures: small model specs and dataset builders used across
the test modules. Everything is seeded; no test depends on wall clock,
network, or filesystem state outside tmp_path.
"""

import numpy as np
import pytest

from qlorakit.model import ToyModelSpec, init_adapters, init_model_params


@pytest.fixture
def small_spec():
    return ToyModelSpec(
        vocab_size=23,
        d_model=8,
        n_layers=2,
        n_heads=2,
        d_ff=12,
        n_classes=3,
        max_seq_len=6,
        adapter_targets=("attn_q", "attn_v"),
    )


@pytest.fixture
def small_setup(small_spec):
    """(spec, params, adapters, batch) on the small model."""
    params = init_model_params(small_spec, seed=7, profile="standard")
    adapters = init_adapters(small_spec, rank=2, alpha=4.0, seed=11)
    rng = np.random.default_rng(3)
    batch = [
        (rng.integers(0, small_spec.vocab_size, size=5), int(rng.integers(0, 3)))
        for _ in range(4)
    ]
    return small_spec, params, adapters, batch


def make_batch(spec, n, seed=0, seq_len=None):
    rng = np.random.default_rng(seed)
    t = seq_len or spec.max_seq_len
    return [
        (rng.integers(0, spec.vocab_size, size=t), int(rng.integers(0, spec.n_classes)))
        for _ in range(n)
    ]
