"""Shared fixtures and the finite-difference oracle used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from tutorkit import (
    LayerConfig,
    LossWeights,
    TrainConfig,
    TutorModel,
    build_vocabulary,
    generate_synthetic,
    make_batches,
    train,
)


def finite_diff(f, array: np.ndarray, flat_index: int, h: float = 1e-5) -> float:
    """Central finite difference of scalar-valued f at one coordinate of array."""
    flat = array.reshape(-1)
    old = flat[flat_index]
    flat[flat_index] = old + h
    up = f()
    flat[flat_index] = old - h
    down = f()
    flat[flat_index] = old
    return (up - down) / (2.0 * h)


def rel_error(a: float, b: float, floor: float = 1e-12) -> float:
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def grad_close(analytic: float, numeric: float, rtol: float = 1e-4, atol: float = 1e-8) -> bool:
    """Relative agreement with an absolute floor: central differences are
    roundoff-dominated once the true gradient is near zero."""
    return abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric))


def grad_check(f, tensors, n_samples: int = 20, h: float = 1e-5, seed: int = 0):
    """Compare analytic gradients of f() against central differences.

    ``f`` builds the graph and returns the loss tensor; tensors is a list of
    (name, Tensor). Returns the max relative error over sampled coordinates.
    """
    rng = np.random.default_rng(seed)
    loss = f()
    for _, t in tensors:
        t.zero_grad()
    loss.backward()
    worst = 0.0
    for name, t in tensors:
        count = min(n_samples, t.size)
        for flat_index in rng.choice(t.size, size=count, replace=False):
            numeric = finite_diff(lambda: f().item(), t.data, int(flat_index), h=h)
            analytic = t.grad.reshape(-1)[int(flat_index)]
            assert grad_close(analytic, numeric), (
                f"gradient mismatch for {name}[{flat_index}]: "
                f"analytic {analytic} vs numeric {numeric}"
            )
            worst = max(worst, rel_error(analytic, numeric, floor=1e-7))
    return worst


@pytest.fixture(scope="session")
def tiny_setup():
    """A small clean synthetic corpus with its vocabulary and batches."""
    conversations, strategies = generate_synthetic(24, 3, seed=5, cue_noise=0.0)
    vocab = build_vocabulary(conversations, strategies)
    batches = make_batches(conversations, vocab, max_tokens=1024, max_positions=96)
    return conversations, strategies, vocab, batches


@pytest.fixture(scope="session")
def trained_tiny(tiny_setup):
    """A model overfit on the tiny corpus; used by behavioral tests."""
    conversations, strategies, vocab, batches = tiny_setup
    config = LayerConfig(
        d_model=32, n_heads=2, d_ff=64, n_enc_layers=1, n_dec_layers=1, max_positions=96
    )
    model = TutorModel(config, vocab, rng=np.random.default_rng(7))
    train_config = TrainConfig(
        lr_peak=2e-3,
        warmup_steps=10,
        total_steps=240,
        update_freq=1,
        patience=1000,
        seed=7,
        weights=LossWeights(),
    )
    result = train(model, batches, batches, train_config)
    model.eval_mode()
    return model, result
