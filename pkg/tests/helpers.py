"""Shared test utilities: random small models and finite-difference checks."""

import numpy as np

from sfosda.model import ModelParams, init_mlp
from sfosda.numerics import Rng

FD_STEP = 1e-5
REL_TOL = 1e-4
FD_FLOOR = 1e-8


def random_model(rng: np.random.Generator, d_in: int, n_out: int, max_layers: int = 3,
                 max_width: int = 8) -> ModelParams:
    """Random tanh/linear MLP with at most ``max_layers`` layers."""
    n_layers = int(rng.integers(1, max_layers + 1))
    sizes = [d_in] + [int(rng.integers(2, max_width + 1)) for _ in range(n_layers - 1)] + [n_out]
    acts = [str(rng.choice(["tanh", "linear"])) for _ in range(n_layers - 1)] + ["linear"]
    params = init_mlp(sizes, acts, Rng(int(rng.integers(0, 2**31))))
    for b in params.biases:
        b[:] = rng.normal(0, 0.3, size=b.shape)
    return params


def rel_err(a, f):
    a, f = np.asarray(a, dtype=np.float64), np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-300)


def fd_array(fn, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``fn`` with respect to every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn()
        x[i] = old - h
        down = fn()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, tol: float = REL_TOL, floor: float = FD_FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    sel = np.abs(numeric) > floor
    if sel.any():
        worst = rel_err(analytic[sel], numeric[sel]).max()
        assert worst < tol, f"max relative error {worst:.3g}"
    # coordinates with negligible FD must also have negligible analytic gradient
    assert np.all(np.abs(analytic[~sel]) < 1e-6)


def fd_params(params: ModelParams, loss_fn, h: float = FD_STEP):
    """Finite-difference gradients of ``loss_fn(params)`` for every weight and bias."""
    gw = [fd_array(lambda: loss_fn(params), w, h) for w in params.weights]
    gb = [fd_array(lambda: loss_fn(params), b, h) for b in params.biases]
    return gw, gb
