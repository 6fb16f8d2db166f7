"""A small tanh MLP least-squares model with hand-written gradients.

Used as the training workload by the benchmark and the SGD tests.
"""
from __future__ import annotations

import numpy as np


def init_mlp(sizes: list[int], seed: int = 0, dtype=np.float64) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"w{i}"] = (rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dtype)
        params[f"b{i}"] = np.zeros(n_out, dtype=dtype)
    return params


def _n_layers(params) -> int:
    return sum(1 for k in params if k.startswith("w"))


def mlp_forward(params, x):
    h = x
    for i in range(_n_layers(params)):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < _n_layers(params) - 1:
            h = np.tanh(h)
    return h


def mlp_loss_and_grad(params, x, y):
    """Mean over rows of ``0.5 * ||f(x) - y||^2`` and its gradient."""
    n_layers = _n_layers(params)
    acts = [x]
    h = x
    for i in range(n_layers):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            h = np.tanh(h)
        acts.append(h)
    n = x.shape[0]
    err = acts[-1] - y
    loss = 0.5 * np.sum(err * err) / n
    grads = {}
    delta = err / n
    for i in reversed(range(n_layers)):
        grads[f"w{i}"] = acts[i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i:
            delta = (delta @ params[f"w{i}"].T) * (1.0 - acts[i] * acts[i])
    return loss, grads


def make_regression_data(n_rows: int, n_in: int, n_out: int, seed: int = 0, dtype=np.float64):
    """Random inputs and targets from a fixed random linear map plus noise."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_rows, n_in)).astype(dtype)
    w = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
    y = (np.tanh(x @ w) + 0.1 * rng.standard_normal((n_rows, n_out))).astype(dtype)
    return x, y
