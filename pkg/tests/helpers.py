"""Shared test utilities: naive re-implementations used as oracles and a
generic central finite-difference gradient."""

from __future__ import annotations

import math

import numpy as np


def naive_mlp_eval(weights, biases, x):
    """Layer-by-layer scalar-loop evaluation of the tanh/identity MLP.

    Deliberately avoids numpy linear algebra so it is an independent
    re-implementation of the forward pass.
    """
    a = [float(v) for v in x]
    for layer in range(len(weights)):
        w, b = weights[layer], biases[layer]
        out = []
        for i in range(w.shape[0]):
            acc = float(b[i])
            for j in range(w.shape[1]):
                acc += float(w[i, j]) * a[j]
            out.append(math.tanh(acc) if layer < len(weights) - 1 else acc)
        a = out
    return np.array(a)


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradient of scalar f(arrays) w.r.t. every entry."""
    grads = []
    for idx in range(len(arrays)):
        g = np.zeros_like(arrays[idx])
        flat = g.reshape(-1)
        base = arrays[idx].reshape(-1)
        for pos in range(base.size):
            orig = base[pos]
            base[pos] = orig + h
            hi = f(arrays)
            base[pos] = orig - h
            lo = f(arrays)
            base[pos] = orig
            flat[pos] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err_ok(analytic, numeric, rtol, atol):
    """Per-entry pass mask for gradient comparisons with an absolute floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.abs(analytic - numeric) <= np.maximum(atol, rtol * denom)
