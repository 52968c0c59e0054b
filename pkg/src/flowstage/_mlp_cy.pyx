# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Cython MLP kernels: the compiled backend.

Same contract as ``_mlp_np``: single-input forward/backward for a tanh
MLP with an identity output layer, operating on lists of contiguous
float64 arrays.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()

BACKEND = "cython"


def forward(list weights, list biases, x):
    """Return post-activation values for every layer, input included."""
    cdef Py_ssize_t n_layers = len(weights)
    cdef list acts = [np.ascontiguousarray(x, dtype=np.float64)]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] w
    cdef cnp.ndarray[cnp.float64_t, ndim=1] b, a_prev, a_next
    cdef Py_ssize_t layer, i, j, rows, cols
    cdef double acc
    for layer in range(n_layers):
        w = weights[layer]
        b = biases[layer]
        a_prev = acts[layer]
        rows = w.shape[0]
        cols = w.shape[1]
        a_next = np.empty(rows, dtype=np.float64)
        for i in range(rows):
            acc = b[i]
            for j in range(cols):
                acc += w[i, j] * a_prev[j]
            a_next[i] = tanh(acc) if layer < n_layers - 1 else acc
        acts.append(a_next)
    return acts


def backward(list weights, list acts, grad_out):
    """Backpropagate ``grad_out``; returns (weight grads, bias grads, input grad)."""
    cdef Py_ssize_t n_layers = len(weights)
    cdef list grad_w = [None] * n_layers
    cdef list grad_b = [None] * n_layers
    cdef cnp.ndarray[cnp.float64_t, ndim=2] w, gw
    cdef cnp.ndarray[cnp.float64_t, ndim=1] a_prev, delta, back, input_grad
    cdef Py_ssize_t layer, i, j, rows, cols
    cdef double d, a
    delta = np.ascontiguousarray(grad_out, dtype=np.float64)
    input_grad = delta
    for layer in range(n_layers - 1, -1, -1):
        w = weights[layer]
        a_prev = acts[layer]
        rows = w.shape[0]
        cols = w.shape[1]
        gw = np.empty((rows, cols), dtype=np.float64)
        for i in range(rows):
            d = delta[i]
            for j in range(cols):
                gw[i, j] = d * a_prev[j]
        grad_w[layer] = gw
        grad_b[layer] = delta
        back = np.zeros(cols, dtype=np.float64)
        for i in range(rows):
            d = delta[i]
            for j in range(cols):
                back[j] += w[i, j] * d
        if layer > 0:
            # tanh'(z) from the post-activation value
            for j in range(cols):
                a = a_prev[j]
                back[j] *= 1.0 - a * a
            delta = back
        else:
            input_grad = back
    return grad_w, grad_b, input_grad
