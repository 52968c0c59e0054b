"""Pure-numpy MLP kernels: the fallback backend.

Single-input forward/backward passes for a tanh MLP with an identity
output layer.  The Cython backend (``_mlp_cy``) implements the same two
functions with the same contract; ``kernels`` picks one at import time.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def forward(weights: list, biases: list, x: np.ndarray) -> list:
    """Return post-activation values for every layer, input included.

    ``weights[l]`` has shape (out_l, in_l) and acts on the previous layer's
    activation.  Hidden layers apply tanh, the final layer is identity.
    """
    acts = [np.array(x, dtype=np.float64)]
    last = len(weights) - 1
    for layer, (w, b) in enumerate(zip(weights, biases)):
        z = w @ acts[-1] + b
        acts.append(np.tanh(z) if layer < last else z)
    return acts


def backward(weights: list, acts: list, grad_out: np.ndarray):
    """Backpropagate ``grad_out`` through cached activations.

    Returns (weight grads, bias grads, input grad).  The tanh derivative is
    evaluated from post-activation values, so ``acts`` must come from
    ``forward`` with the same weights.
    """
    grad_w = [None] * len(weights)
    grad_b = [None] * len(weights)
    delta = np.array(grad_out, dtype=np.float64)
    input_grad = delta
    for layer in range(len(weights) - 1, -1, -1):
        grad_w[layer] = np.outer(delta, acts[layer])
        grad_b[layer] = delta
        back = weights[layer].T @ delta
        if layer > 0:
            delta = back * (1.0 - acts[layer] ** 2)
        else:
            input_grad = back
    return grad_w, grad_b, input_grad
