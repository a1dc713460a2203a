"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def dense_forward(W, b, X, relu):
    Z = X @ W.T + b
    if not relu:
        return Z, Z
    return Z, np.maximum(Z, 0.0)


def dense_backward(W, X, Z, G, relu):
    GZ = G * (Z > 0.0) if relu else G
    return GZ.T @ X, GZ.sum(axis=0), GZ @ W


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, correction1, correction2):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / correction1
    vhat = v / correction2
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def reservoir_fill(capacity, draws):
    slots = np.full(capacity, -1, dtype=np.int64)
    for i, j in enumerate(draws.tolist()):
        if i < capacity:
            slots[i] = i
        elif j < capacity:
            slots[j] = i
    return slots
