"""Pure numpy implementation of the MLP kernels.

Used whenever the compiled ``_kernels`` extension is unavailable, and as the
reference the compiled version is tested against. Both backends share one
calling convention:

theta
    flat float64 parameter vector; layer ``k`` stores its ``(sizes[k], sizes[k+1])``
    weight matrix in C order followed by its bias.
sizes
    int64 array ``[d, h_1, ..., h_m, L]``.
targets, weights
    ``B x L`` arrays. The loss is ``sum(weights * bce(p, targets))`` so masking
    and mean reduction are both folded into ``weights`` by the caller.
"""

import numpy as np
from scipy.special import expit

BACKEND = "python"


def _unpack(theta, sizes):
    layers = []
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        n_w = fan_in * fan_out
        w = theta[offset:offset + n_w].reshape(fan_in, fan_out)
        offset += n_w
        b = theta[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _forward(layers, x):
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    w, b = layers[-1]
    p = expit(h @ w + b)
    return acts, p


def forward(theta, sizes, x, eps):
    _, p = _forward(_unpack(theta, sizes), x)
    return np.clip(p, eps, 1.0 - eps)


def _output_delta(p, targets, weights, eps):
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -(weights * (targets * np.log(pc) + (1.0 - targets) * np.log1p(-pc))).sum()
    inside = (p >= eps) & (p <= 1.0 - eps)
    delta = np.where(inside, weights * (p - targets), 0.0)
    return float(loss), delta


def loss_grad(theta, sizes, x, targets, weights, eps):
    layers = _unpack(theta, sizes)
    acts, p = _forward(layers, x)
    loss, delta = _output_delta(p, targets, weights, eps)
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        a = acts[k]
        grads.append(delta.sum(axis=0))
        grads.append((a.T @ delta).ravel())
        if k > 0:
            delta = (delta @ layers[k][0].T) * (1.0 - a * a)
    grads.reverse()
    return loss, np.concatenate(grads)


def per_sample_grads(theta, sizes, x, targets, weights, eps):
    layers = _unpack(theta, sizes)
    acts, p = _forward(layers, x)
    _, delta = _output_delta(p, targets, weights, eps)
    n = x.shape[0]
    blocks = []
    for k in range(len(layers) - 1, -1, -1):
        a = acts[k]
        blocks.append(delta)
        blocks.append(np.einsum("bi,bj->bij", a, delta).reshape(n, -1))
        if k > 0:
            delta = (delta @ layers[k][0].T) * (1.0 - a * a)
    blocks.reverse()
    return np.concatenate(blocks, axis=1)
