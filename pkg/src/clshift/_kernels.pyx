# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP kernels; same contract as ``clshift._kernels_py``.

Layer products go through BLAS ``dgemm`` and hidden activations through
numpy's vectorized tanh; the output sigmoid, the clamped loss, the deltas
and the per-sample outer products run as plain C loops.
"""

import numpy as np

from libc.math cimport exp, log, log1p
from scipy.linalg.cython_blas cimport dgemm

BACKEND = "cython"


cdef inline double _sigmoid(double z) noexcept nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef void _matmul(const double* a, const double* b, double* c, int rows, int inner, int cols,
                  bint trans_a, bint trans_b, double beta) noexcept nogil:
    """Row-major ``c = op(a) @ op(b) + beta * c`` with ``c`` of shape rows x cols."""
    # a row-major product is the column-major product of the transposes, swapped
    cdef char ta = b"T" if trans_b else b"N"
    cdef char tb = b"T" if trans_a else b"N"
    cdef int lda = inner if trans_b else cols
    cdef int ldb = rows if trans_a else inner
    cdef double one = 1.0
    dgemm(&ta, &tb, &cols, &rows, &inner, &one, <double*> b, &lda, <double*> a, &ldb, &beta, c, &cols)


cdef list _forward_acts(double[::1] theta, long[::1] sizes, double[:, ::1] x):
    """Activations of every layer: ``acts[0] = x``, the last entry is the unclamped sigmoid output."""
    cdef int n_layers = sizes.shape[0] - 1
    cdef int k
    cdef long n = x.shape[0], woff = 0, boff, r, j, fan_in, fan_out
    cdef double[:, ::1] a_in
    cdef double[:, ::1] z
    if x.shape[1] != sizes[0]:
        raise ValueError("input width does not match first layer")
    acts = [np.asarray(x)]
    for k in range(n_layers):
        fan_in = sizes[k]
        fan_out = sizes[k + 1]
        boff = woff + fan_in * fan_out
        a_in = acts[k]
        out = np.empty((n, fan_out), dtype=np.float64)
        z = out
        with nogil:
            for r in range(n):
                for j in range(fan_out):
                    z[r, j] = theta[boff + j]
            if n > 0:
                _matmul(&a_in[0, 0], &theta[woff], &z[0, 0], n, fan_in, fan_out, False, False, 1.0)
            if k + 1 == n_layers:
                for r in range(n):
                    for j in range(fan_out):
                        z[r, j] = _sigmoid(z[r, j])
        if k + 1 < n_layers:
            # numpy's SIMD tanh beats a scalar libm loop by an order of magnitude
            np.tanh(out, out=out)
        acts.append(out)
        woff = boff + fan_out
    return acts


def forward(double[::1] theta, long[::1] sizes, double[:, ::1] x, double eps):
    out = _forward_acts(theta, sizes, x)[sizes.shape[0] - 1]
    cdef double[:, ::1] p = out
    cdef long r, j
    with nogil:
        for r in range(p.shape[0]):
            for j in range(p.shape[1]):
                if p[r, j] < eps:
                    p[r, j] = eps
                elif p[r, j] > 1.0 - eps:
                    p[r, j] = 1.0 - eps
    return out


cdef double _output_delta(double[:, ::1] p, double[:, ::1] t, double[:, ::1] w, double eps,
                          double[:, ::1] delta) noexcept nogil:
    """Weighted clamped BCE; ``delta = w * (p - t)`` inside the clamp, 0 outside."""
    cdef long r, j
    cdef double loss = 0.0, pc, pr
    for r in range(p.shape[0]):
        for j in range(p.shape[1]):
            pr = p[r, j]
            pc = pr
            if pc < eps:
                pc = eps
            elif pc > 1.0 - eps:
                pc = 1.0 - eps
            if w[r, j] != 0.0:
                loss -= w[r, j] * (t[r, j] * log(pc) + (1.0 - t[r, j]) * log1p(-pc))
            if pr >= eps and pr <= 1.0 - eps:
                delta[r, j] = w[r, j] * (pr - t[r, j])
            else:
                delta[r, j] = 0.0
    return loss


cdef object _run_backward(double[::1] theta, long[::1] sizes, double[:, ::1] x,
                          double[:, ::1] targets, double[:, ::1] weights,
                          double eps, bint per_sample):
    cdef int n_layers = sizes.shape[0] - 1
    cdef int k
    cdef long n = x.shape[0], n_params = theta.shape[0], r, i, j, fan_in, fan_out
    cdef long woff, boff
    cdef double loss
    cdef double[:, ::1] a_in
    cdef double[:, ::1] d
    cdef double[:, ::1] prev
    cdef double[:, ::1] g
    cdef double[::1] gsum
    acts = _forward_acts(theta, sizes, x)
    p = acts[n_layers]
    if targets.shape[0] != n or weights.shape[0] != n or targets.shape[1] != p.shape[1] \
            or weights.shape[1] != p.shape[1]:
        raise ValueError("targets and weights must match the output shape")
    delta = np.empty_like(p)
    d = delta
    loss = _output_delta(p, targets, weights, eps, d)
    if per_sample:
        result = np.zeros((n, n_params), dtype=np.float64)
        g = result
    else:
        result = np.zeros(n_params, dtype=np.float64)
        gsum = result

    offsets = []
    woff = 0
    for k in range(n_layers):
        offsets.append(woff)
        woff += sizes[k] * sizes[k + 1] + sizes[k + 1]

    for k in range(n_layers - 1, -1, -1):
        fan_in = sizes[k]
        fan_out = sizes[k + 1]
        woff = offsets[k]
        boff = woff + fan_in * fan_out
        a_in = acts[k]
        with nogil:
            if per_sample:
                for r in range(n):
                    for i in range(fan_in):
                        for j in range(fan_out):
                            g[r, woff + i * fan_out + j] = a_in[r, i] * d[r, j]
                    for j in range(fan_out):
                        g[r, boff + j] = d[r, j]
            elif n > 0:
                _matmul(&a_in[0, 0], &d[0, 0], &gsum[woff], fan_in, n, fan_out, True, False, 0.0)
                for r in range(n):
                    for j in range(fan_out):
                        gsum[boff + j] += d[r, j]
        if k > 0:
            prev_arr = np.empty((n, fan_in), dtype=np.float64)
            prev = prev_arr
            with nogil:
                if n > 0:
                    _matmul(&d[0, 0], &theta[woff], &prev[0, 0], n, fan_out, fan_in, False, True, 0.0)
                for r in range(n):
                    for i in range(fan_in):
                        prev[r, i] = prev[r, i] * (1.0 - a_in[r, i] * a_in[r, i])
            d = prev_arr
    if per_sample:
        return result
    return loss, result


def loss_grad(double[::1] theta, long[::1] sizes, double[:, ::1] x,
              double[:, ::1] targets, double[:, ::1] weights, double eps):
    return _run_backward(theta, sizes, x, targets, weights, eps, False)


def per_sample_grads(double[::1] theta, long[::1] sizes, double[:, ::1] x,
                     double[:, ::1] targets, double[:, ::1] weights, double eps):
    return _run_backward(theta, sizes, x, targets, weights, eps, True)
