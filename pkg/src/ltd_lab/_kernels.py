"""Fused elementwise kernels for the tensor engine.

The autodiff graph keeps every activation alive, so chained numpy
elementwise ops run at DRAM speed on desk CPUs; fusing each hot chain
into one numba pass restores cache-friendly behaviour.  All kernels
take 2D contiguous views and are dtype-generic (float32 for training,
float64 for gradient checks).  A plain-numpy fallback keeps the package
usable without numba at reduced speed.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f
        return deco(args[0]) if args and callable(args[0]) else deco


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@njit(cache=True, fastmath=True, error_model="numpy")
def _gelu_bwd(x, t, g, out):
    c = x.dtype.type(_GELU_C)
    a3 = x.dtype.type(3.0 * _GELU_A)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            v = x[i, j]
            tv = t[i, j]
            dinner = c * (one + a3 * v * v)
            out[i, j] = g[i, j] * (half * (one + tv)
                                   + half * v * (one - tv * tv) * dinner)


@njit(cache=True, fastmath=True, error_model="numpy")
def _softmax_bwd(y, g, out):
    for i in range(y.shape[0]):
        dot = y.dtype.type(0.0)
        for j in range(y.shape[1]):
            dot += y[i, j] * g[i, j]
        for j in range(y.shape[1]):
            out[i, j] = y[i, j] * (g[i, j] - dot)


@njit(cache=True, fastmath=True, error_model="numpy")
def _layernorm_fwd(x, gamma, beta, eps, out, xhat, inv):
    n = x.shape[1]
    scale = x.dtype.type(1.0 / n)
    for i in range(x.shape[0]):
        mu = x.dtype.type(0.0)
        for j in range(n):
            mu += x[i, j]
        mu *= scale
        var = x.dtype.type(0.0)
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var *= scale
        r = x.dtype.type(1.0) / math.sqrt(var + eps)
        inv[i] = r
        for j in range(n):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]


@njit(cache=True, fastmath=True, error_model="numpy")
def _layernorm_bwd(xhat, inv, gamma, g, gx, ggamma, gbeta):
    n = xhat.shape[1]
    scale = xhat.dtype.type(1.0 / n)
    for i in range(xhat.shape[0]):
        m1 = xhat.dtype.type(0.0)
        m2 = xhat.dtype.type(0.0)
        for j in range(n):
            gj = g[i, j]
            h = xhat[i, j]
            ggamma[j] += gj * h
            gbeta[j] += gj
            gg = gj * gamma[j]
            m1 += gg
            m2 += gg * h
        m1 *= scale
        m2 *= scale
        for j in range(n):
            gx[i, j] = inv[i] * (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2)


@njit(cache=True, fastmath=True, error_model="numpy")
def _adam_step(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    one = p.dtype.type(1.0)
    for i in range(p.size):
        gi = g[i]
        m[i] = beta1 * m[i] + (one - beta1) * gi
        v[i] = beta2 * v[i] + (one - beta2) * gi * gi
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        p[i] -= lr * (mhat / (math.sqrt(vhat) + eps) + wd * p[i])


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1])


# numpy's SIMD tanh/exp beat numba's scalar libm calls, so the two
# transcendental forwards stay in (in-place, low-temporary) numpy


def gelu_forward(x):
    u = x * x
    u *= x
    u *= _GELU_A
    u += x
    u *= _GELU_C
    np.tanh(u, out=u)  # u is now t
    out = u + 1.0
    out *= x
    out *= 0.5
    return u, out


def softmax_forward(x):
    out = x - x.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


if HAVE_NUMBA:

    def gelu_backward(x, t, g):
        out = np.empty_like(t)
        _gelu_bwd(_rows(x), _rows(t), _rows(g), _rows(out))
        return out

    def softmax_backward(y, g):
        out = np.empty_like(y)
        _softmax_bwd(_rows(y), _rows(g), _rows(out))
        return out

    def layernorm_forward(x, gamma, beta, eps):
        x2 = _rows(x)
        out = np.empty_like(x2)
        xhat = np.empty_like(x2)
        inv = np.empty(x2.shape[0], dtype=x2.dtype)
        _layernorm_fwd(x2, gamma, beta, x2.dtype.type(eps), out, xhat, inv)
        return out.reshape(x.shape), xhat, inv

    def layernorm_backward(xhat, inv, gamma, g, out_shape):
        g2 = _rows(g)
        gx = np.empty_like(g2)
        ggamma = np.zeros_like(gamma)
        gbeta = np.zeros_like(gamma)
        _layernorm_bwd(xhat, inv, gamma, g2, gx, ggamma, gbeta)
        return gx.reshape(out_shape), ggamma, gbeta

    def adam_step(p, g, m, v, lr, beta1, beta2, eps, wd, t):
        dt = p.dtype.type
        _adam_step(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                   m, v, dt(lr), dt(beta1), dt(beta2), dt(eps), dt(wd),
                   dt(1.0 - beta1 ** t), dt(1.0 - beta2 ** t))

else:  # numpy fallback, same math

    def gelu_backward(x, t, g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * (x * x))
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    def softmax_backward(y, g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    def layernorm_forward(x, gamma, beta, eps):
        x2 = _rows(x)
        mu = x2.mean(axis=1, keepdims=True)
        var = x2.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x2 - mu) * inv
        out = (xhat * gamma + beta).reshape(x.shape)
        return out, xhat, inv[:, 0]

    def layernorm_backward(xhat, inv, gamma, g, out_shape):
        g2 = _rows(g)
        ggamma = (g2 * xhat).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gg = g2 * gamma
        gx = inv[:, None] * (gg - gg.mean(axis=1, keepdims=True)
                             - xhat * (gg * xhat).mean(axis=1, keepdims=True))
        return gx.reshape(out_shape), ggamma, gbeta

    def adam_step(p, g, m, v, lr, beta1, beta2, eps, wd, t):
        g = np.ascontiguousarray(g).reshape(-1)
        pf = p.reshape(-1)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        pf -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * pf)
