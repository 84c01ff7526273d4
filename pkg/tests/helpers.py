"""Shared test oracles: a naive loop convolution and finite differences.

These are deliberately slow and dumb. They exist so the fast kernels have
something independent to be checked against.
"""

import numpy as np


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Reference cross-correlation via explicit loops, double precision."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    y = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for oi in range(ho):
                for oj in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (
                                    xp[ni, ci, oi * stride + ki, oj * stride + kj]
                                    * w[co, ci, ki, kj]
                                )
                    y[ni, co, oi, oj] = acc + b[co]
    return y


def fd_gradient(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function, element by element.

    Mutates a float64 copy of x in place while probing; f must not retain
    references to its argument across calls.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_err(analytic, numeric, floor=1e-3):
    """Worst-case relative error with a floor so near-zero entries compare
    absolutely at floor * tolerance."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def away_from_kinks(x, margin=0.05):
    """Push values near zero away from it so FD never straddles a ReLU kink."""
    x = np.array(x, dtype=np.float64)
    small = np.abs(x) < margin
    x[small] = margin * np.where(x[small] >= 0, 1.0, -1.0)
    return x


def random_one_hot(rng, n, c, h, w, dtype=np.float64):
    labels = rng.integers(0, c, size=(n, h, w))
    t = np.zeros((n, c, h, w), dtype=dtype)
    for k in range(c):
        t[:, k][labels == k] = 1.0
    return t
