"""Central finite differences for checking hand-written backward passes."""
from __future__ import annotations

import numpy as np


def numerical_grad(f, x: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """d f() / d x by central differences, perturbing ``x`` in place.

    ``f`` takes no arguments and reads ``x`` through closure. With
    ``indices`` (flat positions) only those entries are estimated and a 1-D
    array in that order is returned.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * eps))
    out = np.array(out)
    return out.reshape(x.shape) if indices is None else out


def rel_error(analytic, numeric) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)
