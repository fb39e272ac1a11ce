"""Pure-NumPy reference implementations of the compiled kernels."""

import numpy as np


def sin_arr(x):
    return np.sin(x)


def cos_arr(x):
    return np.cos(x)


def correlate3x3_valid(field, kernel):
    """Valid-mode 2D cross-correlation of `field` with a 3x3 kernel."""
    f = np.asarray(field, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 3 or f.shape[1] < 3:
        raise ValueError(f"field must be at least 3x3, got {f.shape}")
    if k.shape != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {k.shape}")
    ny, nx = f.shape
    out = np.zeros((ny - 2, nx - 2), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            w = k[di, dj]
            if w != 0.0:
                out += w * f[di:di + ny - 2, dj:dj + nx - 2]
    return out
