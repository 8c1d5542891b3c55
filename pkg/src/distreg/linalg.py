"""Dense float64 tensors and the matrix/vector norms used throughout.

All arrays are C-contiguous 64-bit floats. A "matrix view" of a weight
tensor is the 2D matrix the norms are defined on: a dense weight matrix
as-is, a convolution kernel flattened to (out_channels, fan_in).
"""

import numpy as np

VECTOR_NORM_KINDS = ("l1", "l2", "linf")
DISTANCE_KINDS = ("mars", "frobenius")


def as_tensor(values, shape=None):
    """Coerce ``values`` to a C-contiguous float64 array, rejecting NaN/Inf.

    If ``shape`` is given, the flat value count must match its product.
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        expected = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        if arr.size != expected:
            raise ValueError(
                f"data length {arr.size} does not match shape {tuple(shape)}"
            )
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def matrix_view(param):
    """Return the 2D weight matrix a parameter tensor represents.

    Rank-2 tensors are returned unchanged. Rank-4 convolution kernels
    (out_ch, in_ch, kh, kw) are reshaped to (out_ch, in_ch*kh*kw); for a
    C-contiguous kernel this is a view, so writes propagate.
    """
    param = np.asarray(param)
    if param.ndim == 2:
        return param
    if param.ndim == 4:
        return param.reshape(param.shape[0], -1)
    raise ValueError(f"no matrix view for tensor of rank {param.ndim}")


def mars_norm(m):
    """Maximum absolute row sum of a nonempty matrix."""
    m = np.asarray(m)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("mars_norm requires a nonempty 2D matrix")
    return float(np.abs(m).sum(axis=1).max())


def frobenius_norm(m):
    """Square root of the sum of squared entries of a nonempty matrix."""
    m = np.asarray(m)
    if m.size == 0:
        raise ValueError("frobenius_norm requires a nonempty matrix")
    return float(np.sqrt((m * m).sum()))


def vector_norm(v, kind):
    """p-norm of a nonempty vector, ``kind`` one of l1, l2, linf."""
    v = np.asarray(v).ravel()
    if v.size == 0:
        raise ValueError("vector_norm requires a nonempty vector")
    if kind == "l1":
        return float(np.abs(v).sum())
    if kind == "l2":
        return float(np.sqrt((v * v).sum()))
    if kind == "linf":
        return float(np.abs(v).max())
    raise ValueError(f"unknown vector norm kind: {kind!r}")


def distance(a, b, kind):
    """Norm of (a - b) under ``kind`` ("mars" or "frobenius")."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    if kind == "mars":
        return mars_norm(diff)
    if kind == "frobenius":
        return frobenius_norm(diff)
    raise ValueError(f"unknown distance kind: {kind!r}")


def spectral_norm(apply_fn, apply_adjoint, in_shape, iters=500, tol=1e-10, seed=0):
    """Estimate the largest singular value of a linear map by power iteration.

    Parameters
    ----------
    apply_fn : callable mapping an array of shape ``in_shape`` to the output space
    apply_adjoint : callable implementing the adjoint map
    in_shape : input shape of the operator
    iters : maximum number of iterations (>= 1)
    tol : stop when successive estimates differ by less than this
    seed : seed of the random unit start vector (recorded by callers for
        reproducibility)

    The iterate runs on the normal operator, so successive estimates are
    non-decreasing up to roundoff. A zero operator yields 0.0.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(in_shape)
    nv = np.sqrt((v * v).sum())
    if nv == 0.0:  # pragma: no cover - measure-zero draw
        v = np.ones(in_shape, dtype=np.float64)
        nv = np.sqrt((v * v).sum())
    v = v / nv
    sigma = 0.0
    for _ in range(iters):
        u = apply_fn(v)
        nu = float(np.sqrt((u * u).sum()))
        if nu == 0.0:
            return 0.0
        w = apply_adjoint(u)
        nw = float(np.sqrt((w * w).sum()))
        if nw == 0.0:
            return nu
        v = w / nw
        prev, sigma = sigma, nu
        if abs(sigma - prev) < tol:
            break
    return sigma
