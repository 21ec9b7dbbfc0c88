"""Closed-form algebra for 2x2 symmetric tensors.

Tensors [[a, b], [b, c]] travel as arrays of shape (..., 3) holding (a, b, c),
so every operation vectorizes over grids. Eigenvalues come from the half-angle
closed form, never an iterative solver: the dominant orientation is
theta = 0.5 * atan2(2b, a - c), normalized to [0, pi).

Two tolerance conventions used throughout (relative, hence scale-free):

* ``EIG_FLOOR_REL`` (1e-12, relative to the trace): below this an eigenvalue
  counts as zero, making the tensor not positive definite.
* ``TOL_EIG_REL`` (1e-9, relative to |l1| + |l2|): eigenvalues closer than
  this are treated as equal, so the orientation is indeterminate (isotropy).
"""

import numpy as np

from .errors import DegenerateWeights, NonPositiveDefinite

EIG_FLOOR_REL = 1e-12
TOL_EIG_REL = 1e-9
WEIGHT_FLOOR = 1e-300


def sym_tensor(a, b, c):
    """Pack components into the (..., 3) representation."""
    return np.stack(np.broadcast_arrays(
        np.asarray(a, dtype=float), np.asarray(b, dtype=float),
        np.asarray(c, dtype=float)), axis=-1)


def as_matrix(t):
    """(..., 3) components -> (..., 2, 2) dense matrices (for tests/debug)."""
    t = np.asarray(t, dtype=float)
    a, b, c = t[..., 0], t[..., 1], t[..., 2]
    m = np.empty(t.shape[:-1] + (2, 2))
    m[..., 0, 0] = a
    m[..., 0, 1] = b
    m[..., 1, 0] = b
    m[..., 1, 1] = c
    return m


def outer_tensor(v):
    """Rank-one tensor v v^T of 2-vectors, in component form."""
    v = np.asarray(v, dtype=float)
    return np.stack([v[..., 0] ** 2, v[..., 0] * v[..., 1], v[..., 1] ** 2], axis=-1)


def eig2(t):
    """Eigen-decompose symmetric 2x2 tensors.

    Returns (lam1, lam2, theta, isotropic) with lam1 >= lam2, theta the
    orientation of the lam1 eigenvector in [0, pi), and isotropic a bool mask
    flagging |lam1 - lam2| <= TOL_EIG_REL * (|lam1| + |lam2|), where theta is
    indeterminate and reported as 0.
    """
    t = np.asarray(t, dtype=float)
    a, b, c = t[..., 0], t[..., 1], t[..., 2]
    mean = 0.5 * (a + c)
    r = np.hypot(0.5 * (a - c), b)
    lam1 = mean + r
    lam2 = mean - r
    theta = np.mod(0.5 * np.arctan2(2.0 * b, a - c), np.pi)
    isotropic = (lam1 - lam2) <= TOL_EIG_REL * (np.abs(lam1) + np.abs(lam2))
    theta = np.where(isotropic, 0.0, theta)
    return lam1, lam2, theta, isotropic


def _recompose(lam1, lam2, theta):
    # R diag(lam1, lam2) R^T with R the rotation by theta
    ct, st = np.cos(theta), np.sin(theta)
    a = lam1 * ct * ct + lam2 * st * st
    b = (lam1 - lam2) * ct * st
    c = lam1 * st * st + lam2 * ct * ct
    return np.stack([a, b, c], axis=-1)


def is_nonneg_definite(t):
    """True where the tensor is symmetric nonnegative definite."""
    lam1, lam2, _, _ = eig2(t)
    return (lam2 >= -EIG_FLOOR_REL * np.abs(lam1 + lam2)) & np.isfinite(lam1)


def tensor_log(t):
    """Matrix logarithm of positive-definite tensors (componentwise batch).

    Raises NonPositiveDefinite if any eigenvalue is at or below the floor
    (1e-12 relative to the trace).
    """
    lam1, lam2, theta, _ = eig2(t)
    floor = EIG_FLOOR_REL * np.abs(lam1 + lam2)
    if np.any(lam2 <= floor) or np.any(lam2 <= 0.0):
        raise NonPositiveDefinite("tensor has a zero or negative eigenvalue")
    return _recompose(np.log(lam1), np.log(lam2), theta)


def tensor_exp(t):
    """Matrix exponential of symmetric tensors; always positive definite."""
    lam1, lam2, theta, _ = eig2(t)
    return _recompose(np.exp(lam1), np.exp(lam2), theta)


def log_euclidean_mean(tensors, weights):
    """Weighted log-Euclidean mean exp(sum w_i log T_i / sum w_i).

    tensors is (n, 3), weights (n,) nonnegative. Raises DegenerateWeights when
    the weights sum to (numerically) nothing, NonPositiveDefinite if any
    tensor with nonzero weight is not positive definite.
    """
    tensors = np.asarray(tensors, dtype=float)
    weights = np.asarray(weights, dtype=float)
    wsum = weights.sum()
    if not wsum > WEIGHT_FLOOR:
        raise DegenerateWeights("weights sum to zero")
    live = weights > 0
    logs = tensor_log(tensors[live])
    mean_log = (weights[live, None] * logs).sum(axis=0) / wsum
    return tensor_exp(mean_log)
