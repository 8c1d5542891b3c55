"""Distance regularizers relative to a reference point.

Ball projections for the Frobenius and MARS distance constraints (the
MARS ball decomposes into independent per-row l1 balls), the exact
sort-threshold l1 projection used as an optimality oracle, and the
squared-Frobenius / MARS penalty terms with their (sub)gradients.
"""

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .linalg import frobenius_norm, mars_norm

CONSTRAINT_KINDS = ("mars", "frobenius")
PENALTY_KINDS = ("mars", "frobenius_squared")
L1_PROJECTIONS = ("scaling", "exact")

# Relative slack on feasibility decisions: radial scaling can overshoot
# the boundary by a few ulps, and reprojection must then be the identity
# so that projections are bitwise idempotent.
FEASIBILITY_SLACK = 1e-12


@dataclass(frozen=True)
class LayerConstraint:
    kind: str
    gamma: float

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind: {self.kind!r}")
        if not (self.gamma >= 0.0):
            raise ValueError(f"constraint radius must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class LayerPenalty:
    kind: str
    weight: float

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind: {self.kind!r}")
        if not (self.weight >= 0.0) or not np.isfinite(self.weight):
            raise ValueError(f"penalty weight must be finite and >= 0, got {self.weight}")


@dataclass(frozen=True)
class ConstraintSpec:
    """Per-layer distance constraints, keyed by layer index."""

    entries: Mapping[int, LayerConstraint] = field(default_factory=dict)

    def scaled(self, factor):
        return ConstraintSpec({
            i: LayerConstraint(e.kind, e.gamma * factor)
            for i, e in self.entries.items()
        })


@dataclass(frozen=True)
class PenaltySpec:
    """Per-layer distance penalties, keyed by layer index."""

    entries: Mapping[int, LayerPenalty] = field(default_factory=dict)

    def scaled(self, factor):
        return PenaltySpec({
            i: LayerPenalty(e.kind, e.weight * factor)
            for i, e in self.entries.items()
        })


def _feasible(norm, gamma):
    return norm <= gamma * (1.0 + FEASIBILITY_SLACK)


def project_l2_ball(t, gamma):
    """Euclidean projection of ``t`` onto the l2 (Frobenius) ball of radius gamma."""
    if not (gamma >= 0.0):
        raise ValueError(f"radius must be >= 0, got {gamma}")
    t = np.asarray(t, dtype=np.float64)
    norm = float(np.sqrt((t * t).sum()))
    if _feasible(norm, gamma):
        return t
    return t * (gamma / norm)


def project_l1_ball_scaling(t, gamma):
    """Radial shrink of ``t`` into the l1 ball: t / max(1, |t|_1 / gamma).

    Feasible and direction preserving, but not the Euclidean-nearest
    feasible point; see :func:`project_l1_ball_exact` for that.
    """
    if not (gamma >= 0.0):
        raise ValueError(f"radius must be >= 0, got {gamma}")
    t = np.asarray(t, dtype=np.float64)
    norm = float(np.abs(t).sum())
    if _feasible(norm, gamma):
        return t
    return t * (gamma / norm)


def project_l1_ball_exact(t, gamma):
    """Euclidean projection onto the l1 ball via sort-and-threshold.

    Sorts |t| descending, finds the largest prefix whose soft threshold
    stays positive, and shrinks every coordinate toward zero by that
    threshold (the simplex-projection reduction of Duchi et al.).
    O(n log n); used both as a selectable runtime projection and as the
    optimality oracle for the scaling variant.
    """
    if not (gamma >= 0.0):
        raise ValueError(f"radius must be >= 0, got {gamma}")
    t = np.asarray(t, dtype=np.float64)
    u = np.abs(t.ravel())
    norm = float(u.sum())
    if _feasible(norm, gamma):
        return t
    if gamma == 0.0:
        return np.zeros_like(t)
    s = np.sort(u)[::-1]
    cumulative = np.cumsum(s)
    k = np.arange(1, s.size + 1)
    positive = s - (cumulative - gamma) / k > 0.0
    rho = int(np.nonzero(positive)[0][-1])
    tau = (cumulative[rho] - gamma) / (rho + 1.0)
    return (np.sign(t) * np.maximum(np.abs(t) - tau, 0.0)).reshape(t.shape)


def _shift_project(w0, w_hat, gamma, norm_fn, project_fn):
    """Translate to the reference frame, project the difference, translate back.

    The returned point's recomputed distance (w - w0 has to be re-derived
    from the stored result) is verified against the slack and nudged
    inward when representation rounding lands it outside.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w0.shape != w_hat.shape:
        raise ValueError(f"shape mismatch: {w0.shape} vs {w_hat.shape}")
    diff = w_hat - w0
    if _feasible(norm_fn(diff), gamma):
        return w_hat
    if gamma == 0.0:
        return w0.copy()
    w = w0 + project_fn(diff, gamma)
    for _ in range(4):
        back = w - w0
        norm = norm_fn(back)
        if _feasible(norm, gamma):
            break
        w = w0 + back * ((gamma / norm) * (1.0 - 1e-13))
    return w


def project_frobenius_distance(w0, w_hat, gamma):
    """Project ``w_hat`` onto the Frobenius ball of radius gamma around ``w0``."""
    if not (gamma >= 0.0):
        raise ValueError(f"radius must be >= 0, got {gamma}")
    return _shift_project(
        w0, w_hat, gamma,
        norm_fn=lambda d: float(np.sqrt((d * d).sum())),
        project_fn=project_l2_ball,
    )


def project_mars_distance(w0, w_hat, gamma, inner="scaling"):
    """Project ``w_hat`` onto the MARS ball of radius gamma around ``w0``.

    The MARS distance constraint holds iff every row of (w - w0) lies in
    the l1 ball of radius gamma, so rows project independently; rows that
    are already feasible pass through unchanged. ``inner`` selects the
    per-row l1 projection: "scaling" (radial) or "exact" (Euclidean).
    """
    if not (gamma >= 0.0):
        raise ValueError(f"radius must be >= 0, got {gamma}")
    if inner not in L1_PROJECTIONS:
        raise ValueError(f"unknown l1 projection: {inner!r}")
    w0 = np.asarray(w0, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w0.shape != w_hat.shape:
        raise ValueError(f"shape mismatch: {w0.shape} vs {w_hat.shape}")
    if w0.ndim != 2:
        raise ValueError("MARS projection expects matrices; use matrix_view")
    project_fn = project_l1_ball_scaling if inner == "scaling" else project_l1_ball_exact
    row_norms = np.abs(w_hat - w0).sum(axis=1)
    if np.all(row_norms <= gamma * (1.0 + FEASIBILITY_SLACK)):
        return w_hat
    out = w_hat.copy()
    for i in np.nonzero(row_norms > gamma * (1.0 + FEASIBILITY_SLACK))[0]:
        out[i] = _shift_project(
            w0[i], w_hat[i], gamma,
            norm_fn=lambda d: float(np.abs(d).sum()),
            project_fn=project_fn,
        )
    return out


def penalty_l2sp(w, w0, lam):
    """Squared Frobenius distance penalty: value and exact gradient.

    value = lam * |w - w0|_F^2, grad = 2 * lam * (w - w0); smooth everywhere.
    """
    if not (lam >= 0.0):
        raise ValueError(f"penalty weight must be >= 0, got {lam}")
    w = np.asarray(w, dtype=np.float64)
    w0 = np.asarray(w0, dtype=np.float64)
    if w.shape != w0.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {w0.shape}")
    diff = w - w0
    value = lam * float((diff * diff).sum())
    return value, 2.0 * lam * diff


def penalty_mars(w, w0, lam):
    """MARS distance penalty: value and one deterministic subgradient.

    The subgradient is lam * sign(w - w0) on the lowest-index row whose
    absolute sum attains the maximum, zero elsewhere; sign(0) is 0. Any
    maximizing row yields a valid subgradient, the fixed choice keeps
    runs reproducible.
    """
    if not (lam >= 0.0):
        raise ValueError(f"penalty weight must be >= 0, got {lam}")
    w = np.asarray(w, dtype=np.float64)
    w0 = np.asarray(w0, dtype=np.float64)
    if w.shape != w0.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {w0.shape}")
    diff = w - w0
    value = lam * mars_norm(diff)
    sub = np.zeros_like(diff)
    row = int(np.abs(diff).sum(axis=1).argmax())
    sub[row] = lam * np.sign(diff[row])
    return value, sub


def project_distance(w0, w_hat, constraint, inner="scaling"):
    """Dispatch a :class:`LayerConstraint` to its projection."""
    if constraint.kind == "frobenius":
        return project_frobenius_distance(w0, w_hat, constraint.gamma)
    return project_mars_distance(w0, w_hat, constraint.gamma, inner=inner)


def penalty_value_grad(w, w0, penalty):
    """Dispatch a :class:`LayerPenalty` to its value/gradient computation."""
    if penalty.kind == "frobenius_squared":
        return penalty_l2sp(w, w0, penalty.weight)
    return penalty_mars(w, w0, penalty.weight)


def constraint_distance(w, w0, kind):
    """Distance of ``w`` from ``w0`` in the norm a constraint kind uses."""
    diff = np.asarray(w, dtype=np.float64) - np.asarray(w0, dtype=np.float64)
    if kind == "frobenius":
        return frobenius_norm(diff)
    return mars_norm(diff)
