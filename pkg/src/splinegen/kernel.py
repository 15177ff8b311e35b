"""B-spline basis evaluation, curve evaluation, least-squares fitting and fit metrics.

All knot vectors are clamped on ``[0, 1]``: the first ``p + 1`` knots are 0 and
the last ``p + 1`` knots are 1.  Spans are half-open ``[t_i, t_{i+1})`` except
the last non-empty span, which is closed so that ``u = 1`` is evaluable.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

#: Reciprocal condition number below which the normal matrix counts as rank deficient.
RCOND_LIMIT = 1e-12
#: Ridge weight relative to ``trace(N^T N) / n`` used for flagged solves.
RIDGE_SCALE = 1e-10


class KnotVectorError(ValueError):
    """Raised for malformed knot vectors or mismatched fit dimensions."""


class IllConditionedWarning(RuntimeWarning):
    """Emitted when a fit has empty knot spans or a near-singular normal matrix."""


def validate_knots(knots, p):
    """Check that ``knots`` is a clamped, non-decreasing vector on [0, 1].

    Returns the knots as a float array.
    """
    t = np.asarray(knots, dtype=float)
    if p < 1:
        raise KnotVectorError(f"degree must be >= 1, got {p}")
    if t.ndim != 1 or t.size < 2 * (p + 1):
        raise KnotVectorError(f"need at least {2 * (p + 1)} knots for degree {p}, got {t.size}")
    if np.any(np.diff(t) < 0):
        raise KnotVectorError("knots must be non-decreasing")
    if np.any(t[: p + 1] != 0.0) or np.any(t[-(p + 1):] != 1.0):
        raise KnotVectorError(f"knot vector must be clamped: first/last {p + 1} knots equal 0/1")
    interior = t[p + 1: t.size - p - 1]
    if interior.size:
        if interior[0] <= 0.0 or interior[-1] >= 1.0:
            raise KnotVectorError("interior knots must lie strictly inside (0, 1)")
        _, counts = np.unique(interior, return_counts=True)
        if counts.max() > p:
            raise KnotVectorError(f"interior knot multiplicity exceeds degree {p}")
    return t


def clamped_knots(interior, p):
    """Build a clamped knot vector from sorted interior knots."""
    interior = np.asarray(interior, dtype=float).ravel()
    return np.concatenate([np.zeros(p + 1), interior, np.ones(p + 1)])


@dataclass
class BSplineCurve:
    """Clamped B-spline curve ``C(u) = sum_i N_{i,p}(u) P_i``."""

    degree: int
    knots: np.ndarray
    control_points: np.ndarray

    def __post_init__(self):
        self.knots = validate_knots(self.knots, self.degree)
        self.control_points = np.atleast_2d(np.asarray(self.control_points, dtype=float))
        n_ctrl = self.control_points.shape[0]
        if n_ctrl < self.degree + 1:
            raise KnotVectorError(f"need at least {self.degree + 1} control points, got {n_ctrl}")
        if self.knots.size != n_ctrl + self.degree + 1:
            raise KnotVectorError(
                f"knot count {self.knots.size} != control count {n_ctrl} + degree {self.degree} + 1"
            )

    @property
    def n_ctrl(self):
        return self.control_points.shape[0]

    @property
    def interior_knots(self):
        return self.knots[self.degree + 1: self.knots.size - self.degree - 1]

    def __call__(self, u):
        return eval_curve(self, u)

    def to_dict(self):
        return {
            "degree": int(self.degree),
            "knots": self.knots.tolist(),
            "control_points": self.control_points.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["degree"]), d["knots"], d["control_points"])

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


@dataclass
class FitReport:
    max_error: float = 0.0
    mse_error: float = 0.0
    hausdorff: float = 0.0
    condition_flag: bool = False
    empty_span_count: int = 0

    def to_dict(self):
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else v) for k, v in asdict(self).items()}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, s):
        return cls(**json.loads(s))


def find_span(knots, p, u):
    """Index ``i`` of the knot span with ``t_i <= u < t_{i+1}``.

    For ``u == 1`` the last span of nonzero width is returned.
    """
    t = np.asarray(knots, dtype=float)
    n = t.size - p - 2  # index of the last control point
    if n < p:
        raise KnotVectorError(f"knot vector too short for degree {p}")
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"parameter {u} outside [0, 1]")
    if u >= t[n + 1]:
        return n
    return int(np.searchsorted(t, u, side="right") - 1)


def find_spans(knots, p, us):
    """Vectorized :func:`find_span` over an array of parameters."""
    t = np.asarray(knots, dtype=float)
    us = np.asarray(us, dtype=float)
    n = t.size - p - 2
    if np.any(us < 0.0) or np.any(us > 1.0):
        raise ValueError("parameters must lie in [0, 1]")
    spans = np.searchsorted(t, us, side="right") - 1
    return np.clip(spans, p, n)


def basis_functions(knots, p, u):
    """Nonzero basis values at ``u``.

    Returns
    -------
    values : ndarray, shape (p + 1,)
        ``N_{first+k,p}(u)`` for ``k = 0..p``.
    first : int
        Index of the first active basis function.
    """
    span = find_span(knots, p, u)
    values = _basis_rows(np.asarray(knots, dtype=float), p, np.array([u]), np.array([span]))[0]
    return values, span - p


def _basis_rows(t, p, us, spans):
    # Cox-de Boor triangle, vectorized across parameters (NURBS book A2.2).
    m = us.size
    N = np.zeros((m, p + 1))
    N[:, 0] = 1.0
    left = np.zeros((m, p + 1))
    right = np.zeros((m, p + 1))
    for j in range(1, p + 1):
        left[:, j] = us - t[spans + 1 - j]
        right[:, j] = t[spans + j] - us
        saved = np.zeros(m)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.divide(N[:, r], denom, out=np.zeros(m), where=denom != 0)
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    # clamped right end: only the last basis function is active, exactly
    end = us >= t[-1]
    if end.any():
        N[end] = 0.0
        N[end, p] = 1.0
    return N


def basis_rows(knots, p, us):
    """Banded basis values for many parameters: ``(values (m, p+1), first index (m,))``."""
    t = np.asarray(knots, dtype=float)
    us = np.atleast_1d(np.asarray(us, dtype=float))
    spans = find_spans(t, p, us)
    return _basis_rows(t, p, us, spans), spans - p


def eval_curve(curve, u):
    """Evaluate a curve at a scalar parameter (returns a 3-vector) or an array of them."""
    scalar = np.ndim(u) == 0
    vals, first = basis_rows(curve.knots, curve.degree, u)
    idx = first[:, None] + np.arange(curve.degree + 1)
    pts = np.einsum("mk,mkd->md", vals, curve.control_points[idx])
    return pts[0] if scalar else pts


@dataclass
class CollocationMatrix:
    """Banded collocation matrix: row ``j`` holds ``N_{first[j]+k,p}(u_j)`` for ``k = 0..p``."""

    values: np.ndarray
    first: np.ndarray
    n_ctrl: int
    degree: int = field(default=0)

    @property
    def shape(self):
        return (self.values.shape[0], self.n_ctrl)

    def toarray(self):
        m = self.values.shape[0]
        out = np.zeros((m, self.n_ctrl))
        cols = self.first[:, None] + np.arange(self.values.shape[1])
        out[np.arange(m)[:, None], cols] = self.values
        return out

    def matvec(self, x):
        cols = self.first[:, None] + np.arange(self.values.shape[1])
        return np.einsum("mk,mk...->m...", self.values, x[cols])

    def rmatvec(self, y):
        out = np.zeros((self.n_ctrl,) + y.shape[1:])
        cols = self.first[:, None] + np.arange(self.values.shape[1])
        vals = self.values.reshape(self.values.shape + (1,) * (y.ndim - 1))
        np.add.at(out, cols, vals * y[:, None])
        return out

    def gram_banded(self):
        """``N^T N`` in upper banded storage suitable for :func:`scipy.linalg.solveh_banded`."""
        p = self.values.shape[1] - 1
        ab = np.zeros((p + 1, self.n_ctrl))
        for a in range(p + 1):
            for b in range(a, p + 1):
                prod = self.values[:, a] * self.values[:, b]
                # entry (first+a, first+b) sits at row p - (b - a), column first + b
                np.add.at(ab[p - (b - a)], self.first + b, prod)
        return ab


def build_collocation(params, knots, p, n_ctrl):
    t = validate_knots(knots, p)
    params = np.atleast_1d(np.asarray(params, dtype=float))
    if t.size != n_ctrl + p + 1:
        raise KnotVectorError(f"knot count {t.size} != n_ctrl {n_ctrl} + p {p} + 1")
    if n_ctrl > params.size:
        raise KnotVectorError(f"n_ctrl {n_ctrl} exceeds point count {params.size}")
    vals, first = basis_rows(t, p, params)
    return CollocationMatrix(vals, first, n_ctrl, p)


def check_schoenberg_whitney(params, knots, p):
    """Number of nonzero-width knot spans that contain no parameter value."""
    t = np.asarray(knots, dtype=float)
    params = np.asarray(params, dtype=float)
    spans = find_spans(t, p, params)
    occupied = np.zeros(t.size, dtype=bool)
    occupied[spans] = True
    n = t.size - p - 2
    widths = np.diff(t)[p: n + 1]
    return int(np.count_nonzero((widths > 0) & ~occupied[p: n + 1]))


def paired_distances(curve, params, points):
    points = np.asarray(points, dtype=float)
    if points.shape[0] == 0:
        raise ValueError("empty point set")
    if len(params) != points.shape[0]:
        raise ValueError(f"{len(params)} params for {points.shape[0]} points")
    return np.linalg.norm(eval_curve(curve, np.asarray(params, dtype=float)) - points, axis=1)


def max_error(curve, params, points):
    return float(paired_distances(curve, params, points).max())


def mse_error(curve, params, points, squared=False):
    """Mean of the paired distances.

    By default this is the mean of unsquared Euclidean distances; pass
    ``squared=True`` for the mean of squared distances.
    """
    d = paired_distances(curve, params, points)
    return float(np.mean(d**2 if squared else d))


def hausdorff(set_a, set_b):
    """Symmetric Hausdorff distance between two 3D point sets."""
    a = np.atleast_2d(np.asarray(set_a, dtype=float))
    b = np.atleast_2d(np.asarray(set_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("hausdorff of an empty set is undefined")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(max(d_ab.max(), d_ba.max()))


def fit_report(curve, params, points, empty_spans=0, flagged=False, squared_mse=False):
    d = paired_distances(curve, params, points)
    return FitReport(
        max_error=float(d.max()),
        mse_error=float(np.mean(d**2 if squared_mse else d)),
        hausdorff=hausdorff(eval_curve(curve, np.asarray(params, dtype=float)), points),
        condition_flag=bool(flagged),
        empty_span_count=int(empty_spans),
    )


def solve_normal_equations(colloc, points, regularize=None):
    """Solve ``(N^T N) P = N^T D``.

    ``regularize`` forces (True) or forbids (False) the ridge term; ``None``
    adds it only when the system is detected to be ill-conditioned.

    Returns ``(control_points, flagged)``.
    """
    ab = colloc.gram_banded()
    rhs = colloc.rmatvec(np.asarray(points, dtype=float))
    n = colloc.n_ctrl
    gram = _banded_to_dense(ab)
    flagged = False
    if regularize is None:
        diag = ab[-1]
        if np.any(diag <= 0):
            flagged = True
        else:
            rcond = 1.0 / np.linalg.cond(gram)
            flagged = not np.isfinite(rcond) or rcond < RCOND_LIMIT
        use_ridge = flagged
    else:
        use_ridge = bool(regularize)
        flagged = use_ridge
    if use_ridge:
        lam = RIDGE_SCALE * np.trace(gram) / n
        ab = ab.copy()
        ab[-1] += lam
    try:
        ctrl = linalg.solveh_banded(ab, rhs)
    except linalg.LinAlgError:
        lam = RIDGE_SCALE * max(np.trace(gram), 1.0) / n
        ctrl = linalg.solve(gram + lam * np.eye(n), rhs, assume_a="sym")
        flagged = True
    return ctrl, flagged


def _banded_to_dense(ab):
    p = ab.shape[0] - 1
    n = ab.shape[1]
    out = np.zeros((n, n))
    for k in range(p + 1):
        off = p - k
        d = ab[k, off:]
        out[np.arange(n - off), np.arange(off, n)] = d
        out[np.arange(off, n), np.arange(n - off)] = d
    return out


def least_squares_fit(points, params, knots, p, regularize=None, squared_mse=False):
    """Fit control points to ``points`` at fixed ``params`` and ``knots``.

    Returns ``(curve, report)``.  Empty knot spans or a numerically singular
    normal matrix produce an :class:`IllConditionedWarning`; the ridge solve is
    still returned and ``report.condition_flag`` is set.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    params = np.atleast_1d(np.asarray(params, dtype=float))
    if points.shape[0] != params.size:
        raise KnotVectorError(f"{params.size} params for {points.shape[0]} points")
    t = validate_knots(knots, p)
    n_ctrl = t.size - p - 1
    colloc = build_collocation(params, t, p, n_ctrl)
    empty = check_schoenberg_whitney(params, t, p)
    ctrl, flagged = solve_normal_equations(colloc, points, regularize=regularize)
    flagged = flagged or empty > 0
    if flagged:
        warnings.warn(
            f"ill-conditioned fit: {empty} empty knot span(s)", IllConditionedWarning, stacklevel=2
        )
    curve = BSplineCurve(p, t, ctrl)
    return curve, fit_report(curve, params, points, empty, flagged, squared_mse)
