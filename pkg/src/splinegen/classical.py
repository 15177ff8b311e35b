"""Heuristic parameterization and knot placement for ordered data points.

These are the classical baselines: uniform / chord-length / centripetal
parameters combined with uniform / AVG / KTP / NKTP knots.
"""
from __future__ import annotations

import enum
import warnings

import numpy as np

from .kernel import KnotVectorError, clamped_knots, least_squares_fit


class ParamMethod(str, enum.Enum):
    UNIFORM = "uniform"
    CHORD = "chord"
    CENTRIPETAL = "centripetal"


class KnotMethod(str, enum.Enum):
    UNIFORM = "uniform"
    AVG = "avg"
    KTP = "ktp"
    NKTP = "nktp"


class DegenerateInputWarning(RuntimeWarning):
    pass


def parameterize(points, method=ParamMethod.CHORD):
    """Assign parameters in [0, 1] to points given in curve order.

    Consecutive duplicate points contribute zero length, so their parameters
    repeat; a warning is emitted in that case.
    """
    method = ParamMethod(method)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = pts.shape[0] - 1
    if m < 1:
        raise ValueError("need at least two points")
    if method is ParamMethod.UNIFORM:
        return np.arange(m + 1) / m
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if method is ParamMethod.CENTRIPETAL:
        seg = np.sqrt(seg)
    if np.any(seg == 0):
        warnings.warn(
            f"{np.count_nonzero(seg == 0)} zero-length segment(s) collapsed", DegenerateInputWarning, stacklevel=2
        )
    total = seg.sum()
    if total == 0:
        warnings.warn("all points coincide; falling back to uniform parameters", DegenerateInputWarning, stacklevel=2)
        return np.arange(m + 1) / m
    u = np.concatenate([[0.0], np.cumsum(seg) / total])
    u[-1] = 1.0
    return u


def place_knots(params, p, n_ctrl, method=KnotMethod.KTP):
    """Clamped knot vector of length ``n_ctrl + p + 1`` for sorted ``params``."""
    method = KnotMethod(method)
    u = np.asarray(params, dtype=float)
    m = u.size - 1
    n = n_ctrl - 1
    if n_ctrl < p + 1:
        raise KnotVectorError(f"n_ctrl={n_ctrl} < degree + 1 = {p + 1}")
    if np.any(np.diff(u) < 0):
        raise ValueError("params must be sorted ascending")
    n_int = n - p

    if method is KnotMethod.UNIFORM:
        interior = np.arange(1, n_int + 1) / (n_int + 1)
    elif method is KnotMethod.AVG:
        if m != n:
            raise KnotVectorError(f"AVG needs point count == n_ctrl, got {m + 1} points for {n_ctrl} controls")
        interior = np.array([u[j: j + p].mean() for j in range(1, n_int + 1)])
    elif method is KnotMethod.KTP:
        if m <= n:
            raise KnotVectorError(f"KTP needs point count > n_ctrl, got {m + 1} points for {n_ctrl} controls")
        d = (m + 1) / (n - p + 1)
        j = np.arange(1, n_int + 1)
        i = np.floor(j * d).astype(int)
        alpha = j * d - i
        interior = (1 - alpha) * u[i - 1] + alpha * u[i]
    else:
        if m <= n:
            raise KnotVectorError(f"NKTP needs point count > n_ctrl, got {m + 1} points for {n_ctrl} controls")
        interior = _nktp_interior(u, p, n)
    return clamped_knots(interior, p)


def _nktp_interior(u, p, n):
    # KTP brackets [u_{i-1}, u_i]; the knot is the mean of the window
    # u_{i-2}..u_{i+1}, clipped back into the bracket so every span keeps a
    # parameter whenever the KTP spacing d >= 2.
    m = u.size - 1
    d = (m + 1) / (n - p + 1)
    i = np.floor(np.arange(1, n - p + 1) * d).astype(int)
    lo = np.maximum(i - 2, 0)
    hi = np.minimum(i + 1, m)
    means = np.array([u[a: b + 1].mean() for a, b in zip(lo, hi)])
    return np.clip(means, u[i - 1], u[i])


def subsample_params(params, count):
    """``count`` parameters at evenly spaced indices, endpoints included."""
    u = np.asarray(params, dtype=float)
    return u[np.round(np.linspace(0, u.size - 1, count)).astype(int)]


def classical_fit(points, p, n_ctrl, param_method=ParamMethod.CHORD, knot_method=KnotMethod.KTP,
                  subsample_avg=False):
    """Parameterize, place knots and fit. Returns ``(curve, params, report)``.

    AVG is defined for as many points as control points.  With
    ``subsample_avg`` it is applied to :func:`subsample_params` of the
    parameters when there are more points, and the fit still uses all of them.
    """
    params = parameterize(points, param_method)
    knot_params = params
    if subsample_avg and KnotMethod(knot_method) is KnotMethod.AVG and params.size > n_ctrl:
        knot_params = subsample_params(params, n_ctrl)
    knots = place_knots(knot_params, p, n_ctrl, knot_method)
    curve, report = least_squares_fit(points, params, knots, p)
    return curve, params, report


def run_baseline(points, p, n_ctrl, param_method=ParamMethod.CHORD, knot_method=KnotMethod.KTP,
                 subsample_avg=False):
    return classical_fit(points, p, n_ctrl, param_method, knot_method, subsample_avg)[2]
