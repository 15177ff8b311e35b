"""Synthetic B-spline curve datasets.

Curves are random clamped B-splines normalized into the unit cube, filtered
for self-intersection, sampled, and shuffled so the points arrive unorganized.
Records are stored as JSONL, one curve per line.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, replace

import numpy as np

from .kernel import BSplineCurve, clamped_knots, eval_curve


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    degree: int = 3
    ctrl_range: tuple = (5, 10)
    sample_range: tuple = (60, 120)
    knot_distribution: str = "uniform"  # or "beta" for clustered interior knots
    planar_fraction: float = 0.3
    sampling: str = "random"
    self_intersection_tol: float = 1e-6
    max_attempts: int = 100

    def __post_init__(self):
        if self.degree < 2:
            raise ValueError("degree must be >= 2")
        lo, hi = self.ctrl_range
        if not self.degree + 1 <= lo <= hi:
            raise ValueError(f"bad control-point range {self.ctrl_range}")
        lo, hi = self.sample_range
        if not 2 <= lo <= hi:
            raise ValueError(f"bad sample range {self.sample_range}")
        if self.sample_range[0] < self.ctrl_range[1]:
            raise ValueError("sample counts must be at least the control count")


@dataclass
class CurveRecord:
    curve: BSplineCurve
    samples: np.ndarray  # shuffled points
    gt_params: np.ndarray  # sorted, curve order
    gt_order: np.ndarray  # samples[k] == eval_curve(curve, gt_params[gt_order[k]])
    seed: int = 0

    @property
    def ordered_points(self):
        out = np.empty_like(self.samples)
        out[self.gt_order] = self.samples
        return out

    @property
    def sample_params(self):
        """Ground-truth parameter of each shuffled sample."""
        return self.gt_params[self.gt_order]

    def to_dict(self):
        return {
            "seed": int(self.seed),
            "degree": int(self.curve.degree),
            "knots": self.curve.knots.tolist(),
            "control_points": self.curve.control_points.tolist(),
            "params": self.gt_params.tolist(),
            "points": self.samples.tolist(),
            "order": self.gt_order.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        curve = BSplineCurve(int(d["degree"]), d["knots"], d["control_points"])
        order = np.asarray(d["order"], dtype=int)
        samples = np.asarray(d["points"], dtype=float).reshape(-1, 3)
        params = np.asarray(d["params"], dtype=float)
        if not (order.size == samples.shape[0] == params.size):
            raise ValueError("points, params and order differ in length")
        if not np.array_equal(np.sort(order), np.arange(order.size)):
            raise ValueError("order is not a permutation")
        return cls(curve, samples, params, order, int(d["seed"]))


def normalize(points):
    """Isotropically map points into [0, 1]^3.

    Returns ``(normalized, (scale, translation))`` with
    ``normalized = scale * points + translation``.
    """
    pts = np.asarray(points, dtype=float)
    lo = pts.min(axis=0)
    extent = (pts.max(axis=0) - lo).max()
    scale = 1.0 / extent if extent > 0 else 1.0
    translation = -scale * lo
    return scale * pts + translation, (scale, translation)


def denormalize(points, transform):
    scale, translation = transform
    return (np.asarray(points, dtype=float) - translation) / scale


def generate_curve(cfg, seed):
    rng = np.random.default_rng(seed)
    p = cfg.degree
    n_ctrl = int(rng.integers(cfg.ctrl_range[0], cfg.ctrl_range[1] + 1))
    ctrl = rng.random((n_ctrl, 3))
    if rng.random() < cfg.planar_fraction:
        ctrl[:, 2] = 0.0
    ctrl, _ = normalize(ctrl)
    n_int = n_ctrl - p - 1
    if cfg.knot_distribution == "beta":
        interior = rng.beta(0.7, 0.7, n_int)
    else:
        interior = rng.random(n_int)
    interior = np.clip(np.sort(interior), 1e-6, 1 - 1e-6)
    interior = _limit_multiplicity(interior, p)
    return BSplineCurve(p, clamped_knots(interior, p), ctrl)


def _limit_multiplicity(interior, p):
    vals, counts = np.unique(interior, return_counts=True)
    return np.repeat(vals, np.minimum(counts, p))


def _segment_distances(a0, a1, b0, b1):
    # Closest distance between 3D segments [a0,a1] and [b0,b1], vectorized.
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    denom = a * e - b * b
    tiny = 1e-300
    s = np.where(denom > tiny, np.clip((b * f - c * e) / np.where(denom > tiny, denom, 1.0), 0, 1), 0.0)
    t = (b * s + f) / np.where(e > tiny, e, 1.0)
    # clamp t and recompute s where needed
    s = np.where(t < 0, np.clip(-c / np.where(a > tiny, a, 1.0), 0, 1), s)
    s = np.where(t > 1, np.clip((b - c) / np.where(a > tiny, a, 1.0), 0, 1), s)
    t = np.clip(t, 0, 1)
    diff = (a0 + d1 * s[:, None]) - (b0 + d2 * t[:, None])
    return np.linalg.norm(diff, axis=1)


def is_self_intersecting(curve, tol=1e-6, samples=200):
    """Dense-polyline test: any two non-adjacent segments closer than ``tol``."""
    pts = eval_curve(curve, np.linspace(0.0, 1.0, max(samples, 200)))
    starts, ends = pts[:-1], pts[1:]
    i, j = np.triu_indices(len(starts), k=2)
    return bool(np.any(_segment_distances(starts[i], ends[i], starts[j], ends[j]) < tol))


def sample_points(curve, m, strategy="random", seed=None):
    """Sample ``m`` points. Returns ``(params sorted ascending, points)``."""
    if strategy == "equispaced":
        params = np.linspace(0.0, 1.0, m)
    elif strategy == "random":
        params = np.sort(np.random.default_rng(seed).random(m))
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    return params, eval_curve(curve, params)


def shuffle_record(record, seed):
    perm = np.random.default_rng(seed).permutation(record.samples.shape[0])
    return replace(record, samples=record.samples[perm], gt_order=record.gt_order[perm])


def generate_record(cfg, seed):
    """Draw curves until one passes the self-intersection filter.

    Returns ``(record, rejected_count)``.
    """
    ss = np.random.SeedSequence(seed)
    curve_seq, sample_seq, shuffle_seq = ss.spawn(3)
    rejected = 0
    for attempt in curve_seq.spawn(cfg.max_attempts):
        curve = generate_curve(cfg, attempt)
        if not is_self_intersecting(curve, cfg.self_intersection_tol):
            break
        rejected += 1
    else:
        raise RuntimeError(f"no non-self-intersecting curve after {cfg.max_attempts} attempts (seed {seed})")
    rng = np.random.default_rng(sample_seq)
    m = int(rng.integers(cfg.sample_range[0], cfg.sample_range[1] + 1))
    params, points = sample_points(curve, m, cfg.sampling, rng)
    record = CurveRecord(curve, points, params, np.arange(m), int(seed))
    return shuffle_record(record, shuffle_seq), rejected


def record_seeds(seed, count):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def generate_dataset(cfg, count=2000, seed=0, with_stats=False):
    records, rejected = [], 0
    for s in record_seeds(seed, count):
        rec, rej = generate_record(cfg, s)
        records.append(rec)
        rejected += rej
    if with_stats:
        return records, {"accepted": count, "rejected": rejected}
    return records


def train_val_split(records, ratio=0.8, seed=0):
    perm = np.random.default_rng(seed).permutation(len(records))
    cut = int(round(ratio * len(records)))
    return [records[i] for i in perm[:cut]], [records[i] for i in perm[cut:]]


def write_dataset(path, records):
    """Write records as JSONL (atomically, via a temp file in the target directory)."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict()))
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_dataset(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(CurveRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
    return records
