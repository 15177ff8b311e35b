"""Finite-difference checks of analytic gradients.

Each check draws small random float64 inputs, reduces the op output to a
scalar with a fixed random projection, and compares the autograd gradient
with respect to all inputs against central differences.  The error of a
gradient array is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
relative to the gradient's own scale, so rounding noise in components that
are exactly zero (a key bias under softmax, say) does not dominate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import nn as snn
from .kernel import check_schoenberg_whitney, clamped_knots
from .pinn import differentiable_fit

NN_STEP = 1e-5
PINN_STEP = 1e-6
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def relative_error(analytic, numeric, scale=None):
    a = np.asarray(analytic, dtype=float)
    f = np.asarray(numeric, dtype=float)
    if scale is None:
        scale = max(np.abs(a).max(initial=0.0), np.abs(f).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - f).max(initial=0.0) / scale)


def numeric_grad(fn, x, h):
    """Central differences of scalar ``fn`` with respect to numpy array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = fn(x)
        flat[i] = keep - h
        fm = fn(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2 * h)
    return g


def _torch_check(fn, inputs, h=NN_STEP):
    """Relative error of the gradient of ``fn(*inputs)`` with respect to all inputs jointly."""
    inputs = [torch.as_tensor(x, dtype=torch.float64).clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    proj = torch.as_tensor(np.random.default_rng(out.numel()).standard_normal(tuple(out.shape)))
    (out * proj).sum().backward()
    analytic, numeric = [], []
    for i, x in enumerate(inputs):
        def scalar(v, i=i):
            args = [t.detach() for t in inputs]
            args[i] = torch.as_tensor(v)
            with torch.no_grad():
                return float((fn(*args) * proj).sum())
        numeric.append(numeric_grad(scalar, x.detach().numpy(), h).ravel())
        analytic.append(x.grad.numpy().ravel())
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def _nn_cases(rng):
    """Yield (name, fn, inputs) for one random instance of every layer op."""
    b = int(rng.integers(1, 3))
    n = int(rng.integers(2, 6))
    d = 2 * int(rng.integers(1, 4))
    heads = 2
    x = rng.standard_normal((b, n, d))
    yield "coord_encode", snn.coord_encode, [rng.random((n, 3))]
    yield "linear", snn.linear, [x, rng.standard_normal((d + 1, d)), rng.standard_normal(d + 1)]
    yield "layer_norm", snn.layer_norm, [x, rng.standard_normal(d), rng.standard_normal(d)]
    mask = torch.as_tensor(rng.random((b, n, n)) < 0.7) | torch.eye(n, dtype=torch.bool)
    yield "softmax", lambda z: snn.softmax(z, mask), [rng.standard_normal((b, n, n))]
    yield "log_softmax", lambda z: snn.log_softmax(z, torch.ones(b, n, n, dtype=torch.bool)), [rng.standard_normal((b, n, n))]
    yield "attention", lambda q, k, v: snn.attention(q, k, v, mask)[0], [x, rng.standard_normal((b, n, d)), rng.standard_normal((b, n, d))]
    w = [rng.standard_normal(s) * 0.5 for s in [(d, d), (d,)] * 4]
    m = int(rng.integers(2, 6))
    kv = rng.standard_normal((b, m, d))
    yield ("multi_head_attention",
           lambda q, k, *p: snn.multi_head_attention(q, k, k, p, heads, None),
           [x, kv, *w])
    target = rng.standard_normal((b, n, d))
    yield "mse_loss", lambda p: snn.mse_loss(p, torch.as_tensor(target)), [x]
    tgt = torch.as_tensor(rng.integers(0, n, (b, n)))
    allowed = torch.as_tensor(rng.random((b, n, n)) < 0.6)
    allowed[torch.arange(b)[:, None], torch.arange(n)[None], tgt] = True
    yield "cross_entropy_loss", lambda z: snn.cross_entropy_loss(z, tgt, allowed), [rng.standard_normal((b, n, n))]


def check_neural(instances=50, seed=0):
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(instances):
        for name, fn, inputs in _nn_cases(rng):
            worst[name] = max(worst.get(name, 0.0), _torch_check(fn, inputs))
    return [CheckResult(name, instances, err) for name, err in worst.items()]


def random_pinn_instance(rng, m=20, n_ctrl=8, p=3, gap=1e-3):
    """A well-posed random fit: every span populated, separated knots, clear argmax."""
    while True:
        interior = np.sort(rng.uniform(0.05, 0.95, n_ctrl - p - 1))
        if interior.size > 1 and np.diff(interior).min() < 10 * PINN_STEP:
            continue
        u = np.sort(rng.uniform(0.0, 1.0, m))
        u[0], u[-1] = 0.0, 1.0
        if np.diff(u).min() < 10 * PINN_STEP or check_schoenberg_whitney(u, clamped_knots(interior, p), p):
            continue
        points = rng.random((m, 3))
        res = differentiable_fit(points, u, interior, p)
        dist = np.sort(np.linalg.norm(res.curve_points - points, axis=1))
        if dist[-1] - dist[-2] > gap:
            return points, u, interior, p


def pinn_errors(points, u, interior, p, h=PINN_STEP):
    """Relative errors of the analytic parameter and knot gradients.

    Both are measured against the scale of the joint gradient, since either
    part can be exactly zero (a knot whose span only holds an interpolated
    end point, say).  The end parameters are pinned at 0 and 1, so only
    interior parameters are differenced.
    """
    res = differentiable_fit(points, u, interior, p)

    def loss_u(v):
        full = u.copy()
        full[1:-1] = v
        return differentiable_fit(points, full, interior, p).loss

    num_u = numeric_grad(loss_u, u[1:-1], h)
    num_t = numeric_grad(lambda t: differentiable_fit(points, u, t, p).loss, interior, h)
    an_u, an_t = res.grad_params[1:-1], res.grad_knots
    scale = max(np.abs(np.concatenate([an_u, an_t, num_u, num_t])).max(initial=0.0), 1e-300)
    return relative_error(an_u, num_u, scale), relative_error(an_t, num_t, scale)


def check_pinn(instances=50, seed=0, m=20, n_ctrl=8, p=3):
    rng = np.random.default_rng(seed)
    eu = et = 0.0
    for _ in range(instances):
        a, b = pinn_errors(*random_pinn_instance(rng, m, n_ctrl, p))
        eu, et = max(eu, a), max(et, b)
    return [CheckResult("pinn_dL_du", instances, eu), CheckResult("pinn_dL_dt", instances, et)]


def run_all(instances=50, seed=0, m=20, n_ctrl=8):
    return check_neural(instances, seed) + check_pinn(instances, seed, m, n_ctrl)


def format_table(results):
    lines = [f"{'check':<22} {'n':>4} {'max rel err':>12}  status"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        err = "nan" if math.isnan(r.max_rel_error) else f"{r.max_rel_error:.3e}"
        lines.append(f"{r.name:<22} {r.instances:>4} {err:>12}  {status}")
    return "\n".join(lines)
