"""Differentiable least-squares fitting layer.

Given points, their parameters and the interior knots, the layer solves the
normal equations for the control points and returns the maximum distance
between the fitted curve and the points.  The backward pass gives the
derivative of that loss with respect to every parameter and interior knot:
basis derivatives come from differentiating the Cox-de Boor recursion, and the
linear solve is differentiated implicitly.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn as snn
from .kernel import (
    RCOND_LIMIT,
    RIDGE_SCALE,
    KnotVectorError,
    check_schoenberg_whitney,
    clamped_knots,
    find_spans,
    validate_knots,
)
from .model import KNOT_EPS, DivergenceError

log = logging.getLogger(__name__)

TIE_RTOL = 1e-12
#: Residuals below this (relative to the data scale) are rounding noise of an exact fit.
ZERO_LOSS = 1e-12


class DegenerateFitError(ValueError):
    pass


def basis_with_derivatives(knots, p, us):
    """Nonzero basis values and their derivatives.

    Returns
    -------
    values : (m, p+1)
    first : (m,) index of the first active basis function
    d_du : (m, p+1) derivative with respect to the parameter
    d_dt : (m, p+1, 2p+2) derivative with respect to the local knots
        ``t[first : first + 2p + 2]``
    """
    t = np.asarray(knots, dtype=float)
    us = np.atleast_1d(np.asarray(us, dtype=float))
    m = us.size
    s = find_spans(t, p, us)
    first = s - p
    nloc = 2 * p + 2
    # local knot j corresponds to global index first + j
    tl = t[first[:, None] + np.arange(nloc)]
    N = np.ones((m, 1))
    dN_du = np.zeros((m, 1))
    dN_dt = np.zeros((m, 1, nloc))
    rows = np.arange(m)
    for q in range(1, p + 1):
        new = np.zeros((m, q + 1))
        new_du = np.zeros((m, q + 1))
        new_dt = np.zeros((m, q + 1, nloc))
        for r in range(q + 1):
            li = p - q + r  # local index of i = s - q + r
            if r >= 1:  # (u - t_i) / (t_{i+q} - t_i) * N_{i,q-1}
                ti, tq = tl[:, li], tl[:, li + q]
                den = tq - ti
                ok = den > 0
                inv = np.divide(1.0, den, out=np.zeros(m), where=ok)
                a = (us - ti) * inv
                prev, prev_du, prev_dt = N[:, r - 1], dN_du[:, r - 1], dN_dt[:, r - 1]
                new[:, r] += a * prev
                new_du[:, r] += inv * prev + a * prev_du
                new_dt[:, r] += a[:, None] * prev_dt
                new_dt[rows, r, li] += (us - tq) * inv * inv * prev
                new_dt[rows, r, li + q] += -(us - ti) * inv * inv * prev
            if r <= q - 1:  # (t_{i+q+1} - u) / (t_{i+q+1} - t_{i+1}) * N_{i+1,q-1}
                t1, tq1 = tl[:, li + 1], tl[:, li + q + 1]
                den = tq1 - t1
                ok = den > 0
                inv = np.divide(1.0, den, out=np.zeros(m), where=ok)
                b = (tq1 - us) * inv
                prev, prev_du, prev_dt = N[:, r], dN_du[:, r], dN_dt[:, r]
                new[:, r] += b * prev
                new_du[:, r] += -inv * prev + b * prev_du
                new_dt[:, r] += b[:, None] * prev_dt
                new_dt[rows, r, li + q + 1] += (us - t1) * inv * inv * prev
                new_dt[rows, r, li + 1] += (tq1 - us) * inv * inv * prev
        N, dN_du, dN_dt = new, new_du, new_dt
    return N, first, dN_du, dN_dt


@dataclass
class PinnBatchResult:
    control_points: np.ndarray
    curve_points: np.ndarray
    loss: float
    grad_params: np.ndarray
    grad_knots: np.ndarray
    argmax: int
    flagged: bool = False
    empty_span_count: int = 0


def differentiable_fit(points, params, interior_knots, p, regularize=None):
    """Solve the normal equations and differentiate the max-distance loss.

    The max is non-smooth; the gradient is the subgradient at the first
    (lowest-index) point attaining it.  A ridge term is added when the normal
    matrix is near singular; its weight is held constant in the backward pass.
    """
    D = np.asarray(points, dtype=float)
    u = np.asarray(params, dtype=float)
    interior = np.asarray(interior_knots, dtype=float)
    t = validate_knots(clamped_knots(interior, p), p)
    n_ctrl = t.size - p - 1
    m = u.size
    if D.shape != (m, 3):
        raise DegenerateFitError(f"points shape {D.shape} does not match {m} params")
    if n_ctrl > m:
        raise DegenerateFitError(f"{n_ctrl} control points for only {m} points")

    vals, first, d_du, d_dt = basis_with_derivatives(t, p, u)
    cols = first[:, None] + np.arange(p + 1)
    N = np.zeros((m, n_ctrl))
    N[np.arange(m)[:, None], cols] = vals
    A = N.T @ N
    empty = check_schoenberg_whitney(u, t, p)
    if regularize is None:
        with np.errstate(divide="ignore"):
            flagged = bool(np.any(np.diag(A) <= 0) or not 1.0 / np.linalg.cond(A) >= RCOND_LIMIT)
    else:
        flagged = bool(regularize)
    if flagged:
        A = A + RIDGE_SCALE * max(np.trace(A), 1e-300) / n_ctrl * np.eye(n_ctrl)
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFitError(f"normal matrix not positive definite: {exc}") from exc

    def solve(rhs):
        y = np.linalg.solve(chol, rhs)
        return np.linalg.solve(chol.T, y)

    P = solve(N.T @ D)
    C = N @ P
    R = D - C
    dist = np.linalg.norm(R, axis=1)
    if not np.all(np.isfinite(dist)):
        raise DegenerateFitError("non-finite fit residuals")
    # near-equal maxima count as ties; the lowest index wins
    j = int(np.flatnonzero(dist >= dist.max() * (1 - TIE_RTOL))[0])
    loss = float(dist[j])

    G = np.zeros((m, 3))
    if loss > ZERO_LOSS * (1.0 + np.abs(D).max()):
        G[j] = -R[j] / loss  # d||C_j - D_j|| / dC_j
    # else: exact fit, a minimum of the loss; 0 is a valid subgradient there
    W = solve(N.T @ G)
    dL_dN = G @ P.T + R @ W.T - N @ (W @ P.T)

    local = np.take_along_axis(dL_dN, cols, axis=1)  # (m, p+1)
    grad_u = np.einsum("mk,mk->m", local, d_du)
    grad_t = np.zeros(t.size)
    np.add.at(grad_t, first[:, None] + np.arange(2 * p + 2), np.einsum("mk,mkj->mj", local, d_dt))
    grad_int = grad_t[p + 1: p + 1 + interior.size]
    return PinnBatchResult(P, C, loss, grad_u, grad_int, j, bool(flagged), int(empty))


class PinnLoss(torch.autograd.Function):
    """Torch wrapper: ``loss = PinnLoss.apply(params, interior_knots, points, degree)``."""

    @staticmethod
    def forward(ctx, params, knots, points, degree):
        res = differentiable_fit(points, params.detach().double().numpy(), knots.detach().double().numpy(), degree)
        ctx.save_for_backward(
            torch.as_tensor(res.grad_params, dtype=params.dtype),
            torch.as_tensor(res.grad_knots, dtype=knots.dtype),
        )
        ctx.result = res
        return params.new_tensor(res.loss)

    @staticmethod
    def backward(ctx, grad_out):
        gu, gt = ctx.saved_tensors
        return grad_out * gu, grad_out * gt, None, None


def pinn_loss(params, interior_knots, points, degree):
    """Differentiable max-distance loss for one instance (torch tensors in, scalar out)."""
    return PinnLoss.apply(params, interior_knots, points, degree)


@dataclass
class FinetuneConfig:
    epochs: int = 1
    lr: float = 1e-5
    batch_size: int = 32
    freeze_encoder: bool = False
    seed: int = 0
    max_knots: int | None = None


@dataclass
class FinetuneReport:
    initial_loss: float
    epoch_losses: list = field(default_factory=list)  # mean loss over the shard after each epoch
    train_losses: list = field(default_factory=list)  # mean of the batch losses seen while stepping
    skipped: int = 0

    def to_dict(self):
        return {
            "initial_loss": self.initial_loss,
            "epoch_losses": list(self.epoch_losses),
            "train_losses": list(self.train_losses),
            "skipped": self.skipped,
        }


def _prepare_knots(kvals, p, m):
    # sort, keep strictly inside (0, 1), and thin out to at most m - p - 1 knots
    k = torch.sort(kvals).values.clamp(KNOT_EPS, 1 - KNOT_EPS)
    max_int = m - p - 1
    if k.numel() > max_int:
        keep = np.round(np.linspace(0, k.numel() - 1, max(max_int, 0))).astype(int) if max_int > 0 else []
        k = k[torch.as_tensor(keep, dtype=torch.long)]
    return k


def _point_batch(points_list, dtype):
    M = max(len(p) for p in points_list)
    pts = torch.zeros(len(points_list), M, 3, dtype=dtype)
    pmask = torch.zeros(len(points_list), M, dtype=torch.bool)
    for b, p in enumerate(points_list):
        pts[b, : len(p)] = torch.as_tensor(np.asarray(p), dtype=dtype)
        pmask[b, : len(p)] = True
    return pts, pmask


def generated_values(model, points_list, max_knots=None):
    """Generated knot and parameter values that carry gradients to the model weights.

    Generation itself (including every argmax) runs without gradients.  The
    decoders are then re-run teacher-forced on the generated tokens, which
    reproduces the generated values as differentiable functions of the
    weights.  Returns one ``(knot values, per-point params)`` pair per input.
    """
    dtype = next(model.parameters()).dtype
    pts, pmask = _point_batch(points_list, dtype)
    with torch.no_grad():
        e_knot, e_param = model.encode(pts, pmask)
        knots, _ = model.generate_knots(e_knot, pmask, max_knots)
        kv = kmask = None
        if model.cfg.cross_attention:
            _, kv, kmask = model.knot_cache(knots, e_knot, pmask)
        idx, gen_vals = model.generate_params(e_param, model.aux_encode(pts, pmask), pmask, kv, kmask)

    e_knot, e_param = model.encode(pts, pmask)
    knot_pred, kv, kmask = model.knot_cache(knots, e_knot, pmask)
    if not model.cfg.cross_attention:
        kv = kmask = None
    smask = idx >= 0
    tokens, prev = model._param_inputs(idx.clamp_min(0), gen_vals, smask)
    vals = model.param_values(model.param_decode(tokens, prev, smask, e_param, pmask, kv, kmask))
    out = []
    for b, p in enumerate(points_list):
        m = len(p)
        kvals = knot_pred[b, : len(knots[b]), 0]
        params = torch.zeros(m, dtype=dtype).index_put((idx[b, :m],), vals[b, :m])
        out.append((kvals, params))
    return out


def _batch_loss(model, records, max_knots):
    """Mean PINN loss over a list of records; instances that cannot be fitted are skipped."""
    points_list = [np.asarray(r.samples, dtype=float) for r in records]
    p = model.cfg.degree
    losses, skipped = [], 0
    for pts, (kvals, params) in zip(points_list, generated_values(model, points_list, max_knots)):
        knots = _prepare_knots(kvals, p, len(pts))
        try:
            losses.append(pinn_loss(params.clamp(0.0, 1.0), knots, pts, p))
        except (DegenerateFitError, KnotVectorError) as exc:
            log.warning("skipping instance: %s", exc)
            skipped += 1
    if not losses:
        return None, skipped
    return torch.stack(losses).mean(), skipped


def mean_pinn_loss(model, records, batch_size=32, max_knots=None):
    """Mean max-distance loss of the model's own fits over ``records``."""
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for s in range(0, len(records), batch_size):
            chunk = records[s: s + batch_size]
            loss, skipped = _batch_loss(model, chunk, max_knots)
            if loss is not None:
                k = len(chunk) - skipped
                total += loss.item() * k
                n += k
    return total / n if n else math.nan


def _encoder_parameters(model):
    names = ("point_proj", "encoder", "enc_norm", "enc_out", "knot_point_proj", "param_point_proj", "mask_token")
    return [p for name, p in model.named_parameters() if name.split(".")[0] in names]


def pinn_finetune(model, records, cfg=None, checkpoint=None):
    """Fine-tune ``model`` end to end through the differentiable fitting layer.

    Gradients reach the model through the generated knot and parameter
    values only.  On a non-finite loss the weights of the last finite epoch
    are restored (and written to ``checkpoint`` if given) before
    :class:`DivergenceError` is raised.
    """
    cfg = cfg or FinetuneConfig()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    frozen = {id(p) for p in _encoder_parameters(model)} if cfg.freeze_encoder else set()
    params = [p for p in model.parameters() if id(p) not in frozen]
    opt = snn.Adam(params, lr=cfg.lr)
    report = FinetuneReport(mean_pinn_loss(model, records, cfg.batch_size, cfg.max_knots))
    if not math.isfinite(report.initial_loss):
        raise DivergenceError("initial PINN loss is not finite")
    last_good = copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        model.train()
        seen, total = 0, 0.0
        perm = rng.permutation(len(records))
        for s in range(0, len(perm), cfg.batch_size):
            chunk = [records[i] for i in perm[s: s + cfg.batch_size]]
            loss, skipped = _batch_loss(model, chunk, cfg.max_knots)
            report.skipped += skipped
            if loss is None:
                continue
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                if checkpoint:
                    model.save(checkpoint)
                raise DivergenceError(f"non-finite PINN loss in fine-tune epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * (len(chunk) - skipped)
            seen += len(chunk) - skipped
        report.train_losses.append(total / seen if seen else math.nan)
        after = mean_pinn_loss(model, records, cfg.batch_size, cfg.max_knots)
        if not math.isfinite(after):
            model.load_state_dict(last_good)
            if checkpoint:
                model.save(checkpoint)
            raise DivergenceError(f"non-finite PINN loss after fine-tune epoch {epoch + 1}")
        report.epoch_losses.append(after)
        last_good = copy.deepcopy(model.state_dict())
        if checkpoint:
            model.save(checkpoint, {"finetune": report.to_dict()})
        log.info("fine-tune epoch %d: loss %.4g -> %.4g", epoch + 1, report.initial_loss, after)
    return report
