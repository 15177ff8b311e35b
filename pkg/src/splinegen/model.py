"""Sequence-to-sequence model mapping unorganized points to knots and parameters.

A permutation-equivariant transformer encoder turns the points into
embeddings.  Two decoders read them: a knot decoder that emits interior knot
tokens autoregressively until an end token, and a pointer-style parameter
decoder that emits one (point index, parameter value) pair per input point.
The parameter decoder attends to the knot decoder's cached last-layer keys and
values at every layer (internal cross-attention).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import nn as snn
from .kernel import clamped_knots, least_squares_fit

log = logging.getLogger(__name__)

SOS = (0.0, 1.0, 0.0)
EOS = (0.0, 0.0, 1.0)
KNOT_EPS = 1e-4


class CapacityError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_emb: int = 64
    d_attn: int = 64
    n_heads: int = 4
    n_layers: int = 2
    degree: int = 3
    max_points: int = 256
    max_knots: int = 32
    cross_attention: bool = True
    shared_encoder: bool = True

    def __post_init__(self):
        snn.AttentionConfig(self.d_emb, self.d_attn, self.n_heads, self.n_layers)


@dataclass
class TrainConfig:
    embed_mask_ratio: float = 0.15
    removal_ratio: float = 0.10
    w_knot: float = 1.0
    w_param: float = 1.0
    teacher_forcing: bool = True
    epochs: int = 30
    pretrain_epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    masking: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("embed_mask_ratio", "removal_ratio"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.w_knot <= 0 or self.w_param <= 0:
            raise ValueError("loss weights must be positive")


@dataclass
class Example:
    """One training instance: points in input order, the parameter of each point, interior knots."""

    points: np.ndarray
    params: np.ndarray
    knots: np.ndarray

    @classmethod
    def from_record(cls, rec):
        return cls(rec.samples, rec.sample_params, rec.curve.interior_knots.copy())

    @property
    def order(self):
        """Point indices in curve order (ascending parameter, stable)."""
        return np.argsort(self.params, kind="stable")


def mask_input_points(example, ratio, seed):
    """Drop ``floor(ratio * m)`` random points; knots and surviving parameters are unchanged."""
    m = example.points.shape[0]
    k = int(math.floor(ratio * m))
    if k == 0:
        return example
    drop = np.random.default_rng(seed).choice(m, size=k, replace=False)
    keep = np.setdiff1d(np.arange(m), drop)
    return Example(example.points[keep], example.params[keep], example.knots)


def mask_embeddings(embeddings, ratio, seed, mask_vector=None, valid=None):
    """Replace ``floor(ratio * m)`` rows by ``mask_vector``.

    Works on a single (m, d) matrix. Returns ``(masked, masked_indices)``.
    """
    m = embeddings.shape[0] if valid is None else int(valid.sum())
    k = int(math.floor(ratio * m))
    if k == 0:
        return embeddings, np.array([], dtype=int)
    rng = np.random.default_rng(seed)
    candidates = np.arange(embeddings.shape[0]) if valid is None else np.flatnonzero(np.asarray(valid))
    idx = np.sort(rng.choice(candidates, size=k, replace=False))
    if mask_vector is None:
        mask_vector = torch.zeros(embeddings.shape[-1], dtype=embeddings.dtype)
    sel = torch.zeros(embeddings.shape[0], dtype=torch.bool)
    sel[torch.as_tensor(idx)] = True
    return torch.where(sel[:, None], mask_vector.expand_as(embeddings), embeddings), idx


# -- batching ---------------------------------------------------------------

@dataclass
class Batch:
    points: torch.Tensor  # (B, M, 3)
    pmask: torch.Tensor  # (B, M) valid points
    knot_in: torch.Tensor  # (B, L, 3)
    knot_tgt: torch.Tensor  # (B, L, 3)
    kmask: torch.Tensor  # (B, L)
    order: torch.Tensor  # (B, M) pointer targets
    values: torch.Tensor  # (B, M) parameter targets in emission order
    smask: torch.Tensor  # (B, M) valid steps
    sizes: list = field(default_factory=list)


def knot_tokens(knots):
    """Decoder input tokens ``[SOS, k_0..]`` and targets ``[k_0.., EOS]``."""
    k = np.sort(np.asarray(knots, dtype=float))
    vals = np.stack([k, np.zeros_like(k), np.zeros_like(k)], axis=1).reshape(-1, 3)
    inputs = np.vstack([SOS, vals])
    targets = np.vstack([vals, EOS])
    return inputs, targets


def collate(examples, dtype=torch.float32):
    B = len(examples)
    M = max(e.points.shape[0] for e in examples)
    L = max(len(e.knots) for e in examples) + 1
    points = np.zeros((B, M, 3))
    pmask = np.zeros((B, M), dtype=bool)
    knot_in = np.zeros((B, L, 3))
    knot_tgt = np.zeros((B, L, 3))
    kmask = np.zeros((B, L), dtype=bool)
    order = np.zeros((B, M), dtype=np.int64)
    values = np.zeros((B, M))
    for b, e in enumerate(examples):
        m = e.points.shape[0]
        points[b, :m] = e.points
        pmask[b, :m] = True
        ki, kt = knot_tokens(e.knots)
        knot_in[b, : len(ki)] = ki
        knot_tgt[b, : len(kt)] = kt
        kmask[b, : len(ki)] = True
        o = e.order
        order[b, :m] = o
        values[b, :m] = e.params[o]
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    return Batch(t(points), torch.as_tensor(pmask), t(knot_in), t(knot_tgt), torch.as_tensor(kmask),
                 torch.as_tensor(order), t(values), torch.as_tensor(pmask.copy()),
                 [e.points.shape[0] for e in examples])


def pointer_allowed(order, pmask, smask):
    """allowed[b, t, j]: point j is valid and not yet emitted before step t."""
    B, M = order.shape
    rank = torch.full((B, M), M, dtype=torch.long)
    steps = torch.arange(M).expand(B, M)
    rank = rank.scatter(1, torch.where(smask, order, torch.zeros_like(order)), torch.where(smask, steps, rank))
    t = torch.arange(M)[None, :, None]
    return (rank[:, None, :] >= t) & pmask[:, None, :]


# -- model --------------------------------------------------------------------

class InternalCrossAttention(nn.Module):
    """Queries from the parameter decoder attend to the knot decoder's cached keys/values."""

    def __init__(self, cfg):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.w_q = snn.Linear(cfg.d_emb, cfg.d_attn, bias=False)
        self.w_o = snn.Linear(cfg.d_attn, cfg.d_emb, bias=False)

    def forward(self, x, kv, key_mask=None):
        if kv is None:
            raise RuntimeError("internal cross-attention needs the knot decoder key/value cache")
        k, v = kv
        q = snn.split_heads(self.w_q(x), self.n_heads)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        out, _ = snn.attention(q, k, v, mask)
        return x + self.w_o(snn.merge_heads(out))


class SplineGen(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        d = cfg.d_emb
        acfg = snn.AttentionConfig(cfg.d_emb, cfg.d_attn, cfg.n_heads, cfg.n_layers)
        if cfg.shared_encoder:
            self.point_proj = snn.Linear(snn.D_PE, d)
            self.encoder = nn.ModuleList(snn.EncoderLayer(acfg) for _ in range(cfg.n_layers))
            self.enc_norm = snn.LayerNorm(d)
            self.enc_out = snn.Linear(d, d)
        else:
            self.knot_point_proj = snn.Linear(snn.D_PE, d)
            self.param_point_proj = snn.Linear(snn.D_PE, d)
        self.mask_token = nn.Parameter(0.02 * torch.randn(d))

        self.knot_in = snn.Linear(3, d)
        self.knot_layers = nn.ModuleList(snn.DecoderLayer(acfg) for _ in range(cfg.n_layers))
        self.knot_norm = snn.LayerNorm(d)
        self.knot_out = snn.Linear(d, 3)

        self.aux_proj = snn.Linear(snn.D_PE, d)
        self.aux_layer = snn.EncoderLayer(acfg)

        self.param_in = snn.Linear(2, d)
        self.param_layers = nn.ModuleList(snn.DecoderLayer(acfg) for _ in range(cfg.n_layers))
        if cfg.cross_attention:
            self.ica = nn.ModuleList(InternalCrossAttention(acfg) for _ in range(cfg.n_layers))
        self.param_norm = snn.LayerNorm(d)
        self.ptr_q = snn.Linear(d, d, bias=False)
        self.ptr_k = snn.Linear(d, d, bias=False)
        self.value_hidden = snn.Linear(d, d)
        self.value_out = snn.Linear(d, 1)

    # -- encoder ---------------------------------------------------------
    def encode(self, points, pmask=None):
        """Point embeddings for the knot path and the parameter path (the same tensor when shared)."""
        if points.shape[-2] > self.cfg.max_points:
            raise CapacityError(f"{points.shape[-2]} points exceeds max_points={self.cfg.max_points}")
        gamma = snn.coord_encode(points)
        if not self.cfg.shared_encoder:
            return self.knot_point_proj(gamma), self.param_point_proj(gamma)
        h = self.point_proj(gamma)
        for layer in self.encoder:
            h = layer(h, pmask)
        e = self.enc_out(self.enc_norm(h))
        return e, e

    def apply_embedding_mask(self, emb, pmask, ratio, rng):
        """Batched embedding masking; returns (masked embeddings, masked (B, M) bool)."""
        B, M, _ = emb.shape
        masked = torch.zeros(B, M, dtype=torch.bool)
        for b in range(B):
            m = int(pmask[b].sum())
            k = int(math.floor(ratio * m))
            if k:
                masked[b, torch.as_tensor(rng.choice(m, size=k, replace=False))] = True
        return torch.where(masked[..., None], self.mask_token.to(emb.dtype).expand_as(emb), emb), masked

    def aux_encode(self, points, pmask=None):
        return self.aux_layer(self.aux_proj(snn.coord_encode(points)), pmask)

    # -- decoders --------------------------------------------------------
    def knot_decode(self, tokens, kmask, memory, pmask):
        """Returns (per-position next-token predictions (B, L, 3), last-layer self-attention K/V)."""
        L = tokens.shape[1]
        x = self.knot_in(tokens) + snn.sequence_encoding(L, self.cfg.d_emb, tokens.dtype)
        self_mask = snn.causal_mask(L, kmask)
        mem_mask = None if pmask is None else pmask[:, None, None, :]
        kv = None
        for i, layer in enumerate(self.knot_layers):
            if i == len(self.knot_layers) - 1:
                x, kv = layer(x, memory, self_mask, mem_mask, return_kv=True)
            else:
                x = layer(x, memory, self_mask, mem_mask)
        return torch.sigmoid(self.knot_out(self.knot_norm(x))), kv

    def param_decode(self, tokens, prev_idx, smask, memory, pmask, kv=None, kmask=None):
        """Decoder output embeddings (B, T, d) for parameter steps."""
        T = tokens.shape[1]
        gathered = memory.gather(1, prev_idx.clamp_min(0)[..., None].expand(-1, -1, memory.shape[-1]))
        gathered = gathered * (prev_idx >= 0)[..., None].to(memory.dtype)
        x = self.param_in(tokens) + gathered + snn.sequence_encoding(T, self.cfg.d_emb, tokens.dtype)
        self_mask = snn.causal_mask(T, smask)
        mem_mask = None if pmask is None else pmask[:, None, None, :]
        for i, layer in enumerate(self.param_layers):
            if self.cfg.cross_attention:
                x = self.ica[i](x, kv, kmask)
            x = layer(x, memory, self_mask, mem_mask)
        return self.param_norm(x)

    def pointer_logits(self, e_t, p_enc):
        return self.ptr_q(e_t) @ self.ptr_k(p_enc).transpose(-1, -2)

    def param_values(self, e_t):
        return torch.sigmoid(self.value_out(torch.relu(self.value_hidden(e_t)))).squeeze(-1)

    # -- training forward ------------------------------------------------
    def forward(self, batch, cfg=None, rng=None, masking=False):
        """Teacher-forced losses for a batch; returns a dict of scalar tensors."""
        cfg = cfg or TrainConfig()
        e_knot, e_param = self.encode(batch.points, batch.pmask)
        B, M = batch.pmask.shape
        emb_masked = torch.zeros(B, M, dtype=torch.bool)
        if masking and cfg.embed_mask_ratio > 0:
            rng = rng if rng is not None else np.random.default_rng(cfg.seed)
            if self.cfg.shared_encoder:
                e_knot, emb_masked = self.apply_embedding_mask(e_knot, batch.pmask, cfg.embed_mask_ratio, rng)
                e_param = e_knot
            else:
                e_knot, emb_masked = self.apply_embedding_mask(e_knot, batch.pmask, cfg.embed_mask_ratio, rng)
                e_param = torch.where(emb_masked[..., None], self.mask_token.to(e_param.dtype).expand_as(e_param), e_param)

        knot_in = batch.knot_in
        values_in = batch.values
        if not cfg.teacher_forcing:
            knot_in, values_in = self._self_conditioned_inputs(batch, e_knot, e_param)

        knot_pred, kv = self.knot_decode(knot_in, batch.kmask, e_knot, batch.pmask)
        loss_k = snn.mse_loss(knot_pred, batch.knot_tgt, batch.kmask[..., None])

        p_enc = self.aux_encode(batch.points, batch.pmask)
        tokens, prev_idx = self._param_inputs(batch.order, values_in, batch.smask)
        e_t = self.param_decode(tokens, prev_idx, batch.smask, e_param, batch.pmask, kv, batch.kmask)
        logits = self.pointer_logits(e_t, p_enc)
        allowed = pointer_allowed(batch.order, batch.pmask, batch.smask)
        loss_o = snn.cross_entropy_loss(logits, batch.order, allowed, batch.smask)
        target_masked = emb_masked.gather(1, batch.order)
        values = self.param_values(e_t)
        loss_p = snn.mse_loss(values, batch.values, batch.smask & ~target_masked)
        total = cfg.w_knot * loss_k + cfg.w_param * (loss_p + loss_o)
        return {"total": total, "knot": loss_k, "param": loss_p, "ordering": loss_o}

    @staticmethod
    def _param_inputs(order, values, smask):
        B, T = order.shape
        tokens = torch.zeros(B, T, 2, dtype=values.dtype)
        tokens[:, 0, 1] = 1.0
        tokens[:, 1:, 0] = values[:, :-1]
        prev = torch.full((B, T), -1, dtype=torch.long)
        prev[:, 1:] = order[:, :-1]
        prev = torch.where(smask, prev, torch.full_like(prev, -1))
        return tokens, prev

    @torch.no_grad()
    def _self_conditioned_inputs(self, batch, e_knot, e_param):
        # feed the model's own previous-step predictions instead of ground truth
        knot_pred, kv = self.knot_decode(batch.knot_in, batch.kmask, e_knot, batch.pmask)
        knot_in = batch.knot_in.clone()
        knot_in[:, 1:, 0] = knot_pred[:, :-1, 0] * batch.knot_in[:, 1:, 0].ne(0).to(knot_in.dtype)
        tokens, prev = self._param_inputs(batch.order, batch.values, batch.smask)
        e_t = self.param_decode(tokens, prev, batch.smask, e_param, batch.pmask, kv, batch.kmask)
        return knot_in, self.param_values(e_t)

    # -- generation ------------------------------------------------------
    @torch.no_grad()
    def generate_knots(self, memory, pmask, max_len=None):
        """Greedy autoregressive knot generation.

        Returns ``(knot lists, truncated flags)``; stops per row when the EOS
        channel exceeds 0.5.
        """
        max_len = self.cfg.max_knots if max_len is None else max_len
        B = memory.shape[0]
        knots = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len + 1):
            tokens, kmask = _knot_prefix(knots, memory.dtype)
            pred, _ = self.knot_decode(tokens, kmask, memory, pmask)
            lengths = kmask.sum(1) - 1
            last = pred[torch.arange(B), lengths]
            for b in range(B):
                if done[b]:
                    continue
                if last[b, 2] > 0.5:
                    done[b] = True
                elif len(knots[b]) >= max_len:
                    continue
                else:
                    knots[b].append(float(last[b, 0].clamp(0.0, 1.0)))
            if done.all() or all(done[b] or len(knots[b]) >= max_len for b in range(B)):
                break
        return [np.asarray(k) for k in knots], ~done

    def knot_cache(self, knots, memory, pmask):
        """Run the knot decoder over complete sequences; returns (predictions, kv, kmask)."""
        tokens, kmask = _knot_prefix(knots, memory.dtype)
        pred, kv = self.knot_decode(tokens, kmask, memory, pmask)
        return pred, kv, kmask

    @torch.no_grad()
    def generate_params(self, memory, p_enc, pmask, kv=None, kmask=None, return_probs=False):
        """Pointer decoding: exactly one step per input point.

        Returns ``(indices (B, M), values (B, M))`` in emission order; padded
        steps hold index -1.  With ``return_probs`` the per-step index
        distributions (B, M, M) are returned as well.
        """
        B, M = pmask.shape
        sizes = pmask.sum(1)
        idx = torch.full((B, M), -1, dtype=torch.long)
        vals = torch.zeros(B, M, dtype=memory.dtype)
        visited = torch.zeros(B, M, dtype=torch.bool)
        probs = torch.zeros(B, M, M, dtype=memory.dtype) if return_probs else None
        for t in range(M):
            active = sizes > t
            order = idx[:, : t + 1].clamp_min(0)
            smask = torch.zeros(B, t + 1, dtype=torch.bool)
            smask[:, : t + 1] = (torch.arange(t + 1)[None] < sizes[:, None])
            tokens, prev = self._param_inputs(order, vals[:, : t + 1], smask)
            e_t = self.param_decode(tokens, prev, smask, memory, pmask, kv, kmask)[:, -1]
            logits = self.pointer_logits(e_t[:, None], p_enc)[:, 0]
            allowed = pmask & ~visited
            p = snn.softmax(logits, allowed)
            if return_probs:
                probs[:, t] = p
            choice = torch.where(allowed, logits, torch.full_like(logits, -math.inf)).argmax(-1)
            value = self.param_values(e_t)
            idx[:, t] = torch.where(active, choice, idx[:, t])
            vals[:, t] = torch.where(active, value, vals[:, t])
            visited[torch.arange(B)[active], choice[active]] = True
        return (idx, vals, probs) if return_probs else (idx, vals)

    @torch.no_grad()
    def infer(self, point_sets, max_len=None):
        """Knots and parameters for a list of (m, 3) point arrays.

        Each result holds sorted interior ``knots``, per-point ``params`` in
        input order, the emitted ``indices`` and a ``truncated`` flag.
        """
        self.eval()
        dtype = next(self.parameters()).dtype
        M = max(len(p) for p in point_sets)
        pts = torch.zeros(len(point_sets), M, 3, dtype=dtype)
        pmask = torch.zeros(len(point_sets), M, dtype=torch.bool)
        for b, p in enumerate(point_sets):
            pts[b, : len(p)] = torch.as_tensor(np.asarray(p), dtype=dtype)
            pmask[b, : len(p)] = True
        e_knot, e_param = self.encode(pts, pmask)
        knots, truncated = self.generate_knots(e_knot, pmask, max_len)
        kv, kmask = None, None
        if self.cfg.cross_attention:
            _, kv, kmask = self.knot_cache(knots, e_knot, pmask)
        p_enc = self.aux_encode(pts, pmask)
        idx, vals = self.generate_params(e_param, p_enc, pmask, kv, kmask)
        out = []
        for b, p in enumerate(point_sets):
            m = len(p)
            order = idx[b, :m].numpy()
            params = np.empty(m)
            params[order] = vals[b, :m].double().numpy()
            out.append({
                "knots": np.sort(knots[b]),
                "params": params,
                "indices": order,
                "truncated": bool(truncated[b]),
            })
        return out

    # -- persistence -----------------------------------------------------
    def save(self, path, extra=None):
        meta = {"model_config": asdict(self.cfg)}
        meta.update(extra or {})
        snn.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path):
        tensors, meta = snn.load_checkpoint(path)
        model = cls(ModelConfig(**meta["model_config"]))
        # training checkpoints also carry optimizer moments
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim.")})
        return model, meta


def _knot_prefix(knots, dtype):
    B = len(knots)
    L = max(len(k) for k in knots) + 1
    tokens = torch.zeros(B, L, 3, dtype=dtype)
    kmask = torch.zeros(B, L, dtype=torch.bool)
    for b, k in enumerate(knots):
        ti = knot_tokens(k)[0] if len(k) else np.array([SOS])
        tokens[b, : len(ti)] = torch.as_tensor(ti, dtype=dtype)
        kmask[b, : len(ti)] = True
    return tokens, kmask


def sanitize_knots(knots, p, n_points):
    """Sorted interior knots clipped into (0, 1), multiplicity <= p, and few enough for the point count."""
    k = np.clip(np.sort(np.asarray(knots, dtype=float)), KNOT_EPS, 1 - KNOT_EPS)
    vals, counts = np.unique(k, return_counts=True)
    k = np.repeat(vals, np.minimum(counts, p))
    max_int = n_points - p - 1
    if k.size > max_int:
        k = k[np.round(np.linspace(0, k.size - 1, max(max_int, 0))).astype(int)] if max_int > 0 else k[:0]
    return k


def fit_with_model(model, points, max_len=None):
    """Infer knots/params for one point set and fit by least squares.

    Returns ``(curve, inference dict, FitReport)``.
    """
    res = model.infer([points], max_len)[0]
    p = model.cfg.degree
    interior = sanitize_knots(res["knots"], p, len(points))
    curve, report = least_squares_fit(points, np.clip(res["params"], 0, 1), clamped_knots(interior, p), p)
    return curve, res, report


# -- training loops ------------------------------------------------------------

class PretrainHeads(nn.Module):
    """Throwaway decoders used to pretrain the shared encoder.

    One decoder regresses the sorted knot sequence, the other the sorted
    parameter sequence, both from the (masked) point embeddings.
    """

    def __init__(self, cfg):
        super().__init__()
        acfg = snn.AttentionConfig(cfg.d_emb, cfg.d_attn, cfg.n_heads, cfg.n_layers)
        d = cfg.d_emb
        self.cfg = cfg
        self.knot_in = snn.Linear(3, d)
        self.knot_layers = nn.ModuleList(snn.DecoderLayer(acfg) for _ in range(cfg.n_layers))
        self.knot_out = snn.Linear(d, 3)
        self.param_in = snn.Linear(2, d)
        self.param_layers = nn.ModuleList(snn.DecoderLayer(acfg) for _ in range(cfg.n_layers))
        self.param_out = snn.Linear(d, 1)

    def _run(self, layers, x, mask, memory, pmask):
        self_mask = snn.causal_mask(x.shape[1], mask)
        for layer in layers:
            x = layer(x, memory, self_mask, pmask[:, None, None, :])
        return x

    def forward(self, batch, e_knot, e_param):
        d = self.cfg.d_emb
        L = batch.knot_in.shape[1]
        x = self.knot_in(batch.knot_in) + snn.sequence_encoding(L, d, e_knot.dtype)
        pred = torch.sigmoid(self.knot_out(self._run(self.knot_layers, x, batch.kmask, e_knot, batch.pmask)))
        loss_k = snn.mse_loss(pred, batch.knot_tgt, batch.kmask[..., None])
        tokens, _ = SplineGen._param_inputs(batch.order, batch.values, batch.smask)
        T = tokens.shape[1]
        x = self.param_in(tokens) + snn.sequence_encoding(T, d, e_param.dtype)
        vals = torch.sigmoid(self.param_out(self._run(self.param_layers, x, batch.smask, e_param, batch.pmask))).squeeze(-1)
        loss_p = snn.mse_loss(vals, batch.values, batch.smask)
        return loss_k, loss_p


def _batches(examples, batch_size, rng, shuffle=True, pool=8):
    """Mini-batches; when shuffling, similar point counts are grouped to cut padding."""
    if not shuffle:
        for s in range(0, len(examples), batch_size):
            yield examples[s: s + batch_size]
        return
    idx = rng.permutation(len(examples))
    sizes = np.array([examples[i].points.shape[0] for i in idx])
    chunks = []
    for s in range(0, len(idx), batch_size * pool):
        block = idx[s: s + batch_size * pool]
        block = block[np.argsort(sizes[s: s + batch_size * pool], kind="stable")]
        chunks.extend(block[k: k + batch_size] for k in range(0, len(block), batch_size))
    for c in rng.permutation(len(chunks)):
        yield [examples[i] for i in chunks[c]]


def _check_finite(losses, where):
    for k, v in losses.items():
        if not torch.isfinite(v):
            raise DivergenceError(f"non-finite {k} loss ({float(v)}) during {where}")


def pretrain_epoch(model, heads, examples, cfg, opt, rng):
    model.train()
    tot = {"knot": 0.0, "param": 0.0}
    n = 0
    for chunk in _batches(examples, cfg.batch_size, rng):
        if cfg.masking:
            chunk = [mask_input_points(e, cfg.removal_ratio, rng.integers(2**32)) for e in chunk]
        batch = collate(chunk)
        e_knot, e_param = model.encode(batch.points, batch.pmask)
        if cfg.masking:
            e_knot, masked = model.apply_embedding_mask(e_knot, batch.pmask, cfg.embed_mask_ratio, rng)
            e_param = e_knot if model.cfg.shared_encoder else e_param
        loss_k, loss_p = heads(batch, e_knot, e_param)
        loss = cfg.w_knot * loss_k + cfg.w_param * loss_p
        _check_finite({"pretrain": loss}, "pretraining")
        opt.zero_grad()
        loss.backward()
        opt.step()
        tot["knot"] += loss_k.item() * len(chunk)
        tot["param"] += loss_p.item() * len(chunk)
        n += len(chunk)
    return {k: v / n for k, v in tot.items()}


def train_epoch(model, examples, cfg, opt, rng):
    """One pass over ``examples``; returns example-weighted mean losses."""
    model.train()
    sums = {"total": 0.0, "knot": 0.0, "param": 0.0, "ordering": 0.0}
    n = 0
    for chunk in _batches(examples, cfg.batch_size, rng):
        if cfg.masking and cfg.removal_ratio > 0:
            chunk = [mask_input_points(e, cfg.removal_ratio, rng.integers(2**32)) for e in chunk]
        losses = model(collate(chunk), cfg, rng, masking=cfg.masking)
        _check_finite(losses, "training")
        opt.zero_grad()
        losses["total"].backward()
        opt.step()
        for k in sums:
            sums[k] += losses[k].item() * len(chunk)
        n += len(chunk)
    return {k: v / n for k, v in sums.items()}


@torch.no_grad()
def evaluate(model, examples, cfg, batch_size=64):
    model.eval()
    sums = {"total": 0.0, "knot": 0.0, "param": 0.0, "ordering": 0.0}
    n = 0
    eval_cfg = TrainConfig(**{**asdict(cfg), "teacher_forcing": True})
    for chunk in _batches(examples, batch_size, None, shuffle=False):
        losses = model(collate(chunk), eval_cfg, masking=False)
        for k in sums:
            sums[k] += losses[k].item() * len(chunk)
        n += len(chunk)
    return {k: v / n for k, v in sums.items()}


def train(model, train_set, val_set, cfg, on_epoch=None, start_epoch=0, opt=None):
    """Pretrain the encoder, then train both decoders.

    Returns a history list with one dict per epoch.  Epoch 0 is the
    validation loss of the untrained model, measured before pretraining.
    """
    rng = np.random.default_rng([cfg.seed, start_epoch])
    torch.manual_seed(cfg.seed + start_epoch)
    history = []
    if start_epoch == 0:
        val = evaluate(model, val_set, cfg)
        row = {"epoch": 0, **{f"train_{k}": float("nan") for k in val}, **{f"val_{k}": v for k, v in val.items()}}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        if cfg.pretrain_epochs:
            heads = PretrainHeads(model.cfg)
            pre_opt = snn.Adam(list(model.parameters()) + list(heads.parameters()), lr=cfg.lr)
            for _ in range(cfg.pretrain_epochs):
                pre = pretrain_epoch(model, heads, train_set, cfg, pre_opt, rng)
                log.info("pretrain: knot %.4g param %.4g", pre["knot"], pre["param"])
    opt = opt or snn.Adam(model.parameters(), lr=cfg.lr)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        tr = train_epoch(model, train_set, cfg, opt, rng)
        val = evaluate(model, val_set, cfg)
        row = {"epoch": epoch, **{f"train_{k}": v for k, v in tr.items()}, **{f"val_{k}": v for k, v in val.items()}}
        history.append(row)
        log.info("epoch %d: train %.4g val %.4g", epoch, tr["total"], val["total"])
        if on_epoch:
            on_epoch(row)
    return history
