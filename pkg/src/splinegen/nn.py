"""Differentiable building blocks for the sequence model.

Gradients come from torch's reverse-mode engine; every layer here is written
out from tensor primitives (no ``torch.nn`` layers or ``torch.optim``), so the
attention internals such as projected keys and values stay accessible.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

CKPT_MAGIC = b"splinegen-ckpt-v1\n"
D_PE = 12


@dataclass
class AttentionConfig:
    d_emb: int = 64
    d_attn: int = 64
    n_heads: int = 4
    n_layers: int = 2

    def __post_init__(self):
        if self.d_attn % self.n_heads:
            raise ValueError(f"d_attn={self.d_attn} not divisible by n_heads={self.n_heads}")


TOY_PRESET = AttentionConfig(64, 64, 4, 2)
FULL_PRESET = AttentionConfig(512, 512, 8, 6)


# -- functional ops ---------------------------------------------------------

def coord_encode(points, n_bands=2):
    """Sinusoidal encoding of 3D coordinates.

    Each band ``k`` contributes ``sin(2^k pi x)`` and ``cos(2^k pi x)`` for the
    three coordinates, so two bands give 12 features.
    """
    points = torch.as_tensor(points)
    feats = []
    for k in range(n_bands):
        arg = (2.0**k) * math.pi * points
        feats.append(torch.sin(arg))
        feats.append(torch.cos(arg))
    return torch.cat(feats, dim=-1)


def sequence_encoding(length, dim, dtype=torch.float32):
    """Standard sinusoidal position table of shape (length, dim), for token sequences."""
    pos = torch.arange(length, dtype=dtype)[:, None]
    i = torch.arange(0, dim, 2, dtype=dtype)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), i / dim)
    out = torch.zeros(length, dim, dtype=dtype)
    out[:, 0::2] = torch.sin(angle)
    out[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return out


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    y = x @ weight.T
    return y if bias is None else y + bias


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def softmax(logits, mask=None, dim=-1):
    """Softmax where ``mask == False`` entries get logit -inf, hence probability 0.

    Rows with every entry masked produce all zeros instead of NaN.
    """
    if mask is None:
        return torch.softmax(logits, dim=dim)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    z = logits.masked_fill(~mask, -math.inf)
    empty = ~mask.any(dim=dim, keepdim=True)
    if empty.any():
        z = z.masked_fill(empty, 0.0)
        return torch.softmax(z, dim=dim).masked_fill(empty, 0.0)
    return torch.softmax(z, dim=dim)


def log_softmax(logits, mask=None, dim=-1):
    """Log-probabilities of :func:`softmax`; masked entries are -inf."""
    z = logits if mask is None else logits.masked_fill(~torch.as_tensor(mask, dtype=torch.bool), -math.inf)
    return torch.log_softmax(z, dim=dim)


def attention(q, k, v, mask=None):
    """Scaled dot-product attention over (..., L, d) tensors; returns (output, weights)."""
    logits = (q * (1.0 / math.sqrt(q.shape[-1]))) @ k.transpose(-1, -2)
    w = softmax(logits, mask)
    return w @ v, w


def split_heads(x, n_heads):
    b, length, d = x.shape
    return x.reshape(b, length, n_heads, d // n_heads).transpose(1, 2)


def merge_heads(x):
    b, h, length, dh = x.shape
    return x.transpose(1, 2).reshape(b, length, h * dh)


def multi_head_attention(q_in, k_in, v_in, params, n_heads, mask=None, return_kv=False):
    """Multi-head attention with weights ``params = (Wq, bq, Wk, bk, Wv, bv, Wo, bo)``.

    ``mask`` is boolean, broadcastable to (batch, heads, Lq, Lk); True means
    the key may be attended.  With ``return_kv`` the per-head keys and values
    (batch, heads, Lk, d_attn / heads) are returned too.
    """
    wq, bq, wk, bk, wv, bv, wo, bo = params
    if q_in.shape[0] != k_in.shape[0] or k_in.shape[1] != v_in.shape[1]:
        raise ValueError(f"attention shape mismatch: q {tuple(q_in.shape)} k {tuple(k_in.shape)} v {tuple(v_in.shape)}")
    q = split_heads(linear(q_in, wq, bq), n_heads)
    k = split_heads(linear(k_in, wk, bk), n_heads)
    v = split_heads(linear(v_in, wv, bv), n_heads)
    out, _ = attention(q, k, v, mask)
    out = linear(merge_heads(out), wo, bo)
    return (out, (k, v)) if return_kv else out


def mse_loss(pred, target, weight=None):
    """Mean squared error; ``weight`` (broadcastable, 0/1) selects the entries that count."""
    sq = (pred - target) ** 2
    if weight is None:
        return sq.mean()
    weight = torch.as_tensor(weight, dtype=sq.dtype).expand_as(sq)
    return (sq * weight).sum() / weight.sum().clamp_min(1.0)


def cross_entropy_loss(logits, target, allowed=None, weight=None):
    """Mean negative log-likelihood of integer ``target`` under masked softmax of ``logits``."""
    logp = log_softmax(logits, allowed)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if weight is None:
        return nll.mean()
    weight = torch.as_tensor(weight, dtype=nll.dtype)
    return (nll * weight).sum() / weight.sum().clamp_min(1.0)


def adam_step(params, grads, state, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update, in place on ``params``. ``state`` is a dict mutated and returned."""
    b1, b2 = betas
    t = state.get("t", 0) + 1
    state["t"] = t
    m_all = state.setdefault("m", [torch.zeros_like(p) for p in params])
    v_all = state.setdefault("v", [torch.zeros_like(p) for p in params])
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, m_all, v_all):
            if g is None:
                continue
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p.sub_(lr * mhat / (torch.sqrt(vhat) + eps))
    return state


class Adam:
    """Thin owner of the parameter list and state for :func:`adam_step`."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.betas, self.eps)


# -- modules ----------------------------------------------------------------

def _init_weight(out_dim, in_dim, gen=None):
    bound = 1.0 / math.sqrt(in_dim)
    return nn.Parameter(torch.empty(out_dim, in_dim).uniform_(-bound, bound, generator=gen))


class Linear(nn.Module):
    def __init__(self, in_dim, out_dim, bias=True):
        super().__init__()
        self.weight = _init_weight(out_dim, in_dim)
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model, d_attn, n_heads, d_kv=None):
        super().__init__()
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        self.q = Linear(d_model, d_attn)
        self.k = Linear(d_kv, d_attn)
        self.v = Linear(d_kv, d_attn)
        self.o = Linear(d_attn, d_model)

    def weights(self):
        return (self.q.weight, self.q.bias, self.k.weight, self.k.bias,
                self.v.weight, self.v.bias, self.o.weight, self.o.bias)

    def forward(self, q_in, kv_in, mask=None, return_kv=False):
        return multi_head_attention(q_in, kv_in, kv_in, self.weights(), self.n_heads, mask, return_kv)


class FeedForward(nn.Module):
    def __init__(self, d_model, d_hidden):
        super().__init__()
        self.l1 = Linear(d_model, d_hidden)
        self.l2 = Linear(d_hidden, d_model)

    def forward(self, x):
        return self.l2(torch.relu(self.l1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer; no positional information is added here."""

    def __init__(self, cfg):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_emb)
        self.attn = MultiHeadAttention(cfg.d_emb, cfg.d_attn, cfg.n_heads)
        self.norm2 = LayerNorm(cfg.d_emb)
        self.ff = FeedForward(cfg.d_emb, 2 * cfg.d_emb)

    def forward(self, x, key_mask=None):
        mask = None if key_mask is None else key_mask[:, None, None, :]
        h = self.norm1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.norm2(x))


def causal_mask(length, key_mask=None):
    m = torch.ones(length, length, dtype=torch.bool).tril()[None, None]
    if key_mask is not None:
        m = m & key_mask[:, None, None, :]
    return m


class DecoderLayer(nn.Module):
    """Pre-norm decoder layer: causal self-attention, cross-attention to memory, feed-forward."""

    def __init__(self, cfg):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_emb)
        self.self_attn = MultiHeadAttention(cfg.d_emb, cfg.d_attn, cfg.n_heads)
        self.norm2 = LayerNorm(cfg.d_emb)
        self.cross_attn = MultiHeadAttention(cfg.d_emb, cfg.d_attn, cfg.n_heads)
        self.norm3 = LayerNorm(cfg.d_emb)
        self.ff = FeedForward(cfg.d_emb, 2 * cfg.d_emb)

    def forward(self, x, memory, self_mask, memory_mask, return_kv=False):
        h = self.norm1(x)
        sa = self.self_attn(h, h, self_mask, return_kv=return_kv)
        sa, kv = sa if return_kv else (sa, None)
        x = x + sa
        x = x + self.cross_attn(self.norm2(x), memory, memory_mask)
        x = x + self.ff(self.norm3(x))
        return (x, kv) if return_kv else x


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, tensors, meta=None):
    """Write named tensors as little-endian float32 behind a JSON manifest.

    Layout: magic line, 8-byte little-endian manifest length, manifest JSON,
    then the concatenated raw payloads in manifest order.
    """
    entries, payloads, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(torch.as_tensor(value).detach().cpu().numpy(), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": CKPT_MAGIC.decode().strip(), "tensors": entries, "meta": meta or {}}).encode()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<Q", len(manifest)))
            fh.write(manifest)
            for raw in payloads:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(tensors: dict[str, torch.Tensor], meta: dict)``."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a splinegen checkpoint (bad header {magic!r})")
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n))
        blob = fh.read()
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, manifest.get("meta", {})
