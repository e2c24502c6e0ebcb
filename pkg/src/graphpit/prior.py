"""Attention denoiser over refined part tokens, and its Euler sampler.

The layout vector z_t is embedded together with sinusoidal time features
into one query token per part slot (plus a learned slot embedding). Each
block runs cross-attention from the slot tokens to the example's condition
tokens, self-attention among the example's valid slots, and a feed-forward
layer, each with residual LayerNorm. A linear head maps every slot token
back to its slice of the layout vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .optim import ParamStore
from .tensor import ShapeError, Tensor


@dataclass
class PriorParams:
    """View over the ``prior.`` entries of a ParamStore."""

    store: ParamStore
    slots: int
    slot_dim: int
    cond_dim: int
    width: int = 32
    key_dim: int = 32
    n_blocks: int = 2
    time_dim: int = 16
    prefix: str = "prior"

    @property
    def dx(self) -> int:
        return self.slots * self.slot_dim

    def __getitem__(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def name(self, name: str) -> str:
        return f"{self.prefix}.{name}"


def init_prior(store: ParamStore, slots: int, slot_dim: int, cond_dim: int, width: int = 32,
               key_dim: int = 32, n_blocks: int = 2, time_dim: int = 16,
               rng: np.random.Generator | None = None, prefix: str = "prior") -> PriorParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    p = PriorParams(store, slots, slot_dim, cond_dim, width, key_dim, n_blocks, time_dim, prefix)
    nn.add_linear(store, p.name("embed"), slot_dim + time_dim, width, rng)
    store.add(p.name("slot_embed"), rng.normal(0.0, 1.0, (slots, width)))
    for b in range(n_blocks):
        blk = p.name(f"b{b}")
        for proj in ("S_Q", "S_K", "S_V"):
            store.add(f"{blk}.{proj}", nn.uniform_init(rng, width, (width, key_dim)))
        store.add(f"{blk}.S_O", nn.uniform_init(rng, key_dim, (key_dim, width)))
        nn.add_layer_norm(store, f"{blk}.ln_self", width)
        store.add(f"{blk}.W_Q", nn.uniform_init(rng, width, (width, key_dim)))
        store.add(f"{blk}.W_K", nn.uniform_init(rng, cond_dim, (cond_dim, key_dim)))
        store.add(f"{blk}.W_V", nn.uniform_init(rng, cond_dim, (cond_dim, key_dim)))
        store.add(f"{blk}.W_O", nn.uniform_init(rng, key_dim, (key_dim, width)))
        nn.add_layer_norm(store, f"{blk}.ln_attn", width)
        nn.add_mlp(store, f"{blk}.ff", width, 2 * width, width, rng)
        nn.add_layer_norm(store, f"{blk}.ln_ff", width)
    nn.add_linear(store, p.name("head"), width, slot_dim, rng)
    return p


def time_features(t: np.ndarray, dim: int = 16) -> np.ndarray:
    """[sin(w_k t), cos(w_k t)] with w_k spaced geometrically from 1 to 100."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = 100.0 ** (np.arange(half) / max(half - 1, 1))
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def cross_attention(q: Tensor, h_prime: Tensor, W_K: Tensor, W_V: Tensor,
                    mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V with K = H' W_K, V = H' W_V.

    ``mask[i, j]`` False hides condition token j from query i.
    """
    if h_prime.shape[0] < 1:
        raise ShapeError("cross-attention needs at least one condition token")
    if h_prime.shape[1] != W_K.shape[0] or h_prime.shape[1] != W_V.shape[0]:
        raise ShapeError(f"condition width {h_prime.shape[1]} does not match projections")
    if q.shape[1] != W_K.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} != key width {W_K.shape[1]}")
    k = T.matmul(h_prime, W_K)
    v = T.matmul(h_prime, W_V)
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(W_K.shape[1]))
    return T.matmul(T.softmax_rows(scores, mask), v)


def self_attention(x: Tensor, W_Q: Tensor, W_K: Tensor, W_V: Tensor,
                   mask: np.ndarray | None = None) -> Tensor:
    return cross_attention(T.matmul(x, W_Q), x, W_K, W_V, mask)


def batched_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Per-example attention: q (B, S, dk), k and v (B, T, dk), mask (B, S, T) or (B, 1, T)."""
    scores = T.mul(T.bmm(q, T.swap_last(k)), 1.0 / np.sqrt(q.shape[2]))
    return T.bmm(T.softmax_rows(scores, np.broadcast_to(mask, scores.shape)), v)


def _pad_index(owner: np.ndarray, b: int) -> tuple[np.ndarray, np.ndarray]:
    """Row gather index (B*T_max,) and validity mask (B, T_max) for per-example condition tokens."""
    counts = np.bincount(owner, minlength=b)
    if np.any(counts == 0):
        raise ShapeError("every batch row needs at least one condition token")
    t_max = int(counts.max())
    order = np.argsort(owner, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(t_max)[None, :]
    valid = slot < counts[:, None]
    idx = np.where(valid, starts[:, None] + slot, 0)
    return order[idx].reshape(-1), valid


def denoiser_forward(z: Tensor, t: np.ndarray, cond: Tensor, owner: np.ndarray,
                     params: PriorParams, slot_valid: np.ndarray | None = None) -> Tensor:
    """Velocity prediction for a batch.

    z: (B, dx) noisy layouts; t: (B,) times; cond: (M, cond_dim) condition
    tokens of the whole batch; owner[m] is the batch row token m belongs to.
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    b, s = z.shape[0], params.slots
    owner = np.asarray(owner, dtype=np.int64)
    row_of = np.repeat(np.arange(b), s)
    temb = time_features(t, params.time_dim)[row_of]
    inp = T.concat([T.reshape(z, (b * s, params.slot_dim)), T.Tensor(temb)], axis=1)
    x = T.add(nn.linear(inp, params.store, params.name("embed")),
              T.take_rows(params["slot_embed"], np.tile(np.arange(s), b)))
    if owner.size == 0 or owner.min() < 0 or owner.max() >= b:
        raise ShapeError(f"condition owners must index the {b} batch rows")
    if cond.shape[1] != params.cond_dim:
        raise ShapeError(f"condition width {cond.shape[1]} != {params.cond_dim}")
    gather, cond_valid = _pad_index(owner, b)
    t_max = cond_valid.shape[1]
    cond_mask = cond_valid[:, None, :]
    if slot_valid is None:
        self_mask = np.ones((b, 1, s), dtype=bool)
    else:
        self_mask = np.asarray(slot_valid, dtype=bool).reshape(b, 1, s)
    cond_rows = T.take_rows(cond, gather)
    st = params.store
    dk = params.key_dim
    for i in range(params.n_blocks):
        blk = params.name(f"b{i}")
        q = T.reshape(T.matmul(x, st[f"{blk}.W_Q"]), (b, s, dk))
        k = T.reshape(T.matmul(cond_rows, st[f"{blk}.W_K"]), (b, t_max, dk))
        v = T.reshape(T.matmul(cond_rows, st[f"{blk}.W_V"]), (b, t_max, dk))
        att = T.reshape(batched_attention(q, k, v, cond_mask), (b * s, dk))
        x = nn.layer_norm(T.add(x, T.matmul(att, st[f"{blk}.W_O"])), st, f"{blk}.ln_attn")
        q, k, v = (T.reshape(T.matmul(x, st[f"{blk}.S_{n}"]), (b, s, dk)) for n in "QKV")
        att = T.reshape(batched_attention(q, k, v, self_mask), (b * s, dk))
        x = nn.layer_norm(T.add(x, T.matmul(att, st[f"{blk}.S_O"])), st, f"{blk}.ln_self")
        x = nn.layer_norm(T.add(x, nn.mlp(x, st, f"{blk}.ff")), st, f"{blk}.ln_ff")
    out = nn.linear(x, params.store, params.name("head"))
    return T.reshape(out, (b, params.dx))


def euler_integrate(velocity: Callable[[np.ndarray, np.ndarray], np.ndarray], z0: np.ndarray,
                    steps: int, mask: np.ndarray | None = None) -> np.ndarray:
    """z_{k+1} = z_k + v(z_k, k/steps) / steps from t=0 to t=1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.array(z0, dtype=np.float64)
    if mask is not None:
        z = z * mask
    for k in range(steps):
        t = np.full(z.shape[0], k / steps)
        z = z + velocity(z, t) / steps
        if mask is not None:
            z = z * mask
    return z


def sample(cond: Tensor, owner: np.ndarray, params: PriorParams, steps: int = 32, seed: int = 0,
           batch: int | None = None, mask: np.ndarray | None = None) -> np.ndarray:
    """Draw layouts for every batch row; z_0 ~ N(0, I) from ``seed``."""
    b = int(np.max(owner)) + 1 if batch is None else batch
    z0 = np.random.default_rng(seed).standard_normal((b, params.dx))
    cond = T.Tensor(cond.data)
    valid = None if mask is None else mask.reshape(b, params.slots, params.slot_dim)[:, :, 0] > 0

    def v(z, t):
        with T.no_grad():
            return denoiser_forward(T.Tensor(z), t, cond, owner, params, valid).data

    return euler_integrate(v, z0, steps, mask)
