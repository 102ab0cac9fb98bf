"""Reusable differentiable building blocks.

Layers register their weights in a shared Parameters registry under a
dotted prefix at construction time and are pure functions of those weights
afterwards.  Stochastic pieces (dropout, zoneout) take an explicit
``train`` flag and numpy Generator; with train=False they are exact
pass-throughs, so inference never consumes randomness unless a layer says
otherwise (the synthesizer prenet does, by design).
"""

from __future__ import annotations

import numpy as np

from .numerics import Parameters, Tensor, ops


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def orthogonal_stack(rng: np.random.Generator, n: int, copies: int) -> np.ndarray:
    """[n, copies * n] block of independent orthogonal matrices (recurrent init)."""
    blocks = []
    for _ in range(copies):
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        blocks.append(q * np.sign(np.diag(r)))
    return np.concatenate(blocks, axis=1).astype(np.float32)


class Dense:
    """y = x @ w + b for x [..., d_in]."""

    def __init__(self, params: Parameters, prefix: str, rng, d_in: int, d_out: int,
                 bias: bool = True):
        self.w = params.add(f"{prefix}.w", glorot(rng, (d_in, d_out), d_in, d_out))
        self.b = params.add(f"{prefix}.b", np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.w)
        return ops.add(y, self.b) if self.b is not None else y


class LayerNorm:
    """Normalization over the last axis with learned gain and shift."""

    def __init__(self, params: Parameters, prefix: str, dim: int):
        self.g = params.add(f"{prefix}.g", np.ones(dim, dtype=np.float32))
        self.b = params.add(f"{prefix}.b", np.zeros(dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.mul(ops.layer_norm(x), self.g), self.b)


class Embedding:
    def __init__(self, params: Parameters, prefix: str, rng, n_vocab: int, dim: int):
        table = (rng.standard_normal((n_vocab, dim)) / np.sqrt(dim)).astype(np.float32)
        self.table = params.add(f"{prefix}.table", table)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(self.table, ids)


class LSTMLayer:
    """Single LSTM layer exposing one step at a time.

    Gate preactivations are [input | forget | cell | output]; the forget
    slice of the bias starts at one.  Zoneout randomly holds units at their
    previous state during training and is a pass-through at inference.
    """

    def __init__(self, params: Parameters, prefix: str, rng, d_in: int, hidden: int,
                 zoneout: float = 0.0):
        self.hidden = hidden
        self.zoneout = zoneout
        self.wx = params.add(f"{prefix}.wx", glorot(rng, (d_in, 4 * hidden), d_in, hidden))
        self.wh = params.add(f"{prefix}.wh", orthogonal_stack(rng, hidden, 4))
        b = np.zeros(4 * hidden, dtype=np.float32)
        b[hidden : 2 * hidden] = 1.0
        self.b = params.add(f"{prefix}.b", b)

    def init_state(self, batch: int, dtype=np.float32) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden), dtype=dtype)
        return Tensor(z), Tensor(z.copy())

    def _advance(self, zx: Tensor, state, train: bool, rng):
        """One step given zx = x @ wx + b already computed."""
        h_prev, c_prev = state
        z = ops.add(zx, ops.matmul(h_prev, self.wh))
        h, c = ops.lstm_cell(z, c_prev)
        if train and self.zoneout > 0.0:
            keep_h = (rng.random(h.data.shape) < self.zoneout).astype(h.data.dtype)
            keep_c = (rng.random(c.data.shape) < self.zoneout).astype(c.data.dtype)
            h = ops.lerp_mask(h_prev, h, keep_h)
            c = ops.lerp_mask(c_prev, c, keep_c)
        return h, c

    def step(self, x: Tensor, state: tuple[Tensor, Tensor], train: bool,
             rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
        return self._advance(ops.add(ops.matmul(x, self.wx), self.b), state, train, rng)

    def run(self, xs: Tensor, train: bool, rng) -> Tensor:
        """Whole sequence xs [B, T, D] -> [B, T, H].

        The input projection happens as one batched matmul up front; only
        the recurrence runs per step.  Valid when the full input sequence
        is known in advance (so not for self-feedback decoding).
        """
        B, T, _ = xs.data.shape
        zx = ops.add(ops.matmul(xs, self.wx), self.b)  # [B, T, 4H]
        state = self.init_state(B, xs.data.dtype)
        outs = []
        for t in range(T):
            h, c = self._advance(ops.index(zx, np.s_[:, t]), state, train, rng)
            state = (h, c)
            outs.append(ops.reshape(h, (B, 1, self.hidden)))
        return ops.concat(outs, axis=1)


class LSTMStack:
    """Unidirectional stack; step() threads states through all layers."""

    def __init__(self, params: Parameters, prefix: str, rng, d_in: int, hidden: int,
                 n_layers: int, zoneout: float = 0.0):
        self.layers = [
            LSTMLayer(params, f"{prefix}.l{i}", rng, d_in if i == 0 else hidden,
                      hidden, zoneout)
            for i in range(n_layers)
        ]

    def init_state(self, batch: int, dtype=np.float32):
        return [l.init_state(batch, dtype) for l in self.layers]

    def step(self, x: Tensor, states, train: bool, rng) -> tuple[Tensor, list]:
        new_states = []
        h = x
        for layer, st in zip(self.layers, states):
            h, c = layer.step(h, st, train, rng)
            new_states.append((h, c))
        return h, new_states

    def run(self, xs: Tensor, train: bool, rng) -> Tensor:
        """Layer-by-layer sequence pass for inputs known in advance."""
        h = xs
        for layer in self.layers:
            h = layer.run(h, train, rng)
        return h


def reverse_by_length(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Flip each row's first ``lengths[b]`` steps of x [B, T, D]; padding stays."""
    B, T = x.data.shape[:2]
    idx = np.tile(np.arange(T), (B, 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n - 1, -1, -1)
    return ops.index(x, (np.arange(B)[:, None], idx))


class BiLSTM:
    """Bidirectional layer: concat of forward and length-aware backward passes."""

    def __init__(self, params: Parameters, prefix: str, rng, d_in: int, hidden: int):
        self.fwd = LSTMLayer(params, f"{prefix}.fwd", rng, d_in, hidden)
        self.bwd = LSTMLayer(params, f"{prefix}.bwd", rng, d_in, hidden)

    def __call__(self, x: Tensor, lengths: np.ndarray, train: bool, rng) -> Tensor:
        fwd = self.fwd.run(x, train, rng)
        rev = reverse_by_length(x, lengths)
        bwd = reverse_by_length(self.bwd.run(rev, train, rng), lengths)
        return ops.concat([fwd, bwd], axis=2)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, T, H*dh] -> [B, H, T, dh]."""
    B, T, D = x.data.shape
    return ops.transpose(ops.reshape(x, (B, T, n_heads, D // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, T, dh] -> [B, T, H*dh]."""
    B, H, T, dh = x.data.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


NEG_INF = -1e9  # large finite mask value; keeps softmax rows well defined


class SelfAttention:
    """Multi-head self-attention with a learned relative-position bias.

    The bias table holds one scalar per head per signed distance, with
    distances clipped to ±cap, so positions farther than cap share a bias.
    """

    def __init__(self, params: Parameters, prefix: str, rng, dim: int, n_heads: int,
                 dropout: float = 0.0, cap: int = 64):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.dropout = dropout
        self.cap = cap
        self.q = Dense(params, f"{prefix}.q", rng, dim, dim, bias=False)
        self.k = Dense(params, f"{prefix}.k", rng, dim, dim, bias=False)
        self.v = Dense(params, f"{prefix}.v", rng, dim, dim, bias=False)
        self.out = Dense(params, f"{prefix}.out", rng, dim, dim)
        self.rel = params.add(f"{prefix}.rel",
                              np.zeros((n_heads, 2 * cap + 1), dtype=np.float32))

    def _rel_bias(self, T: int) -> Tensor:
        pos = np.arange(T)
        buckets = np.clip(pos[None, :] - pos[:, None], -self.cap, self.cap) + self.cap
        flat = ops.index(self.rel, (slice(None), buckets.reshape(-1)))
        return ops.reshape(flat, (self.n_heads, T, T))

    def __call__(self, x: Tensor, valid: np.ndarray, train: bool, rng) -> Tensor:
        B, T, D = x.data.shape
        dh = D // self.n_heads
        q = split_heads(self.q(x), self.n_heads)
        k = split_heads(self.k(x), self.n_heads)
        v = split_heads(self.v(x), self.n_heads)
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        scores = ops.add(scores, self._rel_bias(T))
        key_pad = ~valid[:, None, None, :]
        probs = ops.softmax(ops.masked_fill(scores, key_pad, NEG_INF))
        probs = ops.dropout(probs, self.dropout, rng, train)
        return self.out(merge_heads(ops.matmul(probs, v)))


class CrossAttention:
    """One query vector attending over a precomputed memory."""

    def __init__(self, params: Parameters, prefix: str, rng, q_dim: int, kv_dim: int,
                 hidden: int, n_heads: int, out_dim: int, dropout: float = 0.0):
        if hidden % n_heads:
            raise ValueError(f"attention hidden {hidden} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.hidden = hidden
        self.dropout = dropout
        self.q = Dense(params, f"{prefix}.q", rng, q_dim, hidden, bias=False)
        self.k = Dense(params, f"{prefix}.k", rng, kv_dim, hidden, bias=False)
        self.v = Dense(params, f"{prefix}.v", rng, kv_dim, hidden, bias=False)
        self.out = Dense(params, f"{prefix}.out", rng, hidden, out_dim)

    def prepare(self, memory: Tensor, valid: np.ndarray):
        """memory [B, T, kv_dim] -> reusable (k^T, v, key_pad) for step()."""
        k = split_heads(self.k(memory), self.n_heads)  # [B, H, T, dh]
        v = split_heads(self.v(memory), self.n_heads)
        kt = ops.transpose(k, (0, 1, 3, 2))  # [B, H, dh, T]
        return kt, v, ~valid[:, None, None, :]

    def step(self, query: Tensor, prepared, train: bool, rng) -> tuple[Tensor, Tensor]:
        """query [B, q_dim] -> (context [B, out_dim], probs [B, H, T])."""
        kt, v, key_pad = prepared
        B = query.data.shape[0]
        dh = self.hidden // self.n_heads
        q = ops.transpose(ops.reshape(self.q(query), (B, 1, self.n_heads, dh)),
                          (0, 2, 1, 3))  # [B, H, 1, dh]
        scores = ops.mul(ops.matmul(q, kt), 1.0 / np.sqrt(dh))  # [B, H, 1, T]
        probs = ops.softmax(ops.masked_fill(scores, key_pad, NEG_INF))
        probs = ops.dropout(probs, self.dropout, rng, train)
        ctx = merge_heads(ops.matmul(probs, v))  # [B, 1, hidden]
        ctx = self.out(ops.reshape(ctx, (B, self.hidden)))
        T = kt.data.shape[-1]
        return ctx, ops.reshape(probs, (B, self.n_heads, T))


def length_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    """[B] -> bool [B, T], True on valid steps."""
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]
