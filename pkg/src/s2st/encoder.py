"""Speech encoder: strided conv subsampling into a Conformer stack.

Input is batched log-mel [B, T, n_mels] with per-row valid lengths; output
is [B, T', dim] at T' = ceil(T / 4) with rows beyond the subsampled length
zeroed, so downstream consumers can matmul without re-masking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Dense, LayerNorm, SelfAttention, glorot, length_mask
from .numerics import Parameters, Tensor, ops


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 80
    dim: int = 144
    n_blocks: int = 16
    n_heads: int = 4
    conv_kernel: int = 32
    dropout: float = 0.1
    ff_mult: int = 4
    subsample_layers: int = 2  # each layer halves time (ceil)
    rel_cap: int = 64


def subsampled_length(T: int, n_layers: int) -> int:
    for _ in range(n_layers):
        T = -(-T // 2)
    return T


class FeedForward:
    """Macaron half: LN -> Dense(4x) -> swish -> dropout -> Dense -> dropout."""

    def __init__(self, params, prefix, rng, dim, mult, dropout):
        self.ln = LayerNorm(params, f"{prefix}.ln", dim)
        self.up = Dense(params, f"{prefix}.up", rng, dim, mult * dim)
        self.down = Dense(params, f"{prefix}.down", rng, mult * dim, dim)
        self.dropout = dropout

    def __call__(self, x, train, rng):
        h = ops.dropout(ops.swish(self.up(self.ln(x))), self.dropout, rng, train)
        return ops.dropout(self.down(h), self.dropout, rng, train)


class ConvModule:
    """LN -> pointwise 2x -> GLU -> depthwise conv -> LN -> swish -> pointwise.

    The depthwise conv mixes across time, so inputs are silenced at padded
    rows first; normalization is per-position LayerNorm, which keeps padded
    rows from influencing valid ones.
    """

    def __init__(self, params, prefix, rng, dim, kernel, dropout):
        self.ln = LayerNorm(params, f"{prefix}.ln", dim)
        self.pw_in = Dense(params, f"{prefix}.pw_in", rng, dim, 2 * dim)
        self.dw = params.add(f"{prefix}.dw",
                             glorot(rng, (kernel, 1, dim), kernel, kernel))
        self.dw_b = params.add(f"{prefix}.dw_b", np.zeros(dim, dtype=np.float32))
        self.norm = LayerNorm(params, f"{prefix}.norm", dim)
        self.pw_out = Dense(params, f"{prefix}.pw_out", rng, dim, dim)
        self.kernel = kernel
        self.dim = dim
        self.dropout = dropout

    def __call__(self, x, valid, train, rng):
        D = self.dim
        h = self.pw_in(self.ln(x))
        a = ops.index(h, np.s_[:, :, :D])
        b = ops.index(h, np.s_[:, :, D:])
        h = ops.mul(a, ops.sigmoid(b))
        h = ops.mul(h, valid[:, :, None].astype(np.float32))
        pad_r = (self.kernel - 1) // 2
        h = ops.conv1d(h, self.dw, self.dw_b,
                       padding=(self.kernel - 1 - pad_r, pad_r), groups=D)
        h = ops.swish(self.norm(h))
        return ops.dropout(self.pw_out(h), self.dropout, rng, train)


class ConformerBlock:
    def __init__(self, params, prefix, rng, cfg: EncoderConfig):
        self.ff1 = FeedForward(params, f"{prefix}.ff1", rng, cfg.dim, cfg.ff_mult, cfg.dropout)
        self.attn = SelfAttention(params, f"{prefix}.attn", rng, cfg.dim, cfg.n_heads,
                                  cfg.dropout, cfg.rel_cap)
        self.attn_ln = LayerNorm(params, f"{prefix}.attn_ln", cfg.dim)
        self.conv = ConvModule(params, f"{prefix}.conv", rng, cfg.dim, cfg.conv_kernel,
                               cfg.dropout)
        self.ff2 = FeedForward(params, f"{prefix}.ff2", rng, cfg.dim, cfg.ff_mult, cfg.dropout)
        self.final_ln = LayerNorm(params, f"{prefix}.final_ln", cfg.dim)
        self.dropout = cfg.dropout

    def __call__(self, x, valid, train, rng):
        x = ops.add(x, ops.mul(self.ff1(x, train, rng), 0.5))
        x = ops.add(x, ops.dropout(self.attn(self.attn_ln(x), valid, train, rng),
                                   self.dropout, rng, train))
        x = ops.add(x, self.conv(x, valid, train, rng))
        x = ops.add(x, ops.mul(self.ff2(x, train, rng), 0.5))
        return self.final_ln(x)


class ConformerEncoder:
    def __init__(self, params: Parameters, rng: np.random.Generator,
                 cfg: EncoderConfig, prefix: str = "enc"):
        self.cfg = cfg
        self.sub_w = []
        self.sub_b = []
        c_in = cfg.n_mels
        for i in range(cfg.subsample_layers):
            self.sub_w.append(params.add(f"{prefix}.sub{i}.w",
                                         glorot(rng, (3, c_in, cfg.dim), 3 * c_in, cfg.dim)))
            self.sub_b.append(params.add(f"{prefix}.sub{i}.b",
                                         np.zeros(cfg.dim, dtype=np.float32)))
            c_in = cfg.dim
        self.blocks = [ConformerBlock(params, f"{prefix}.b{i}", rng, cfg)
                       for i in range(cfg.n_blocks)]

    def output_length(self, T: int) -> int:
        return subsampled_length(T, self.cfg.subsample_layers)

    def encode(self, src: np.ndarray, src_len: np.ndarray, train: bool = False,
               rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
        """src [B, T, n_mels], src_len [B] -> (h [B, T', dim], enc_len [B]).

        Padded positions are silenced before each strided conv and zeroed in
        the returned tensor, so results for a row are unchanged by how much
        padding its batchmates need.
        """
        B, T, _ = src.shape
        lens = np.asarray(src_len)
        # keep float64 inputs as-is so finite-difference checks stay exact
        dtype = src.dtype if np.issubdtype(src.dtype, np.floating) else np.float32
        x = Tensor(np.ascontiguousarray(src, dtype=dtype))
        for w, b in zip(self.sub_w, self.sub_b):
            x = ops.mul(x, length_mask(lens, x.data.shape[1])[:, :, None].astype(np.float32))
            x = ops.relu(ops.conv1d(x, w, b, stride=2, padding=(1, 1)))
            lens = -(-lens // 2)
        valid = length_mask(lens, x.data.shape[1])
        for block in self.blocks:
            x = block(x, valid, train, rng)
        x = ops.mul(x, valid[:, :, None].astype(np.float32))
        return x, lens
