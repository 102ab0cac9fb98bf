"""Linguistic decoder: LSTM phoneme predictor attending over encoder output.

A single multi-head attention joins the two sides: at each step the
previous top hidden state queries the encoder memory, the resulting context
joins the token embedding as LSTM input, and the concat of top hidden and
context (the per-phoneme representation handed to the synthesizer) also
produces the phoneme logits.  That concat is the only path from here to
the acoustics, so everything the synthesizer needs must flow through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID
from .layers import CrossAttention, Dense, Embedding, LSTMStack, length_mask
from .numerics import Parameters, Tensor, ops


@dataclass(frozen=True)
class TranslatorConfig:
    vocab_size: int = 64
    emb_dim: int = 96
    hidden: int = 256
    n_layers: int = 4
    zoneout: float = 0.1
    attn_hidden: int = 512
    attn_heads: int = 4
    attn_out: int = 256
    attn_dropout: float = 0.1

    @property
    def feature_dim(self) -> int:
        """Width of the per-phoneme vector passed to the synthesizer."""
        return self.hidden + self.attn_out


class Translator:
    def __init__(self, params: Parameters, rng: np.random.Generator,
                 cfg: TranslatorConfig, enc_dim: int, prefix: str = "dec"):
        self.cfg = cfg
        self.emb = Embedding(params, f"{prefix}.emb", rng, cfg.vocab_size, cfg.emb_dim)
        self.attn = CrossAttention(params, f"{prefix}.attn", rng, cfg.hidden, enc_dim,
                                   cfg.attn_hidden, cfg.attn_heads, cfg.attn_out,
                                   cfg.attn_dropout)
        self.lstm = LSTMStack(params, f"{prefix}.lstm", rng,
                              cfg.emb_dim + cfg.attn_out, cfg.hidden, cfg.n_layers,
                              cfg.zoneout)
        self.proj = Dense(params, f"{prefix}.proj", rng, cfg.feature_dim, cfg.vocab_size)

    def _step(self, token_ids: np.ndarray, h_top: Tensor, states, prepared,
              train: bool, rng):
        ctx, probs = self.attn.step(h_top, prepared, train, rng)
        x = ops.concat([self.emb(token_ids), ctx], axis=1)
        h_new, states = self.lstm.step(x, states, train, rng)
        feat = ops.concat([h_new, ctx], axis=1)
        return self.proj(feat), feat, probs, h_new, states

    def teacher_force(self, enc: Tensor, enc_len: np.ndarray, phoneme_in: np.ndarray,
                      train: bool = False, rng: np.random.Generator | None = None):
        """Run the decoder on ground-truth inputs.

        enc [B, T', D], phoneme_in [B, L] (BOS-prefixed).  Returns
        (logits [B, L, V], features [B, L, F], attention [B, H, L, T']).
        """
        B, L = phoneme_in.shape
        prepared = self.attn.prepare(enc, length_mask(enc_len, enc.data.shape[1]))
        states = self.lstm.init_state(B, enc.data.dtype)
        h_top = Tensor(np.zeros((B, self.cfg.hidden), dtype=enc.data.dtype))
        logits, feats, probs = [], [], []
        for t in range(L):
            logit, feat, p, h_top, states = self._step(
                phoneme_in[:, t], h_top, states, prepared, train, rng)
            V = self.cfg.vocab_size
            logits.append(ops.reshape(logit, (B, 1, V)))
            feats.append(ops.reshape(feat, (B, 1, self.cfg.feature_dim)))
            probs.append(ops.reshape(p, (B, self.cfg.attn_heads, 1, -1)))
        return (ops.concat(logits, axis=1), ops.concat(feats, axis=1),
                ops.concat(probs, axis=2))

    def greedy(self, enc: Tensor, enc_len: np.ndarray, max_len: int):
        """Decode until every row emits EOS (or max_len).

        Returns (ids [B, L] with PAD after each row's EOS, n_phonemes [B]
        counting steps before EOS, features [B, L, F], attention
        [B, H, L, T']).  The EOS-emitting step's feature row is still
        present; callers exclude it via n_phonemes.
        """
        B = enc.data.shape[0]
        prepared = self.attn.prepare(enc, length_mask(enc_len, enc.data.shape[1]))
        states = self.lstm.init_state(B, enc.data.dtype)
        h_top = Tensor(np.zeros((B, self.cfg.hidden), dtype=enc.data.dtype))
        inputs = np.full(B, BOS_ID, dtype=np.int64)
        finished = np.zeros(B, dtype=bool)
        n_phon = np.zeros(B, dtype=np.int64)
        ids, feats, probs = [], [], []
        for _ in range(max_len):
            logit, feat, p, h_top, states = self._step(
                inputs, h_top, states, prepared, False, None)
            step_ids = logit.data.argmax(axis=-1).astype(np.int64)
            step_ids[finished] = PAD_ID
            ids.append(step_ids)
            feats.append(ops.reshape(feat, (B, 1, self.cfg.feature_dim)))
            probs.append(ops.reshape(p, (B, self.cfg.attn_heads, 1, -1)))
            n_phon += (~finished) & (step_ids != EOS_ID)
            finished |= step_ids == EOS_ID
            inputs = np.where(finished, PAD_ID, step_ids)
            if finished.all():
                break
        return (np.stack(ids, axis=1), n_phon,
                ops.concat(feats, axis=1), ops.concat(probs, axis=2))
