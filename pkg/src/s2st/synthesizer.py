"""Acoustic synthesizer: durations, Gaussian upsampling, spectrogram decode.

The synthesizer never attends: each phoneme feature row gets a predicted
duration (seconds) and spread (frames), the feature sequence is upsampled
to frame rate by normalized Gaussian weights, and a frame-level decoder
turns that into log-mels.  Duration supervision is indirect: only the
total utterance length is penalized, so per-phoneme durations are free to
organize themselves.

The upsampling weights are computed as a softmax over
-(t + 0.5 - c_i)^2 / (2 r_i^2), which equals the normalized Gaussian form
but survives ranges small enough that exp() underflows every term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BiLSTM, Dense, LayerNorm, LSTMStack, NEG_INF, glorot, length_mask
from .numerics import Parameters, Tensor, ops
from .signal import LOG_FLOOR

SILENCE = float(np.log(LOG_FLOOR))


@dataclass(frozen=True)
class SynthesizerConfig:
    in_dim: int = 512  # phoneme feature width from the translator
    n_mels: int = 128
    duration_hidden: int = 128
    duration_layers: int = 2
    range_floor: float = 0.1  # frames; keeps upsampling weights finite
    decoder: str = "ar"  # "ar" (LSTM) or "nar" (conformer-style blocks)
    lstm_hidden: int = 1024
    lstm_layers: int = 2
    zoneout: float = 0.1
    prenet_dims: tuple[int, ...] = (128, 128)
    prenet_dropout: float = 0.5
    postnet_kernel: int = 5
    postnet_channels: int = 512
    postnet_layers: int = 5
    nar_dim: int = 512
    nar_blocks: int = 6
    nar_heads: int = 8
    nar_kernel: int = 8
    nar_dropout: float = 0.1
    max_seconds: float = 30.0  # inference length guard


class DurationPredictor:
    """Bi-LSTM trunk with softplus duration (seconds) and range (frames) heads."""

    def __init__(self, params, prefix, rng, in_dim, hidden, n_layers, range_floor):
        self.range_floor = range_floor
        self.stack = []
        d = in_dim
        for i in range(n_layers):
            self.stack.append(BiLSTM(params, f"{prefix}.bi{i}", rng, d, hidden))
            d = 2 * hidden
        self.dur_head = Dense(params, f"{prefix}.dur", rng, d, 1)
        self.range_head = Dense(params, f"{prefix}.range", rng, d, 1)

    def __call__(self, feats: Tensor, n_phonemes: np.ndarray, train: bool, rng):
        """feats [B, L, F] -> (duration_s [B, L], range_frames [B, L]).

        Steps at or beyond a row's phoneme count have duration forced to
        zero so total duration sums are honest; range stays floored.
        """
        B, L, _ = feats.data.shape
        h = feats
        for layer in self.stack:
            h = layer(h, n_phonemes, train, rng)
        mask = length_mask(n_phonemes, L).astype(h.data.dtype)
        dur = ops.mul(ops.reshape(ops.softplus(self.dur_head(h)), (B, L)), mask)
        rng_f = ops.add(ops.reshape(ops.softplus(self.range_head(h)), (B, L)),
                        self.range_floor)
        return dur, rng_f


def gaussian_upsample(feats: Tensor, duration_s: Tensor, range_frames: Tensor,
                      n_phonemes: np.ndarray, n_frames: int,
                      seconds_per_frame: float) -> tuple[Tensor, Tensor]:
    """Expand phoneme features to frame rate.

    feats [B, L, F], duration_s/range_frames [B, L] -> (frames
    [B, n_frames, F], weights [B, n_frames, L]).  Weight rows softmax over
    valid phonemes; each phoneme's center sits mid-way through its own
    predicted span on the cumulative duration axis.
    """
    B, L, _ = feats.data.shape
    d_frames = ops.mul(duration_s, 1.0 / seconds_per_frame)
    cum = ops.cumsum(d_frames, axis=1)
    centers = ops.sub(cum, ops.mul(d_frames, 0.5))  # [B, L]
    grid = (np.arange(n_frames, dtype=feats.data.dtype) + 0.5)[None, :, None]
    diff = ops.sub(grid, ops.reshape(centers, (B, 1, L)))  # [B, T, L]
    denom = ops.mul(ops.square(ops.reshape(range_frames, (B, 1, L))), 2.0)
    logits = ops.neg(ops.div(ops.square(diff), denom))
    invalid = ~length_mask(n_phonemes, L)[:, None, :]
    weights = ops.softmax(ops.masked_fill(logits, invalid, NEG_INF))
    return ops.matmul(weights, feats), weights


class Prenet:
    """Bottleneck on the previous frame; dropout stays on at inference.

    The permanent dropout is what keeps the autoregressive decoder from
    leaning entirely on its own feedback, so inference callers must supply
    a generator.
    """

    def __init__(self, params, prefix, rng, in_dim, dims, dropout):
        self.layers = []
        d = in_dim
        for i, h in enumerate(dims):
            self.layers.append(Dense(params, f"{prefix}.l{i}", rng, d, h))
            d = h
        self.out_dim = d
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator) -> Tensor:
        for layer in self.layers:
            x = ops.dropout(ops.relu(layer(x)), self.dropout, rng, train=True)
        return x


class Postnet:
    """Residual conv stack over the frame sequence, tanh except the last."""

    def __init__(self, params, prefix, rng, n_mels, kernel, channels, n_layers):
        self.kernel = kernel
        self.convs = []
        d = n_mels
        for i in range(n_layers):
            out = n_mels if i == n_layers - 1 else channels
            w = params.add(f"{prefix}.c{i}.w", glorot(rng, (kernel, d, out), kernel * d, out))
            b = params.add(f"{prefix}.c{i}.b", np.zeros(out, dtype=np.float32))
            self.convs.append((w, b, i < n_layers - 1))
            d = out

    def __call__(self, before: Tensor) -> Tensor:
        pad_r = (self.kernel - 1) // 2
        pad = (self.kernel - 1 - pad_r, pad_r)
        h = before
        for w, b, activate in self.convs:
            h = ops.conv1d(h, w, b, padding=pad)
            if activate:
                h = ops.tanh(h)
        return ops.add(before, h)


class _NarBlock:
    """Self-attention + conv + feed-forward block for the one-shot decoder."""

    def __init__(self, params, prefix, rng, dim, n_heads, kernel, dropout):
        from .encoder import ConvModule, FeedForward
        from .layers import SelfAttention

        self.ff1 = FeedForward(params, f"{prefix}.ff1", rng, dim, 4, dropout)
        self.attn = SelfAttention(params, f"{prefix}.attn", rng, dim, n_heads, dropout)
        self.attn_ln = LayerNorm(params, f"{prefix}.attn_ln", dim)
        self.conv = ConvModule(params, f"{prefix}.conv", rng, dim, kernel, dropout)
        self.ff2 = FeedForward(params, f"{prefix}.ff2", rng, dim, 4, dropout)
        self.final_ln = LayerNorm(params, f"{prefix}.final_ln", dim)
        self.dropout = dropout

    def __call__(self, x, valid, train, rng):
        x = ops.add(x, ops.mul(self.ff1(x, train, rng), 0.5))
        x = ops.add(x, ops.dropout(self.attn(self.attn_ln(x), valid, train, rng),
                                   self.dropout, rng, train))
        x = ops.add(x, self.conv(x, valid, train, rng))
        x = ops.add(x, ops.mul(self.ff2(x, train, rng), 0.5))
        return self.final_ln(x)


class Synthesizer:
    def __init__(self, params: Parameters, rng: np.random.Generator,
                 cfg: SynthesizerConfig, prefix: str = "syn"):
        self.cfg = cfg
        self.durations = DurationPredictor(
            params, f"{prefix}.durations", rng, cfg.in_dim, cfg.duration_hidden,
            cfg.duration_layers, cfg.range_floor)
        if cfg.decoder == "ar":
            self.prenet = Prenet(params, f"{prefix}.prenet", rng, cfg.n_mels,
                                 cfg.prenet_dims, cfg.prenet_dropout)
            self.lstm = LSTMStack(params, f"{prefix}.lstm", rng,
                                  self.prenet.out_dim + cfg.in_dim,
                                  cfg.lstm_hidden, cfg.lstm_layers, cfg.zoneout)
            self.frame_proj = Dense(params, f"{prefix}.frame", rng,
                                    cfg.lstm_hidden, cfg.n_mels)
        elif cfg.decoder == "nar":
            self.nar_in = Dense(params, f"{prefix}.nar_in", rng, cfg.in_dim, cfg.nar_dim)
            self.nar_blocks = [
                _NarBlock(params, f"{prefix}.nar{i}", rng, cfg.nar_dim, cfg.nar_heads,
                          cfg.nar_kernel, cfg.nar_dropout)
                for i in range(cfg.nar_blocks)
            ]
            self.frame_proj = Dense(params, f"{prefix}.frame", rng,
                                    cfg.nar_dim, cfg.n_mels)
        else:
            raise ValueError(f"unknown decoder kind {cfg.decoder!r}")
        self.postnet = Postnet(params, f"{prefix}.postnet", rng, cfg.n_mels,
                               cfg.postnet_kernel, cfg.postnet_channels,
                               cfg.postnet_layers)

    # -- frame decoding ------------------------------------------------

    def _ar_frames_tf(self, upsampled: Tensor, prev_frames: np.ndarray,
                      train: bool, rng, prenet_rng) -> Tensor:
        """Teacher-forced decode: every LSTM input is known up front, so the
        prenet and input projections run as whole-sequence matmuls."""
        dtype = upsampled.data.dtype
        prev = Tensor(np.ascontiguousarray(prev_frames, dtype=dtype))
        xs = ops.concat([self.prenet(prev, prenet_rng), upsampled], axis=2)
        return self.frame_proj(self.lstm.run(xs, train, rng))

    def _ar_frames_free(self, upsampled: Tensor, prenet_rng) -> Tensor:
        """Free-running decode feeding back the predicted (pre-postnet) frame."""
        B, T, _ = upsampled.data.shape
        dtype = upsampled.data.dtype
        states = self.lstm.init_state(B, dtype)
        prev = Tensor(np.full((B, self.cfg.n_mels), SILENCE, dtype=dtype))
        outs = []
        for t in range(T):
            x = ops.concat([self.prenet(prev, prenet_rng),
                            ops.index(upsampled, np.s_[:, t])], axis=1)
            h, states = self.lstm.step(x, states, False, None)
            prev = self.frame_proj(h)
            outs.append(ops.reshape(prev, (B, 1, self.cfg.n_mels)))
        return ops.concat(outs, axis=1)

    def _nar_frames(self, upsampled: Tensor, frame_len: np.ndarray, train: bool,
                    rng) -> Tensor:
        valid = length_mask(frame_len, upsampled.data.shape[1])
        h = self.nar_in(upsampled)
        for block in self.nar_blocks:
            h = block(h, valid, train, rng)
        return self.frame_proj(h)

    # -- training and inference entry points ----------------------------

    def teacher_force(self, feats: Tensor, n_phonemes: np.ndarray,
                      tgt: np.ndarray, tgt_len: np.ndarray,
                      seconds_per_frame: float, train: bool, rng,
                      prenet_rng) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Ground-truth-length decode for loss computation.

        Returns (before [B, T, C], after [B, T, C], duration_s [B, L],
        weights [B, T, L]); T is the padded target length.
        """
        dur, rng_f = self.durations(feats, n_phonemes, train, rng)
        T = tgt.shape[1]
        upsampled, weights = gaussian_upsample(feats, dur, rng_f, n_phonemes, T,
                                               seconds_per_frame)
        if self.cfg.decoder == "ar":
            shifted = np.concatenate(
                [np.full((tgt.shape[0], 1, tgt.shape[2]), SILENCE, dtype=tgt.dtype),
                 tgt[:, :-1]], axis=1)
            before = self._ar_frames_tf(upsampled, shifted, train, rng, prenet_rng)
        else:
            before = self._nar_frames(upsampled, tgt_len, train, rng)
        # the postnet convolves over time, so padded frames are zeroed first;
        # otherwise batchmates' padding would leak into the last valid frames
        before = ops.mul(before, length_mask(tgt_len, T)[:, :, None]
                         .astype(before.data.dtype))
        return before, self.postnet(before), dur, weights

    def synthesize(self, feats: Tensor, n_phonemes: np.ndarray,
                   seconds_per_frame: float, prenet_rng,
                   duration_scale: float = 1.0):
        """Free-running decode; frame counts come from predicted durations.

        Returns (after [B, T, C] numpy, frame_len [B], duration_s [B, L]
        numpy, weights [B, T, L] numpy).
        """
        dur, rng_f = self.durations(feats, n_phonemes, train=False, rng=None)
        if duration_scale != 1.0:
            dur = ops.mul(dur, float(duration_scale))
            rng_f = ops.mul(rng_f, float(duration_scale))
        total = dur.data.sum(axis=1)
        max_frames = int(self.cfg.max_seconds / seconds_per_frame)
        frame_len = np.clip(np.round(total / seconds_per_frame).astype(np.int64),
                            1, max_frames)
        T = int(frame_len.max())
        upsampled, weights = gaussian_upsample(feats, dur, rng_f, n_phonemes, T,
                                               seconds_per_frame)
        if self.cfg.decoder == "ar":
            before = self._ar_frames_free(upsampled, prenet_rng)
        else:
            before = self._nar_frames(upsampled, frame_len, False, None)
        before = ops.mul(before, length_mask(frame_len, T)[:, :, None]
                         .astype(before.data.dtype))
        after = self.postnet(before)
        return after.data, frame_len, dur.data, weights.data
