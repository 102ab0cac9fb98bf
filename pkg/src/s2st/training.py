"""Joint training: model assembly, losses, optimizer, checkpoints, the loop.

Every source of randomness in a run is a named stream keyed by (seed, step),
so a run is a pure function of its config and any step can be recomputed in
isolation.  Checkpoints carry parameters, optimizer moments, and the step
counter; resuming from one continues the original trajectory bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .corpus import Batch, BatchFeeder
from .encoder import ConformerEncoder, EncoderConfig
from .errors import ConfigError, FormatError
from .layers import length_mask
from .numerics import Parameters, Tape, Tensor, ops, stream
from .synthesizer import Synthesizer, SynthesizerConfig
from .translator import Translator, TranslatorConfig

CKPT_MAGIC = b"T2CKPT1"


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    translator: TranslatorConfig
    synthesizer: SynthesizerConfig
    seconds_per_frame: float  # of the output mel grid


@dataclass(frozen=True)
class LossBreakdown:
    total: Tensor
    phoneme_ce: float
    duration_l2: float
    spec_loss: float  # pre-net plus post-net spectrogram MSE
    l2_reg: float
    accuracy: float
    spec_after: float = 0.0  # post-net MSE alone, for reporting


@dataclass(frozen=True)
class InferResult:
    ids: np.ndarray  # [B, L] phoneme ids, PAD after each row's EOS
    n_phonemes: np.ndarray  # [B]
    mel: np.ndarray  # [B, T, C] log-mel
    frame_len: np.ndarray  # [B]
    duration_s: np.ndarray  # [B, L]
    attention: np.ndarray  # [B, H, L, T'] translator attention


class Model:
    """Encoder, translator, and synthesizer sharing one parameter registry."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = Parameters()
        rng = stream(seed, "init")
        self.encoder = ConformerEncoder(self.params, rng, cfg.encoder)
        self.translator = Translator(self.params, rng, cfg.translator,
                                     enc_dim=cfg.encoder.dim)
        self.synthesizer = Synthesizer(self.params, rng, cfg.synthesizer)

    def forward_train(self, batch: Batch, smoothing: float,
                      phoneme_weight: float, duration_weight: float,
                      spec_weight: float, l2_weight: float, train: bool, rng,
                      prenet_rng) -> LossBreakdown:
        memory, enc_len = self.encoder.encode(batch.src, batch.src_len, train, rng)
        logits, feats, _ = self.translator.teacher_force(
            memory, enc_len, batch.phoneme_in, train, rng)
        # feature rows track phoneme_in (BOS first); the row predicting EOS
        # carries no acoustics, so the synthesizer sees n true phonemes
        n_ph = batch.phoneme_len - 1
        before, after, dur, _ = self.synthesizer.teacher_force(
            feats, n_ph, batch.tgt, batch.tgt_len, self.cfg.seconds_per_frame,
            train, rng, prenet_rng)

        ce, acc = phoneme_loss(logits, batch.phoneme_tgt, batch.phoneme_len,
                               smoothing)
        dur_l2 = duration_loss(dur, batch.tgt_len, self.cfg.seconds_per_frame)
        spec_after = spectrogram_loss(after, batch.tgt, batch.tgt_len)
        spec = ops.add(spectrogram_loss(before, batch.tgt, batch.tgt_len),
                       spec_after)
        total = ops.add(ops.add(ops.mul(ce, phoneme_weight),
                                ops.mul(dur_l2, duration_weight)),
                        ops.mul(spec, spec_weight))
        l2 = 0.0
        if l2_weight > 0.0:
            penalty = l2_penalty(self.params)
            l2 = float(penalty.data)
            total = ops.add(total, ops.mul(penalty, l2_weight))
        return LossBreakdown(total, float(ce.data), float(dur_l2.data),
                             float(spec.data), l2, acc, float(spec_after.data))

    def fingerprint(self) -> str:
        return hashlib.blake2b(repr(self.cfg).encode(), digest_size=8).hexdigest()

    def infer(self, src: np.ndarray, src_len: np.ndarray, max_len: int,
              prenet_rng, duration_scale: float = 1.0) -> InferResult:
        memory, enc_len = self.encoder.encode(src, src_len)
        ids, n_phon, feats, attn = self.translator.greedy(memory, enc_len, max_len)
        mel, frame_len, dur, _ = self.synthesizer.synthesize(
            feats, n_phon, self.cfg.seconds_per_frame, prenet_rng, duration_scale)
        return InferResult(ids, n_phon, mel, frame_len, dur, attn.data)


# --- losses -------------------------------------------------------------


def l2_penalty(params: Parameters) -> Tensor:
    """Sum of squared entries over matrix-shaped parameters (biases and
    gains are left unregularized)."""
    total = None
    for name in params.names():
        p = params.get(name)
        if p.data.ndim >= 2:
            term = ops.sum_(ops.square(p))
            total = term if total is None else ops.add(total, term)
    return total


def phoneme_loss(logits: Tensor, targets: np.ndarray, phoneme_len: np.ndarray,
                 smoothing: float) -> tuple[Tensor, float]:
    """Label-smoothed cross entropy over valid steps; also greedy accuracy.

    logits [B, L, V], targets [B, L] (phonemes then EOS then PAD); steps at
    or beyond phoneme_len are excluded from both numbers.
    """
    B, L, V = logits.data.shape
    mask = length_mask(phoneme_len, L)
    logp = ops.log_softmax(logits, axis=-1)
    picked = ops.index(logp, (np.arange(B)[:, None], np.arange(L)[None, :], targets))
    nll = ops.neg(ops.add(ops.mul(picked, 1.0 - smoothing),
                          ops.mul(ops.mean(logp, axis=-1), smoothing)))
    n_valid = int(mask.sum())
    ce = ops.mul(ops.sum_(ops.mul(nll, mask.astype(logits.data.dtype))), 1.0 / n_valid)
    hits = (logits.data.argmax(axis=-1) == targets) & mask
    return ce, float(hits.sum() / n_valid)


def duration_loss(duration_s: Tensor, tgt_len: np.ndarray,
                  seconds_per_frame: float) -> Tensor:
    """Mean squared error, in seconds^2, between summed predicted durations
    and true utterance lengths.  Per-phoneme timing is unsupervised."""
    total = ops.sum_(duration_s, axis=1)
    truth = tgt_len.astype(duration_s.data.dtype) * seconds_per_frame
    return ops.mean(ops.square(ops.sub(total, truth)))


def spectrogram_loss(pred: Tensor, tgt: np.ndarray, tgt_len: np.ndarray) -> Tensor:
    """Mean squared log-mel error over valid frames of pred [B, T, C]."""
    B, T, C = pred.data.shape
    mask = length_mask(tgt_len, T)[:, :, None].astype(pred.data.dtype)
    err = ops.mul(ops.square(ops.sub(pred, tgt.astype(pred.data.dtype))), mask)
    return ops.mul(ops.sum_(err), 1.0 / (float(mask.sum()) * C))


# --- optimizer ------------------------------------------------------------


def lr_at(step: int, peak: float, warmup_steps: int) -> float:
    """Linear warmup to peak, then inverse-sqrt decay (equal at the knee)."""
    s = max(int(step), 1)
    return peak * min(s / warmup_steps, (warmup_steps / s) ** 0.5)


class Adam:
    """Adam with bias correction and global-norm clipping.

    Regularization is not this class's business: the L2 term lives in the
    loss (l2_penalty), so its gradient arrives with everything else.  A step
    with any non-finite gradient is skipped entirely: no parameter or moment
    moves, and bias-correction time does not advance.
    """

    def __init__(self, params: Parameters, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9, clip_norm: float = 0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(params.get(n).data) for n in params.names()}
        self.v = {n: np.zeros_like(params.get(n).data) for n in params.names()}

    def step(self, lr: float) -> float | None:
        """Apply one update; returns the pre-clip gradient norm, or None if
        the step was skipped because a gradient was non-finite."""
        grads = {}
        sq_sum = 0.0
        for name in self.params.names():
            g = self.params.get(name).grad
            if not np.all(np.isfinite(g)):
                return None
            grads[name] = g
            sq_sum += float(np.vdot(g, g))
        norm = sq_sum ** 0.5
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if scale != 1.0:
                g = g * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p = self.params.get(name)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(path: str, params: Parameters, opt: Adam | None,
                    step: int, fingerprint: str = "") -> None:
    """Write parameters (plus optimizer moments if given) and counters."""
    entries = [(n, params.get(n).data) for n in params.names()]
    if opt is not None:
        entries += [(f"adam.m.{n}", opt.m[n]) for n in params.names()]
        entries += [(f"adam.v.{n}", opt.v[n]) for n in params.names()]
    meta = {"step": step, "adam_t": opt.t if opt is not None else 0}
    if fingerprint:
        meta["fingerprint"] = fingerprint
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
        f.write("".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8"))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        out = blob[off : off + n]
        off += n
        return out

    (n_entries,) = struct.unpack("<I", take(4))
    manifest = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        manifest.append((name, shape))
    entries = {}
    for name, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        entries[name] = arr.copy()
    meta = {}
    for line in blob[off:].decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        meta[k] = int(v) if v.lstrip("-").isdigit() else v
    if "step" not in meta:
        raise FormatError(f"{path}: checkpoint missing step counter")
    return entries, meta


def restore_params(params: Parameters, entries: dict[str, np.ndarray],
                   path: str = "checkpoint") -> None:
    for name in params.names():
        if name not in entries:
            raise FormatError(f"{path}: missing parameter {name}")
        p = params.get(name)
        if entries[name].shape != p.data.shape:
            raise FormatError(
                f"{path}: shape mismatch for {name}: "
                f"{entries[name].shape} vs {p.data.shape}")
        p.data[:] = entries[name]


def restore_training(model: Model, opt: Adam, path: str) -> int:
    """Load a full training state; returns the step to continue after."""
    entries, meta = load_checkpoint(path)
    saved_fp = meta.get("fingerprint")
    if saved_fp and saved_fp != model.fingerprint():
        raise ConfigError(
            f"{path}: checkpoint was trained under a different model config "
            f"(fingerprint {saved_fp}, expected {model.fingerprint()})")
    restore_params(model.params, entries, path)
    for name in model.params.names():
        for store, prefix in ((opt.m, "adam.m."), (opt.v, "adam.v.")):
            key = prefix + name
            if key not in entries:
                raise FormatError(f"{path}: missing optimizer state {key}")
            store[name][:] = entries[key]
    opt.t = meta.get("adam_t", meta["step"])
    return meta["step"]


def load_model(cfg: ModelConfig, path: str) -> Model:
    model = Model(cfg)
    entries, _ = load_checkpoint(path)
    restore_params(model.params, entries, path)
    return model


# --- the loop ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    peak_lr: float = 3.3e-3
    warmup_steps: int = 10000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 1.0
    l2_weight: float = 1e-6
    phoneme_weight: float = 10.0
    duration_weight: float = 1.0
    spec_weight: float = 1.0
    label_smoothing: float = 0.1
    seed: int = 0
    log_every: int = 20
    ckpt_every: int = 0  # 0 writes only the final checkpoint
    eval_every: int = 0  # 0 disables validation (and best-checkpoint tracking)


METRIC_FIELDS = ("step", "phoneme_ce", "duration_l2", "spec_loss", "total",
                 "lr", "accuracy")
VAL_FIELDS = ("step", "accuracy", "spec_loss", "duration_err_frames")


def train_step(model: Model, batch: Batch, opt: Adam, cfg: TrainConfig,
               step: int) -> tuple[LossBreakdown, float | None]:
    """One optimization step; returns the losses and the grad norm (None if
    the update was skipped for non-finite values)."""
    rng = stream(cfg.seed, "dropout", step)
    prenet_rng = stream(cfg.seed, "prenet", step)
    with Tape() as tape:
        lb = model.forward_train(batch, cfg.label_smoothing, cfg.phoneme_weight,
                                 cfg.duration_weight, cfg.spec_weight,
                                 cfg.l2_weight, train=True, rng=rng,
                                 prenet_rng=prenet_rng)
        if not np.isfinite(lb.total.data):
            return lb, None
        model.params.zero_grads()
        tape.backward(lb.total)
    return lb, opt.step(lr_at(step, cfg.peak_lr, cfg.warmup_steps))


def validate(model: Model, batch: Batch, cfg: TrainConfig,
             step: int) -> LossBreakdown:
    """Teacher-forced metrics with regularizers off (prenet noise stays on,
    as it does at inference, but on a stream all its own)."""
    return model.forward_train(
        batch, cfg.label_smoothing, cfg.phoneme_weight, cfg.duration_weight,
        cfg.spec_weight, 0.0, train=False, rng=None,
        prenet_rng=stream(cfg.seed, "val-prenet", step))


def train(model: Model, feeder: BatchFeeder, cfg: TrainConfig, out_dir: str,
          resume: str | None = None, eval_feeder: BatchFeeder | None = None,
          log_fn=None) -> dict:
    """Run (or continue) a training job, writing metrics and checkpoints.

    Batches and dropout depend only on (cfg.seed, step), so a resumed run
    retraces the interrupted one exactly.  With an eval_feeder and
    eval_every set, held-out teacher-forced metrics go to val_metrics.csv
    and the best-accuracy state is kept as ckpt_best.ckpt.
    """
    os.makedirs(out_dir, exist_ok=True)
    opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)
    start = 0
    if resume is not None:
        start = restore_training(model, opt, resume)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    val_path = os.path.join(out_dir, "val_metrics.csv")
    mode = "a" if (resume is not None and os.path.exists(metrics_path)) else "w"
    fp = model.fingerprint()
    n_skipped = 0
    best_acc = -1.0
    lb = None
    do_eval = eval_feeder is not None and cfg.eval_every > 0
    with open(metrics_path, mode, newline="") as mf, \
            open(val_path, mode, newline="") as vf:
        writer = csv.writer(mf)
        val_writer = csv.writer(vf)
        if mode == "w":
            writer.writerow(METRIC_FIELDS)
            if do_eval:
                val_writer.writerow(VAL_FIELDS)
        for step in range(start + 1, cfg.steps + 1):
            batch = feeder.batch(step)
            lb, norm = train_step(model, batch, opt, cfg, step)
            if norm is None:
                n_skipped += 1
            if step % cfg.log_every == 0 or step == cfg.steps:
                lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps)
                writer.writerow([step, f"{lb.phoneme_ce:.6f}",
                                 f"{lb.duration_l2:.6f}", f"{lb.spec_loss:.6f}",
                                 f"{float(lb.total.data):.6f}", f"{lr:.6g}",
                                 f"{lb.accuracy:.4f}"])
                mf.flush()
                if log_fn is not None:
                    log_fn(f"step {step}/{cfg.steps} "
                           f"ce {lb.phoneme_ce:.4f} dur {lb.duration_l2:.4f} "
                           f"spec {lb.spec_loss:.4f} acc {lb.accuracy:.3f}")
            if do_eval and (step % cfg.eval_every == 0 or step == cfg.steps):
                vb = validate(model, eval_feeder.batch(step), cfg, step)
                err_frames = (vb.duration_l2 ** 0.5) / model.cfg.seconds_per_frame
                val_writer.writerow([step, f"{vb.accuracy:.4f}",
                                     f"{vb.spec_loss:.6f}", f"{err_frames:.3f}"])
                vf.flush()
                if vb.accuracy > best_acc:
                    best_acc = vb.accuracy
                    save_checkpoint(os.path.join(out_dir, "ckpt_best.ckpt"),
                                    model.params, opt, step, fp)
            if cfg.ckpt_every and step % cfg.ckpt_every == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{step:07d}.ckpt"),
                                model.params, opt, step, fp)
    final = os.path.join(out_dir, f"ckpt_{cfg.steps:07d}.ckpt")
    save_checkpoint(final, model.params, opt, cfg.steps, fp)
    if not do_eval and os.path.exists(val_path):
        os.remove(val_path)
    return {"checkpoint": final, "metrics": metrics_path,
            "steps": cfg.steps, "skipped": n_skipped,
            "best_accuracy": best_acc if do_eval else None,
            "last": None if lb is None else {
                "phoneme_ce": lb.phoneme_ce, "duration_l2": lb.duration_l2,
                "spec_loss": lb.spec_loss, "accuracy": lb.accuracy}}
