"""Waveform <-> log-mel spectrogram plumbing.

Everything here is deterministic numpy with no autodiff involvement: the
model consumes and produces log-mel frames, and this module owns the
analysis/synthesis contract around them, including the portable mel file
format used by the CLI tools.

Frame-count law used throughout: a signal of n samples analyzed with hop h
yields T = ceil(n / h) frames, each centered at t * h samples.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, DataError, FormatError

LOG_FLOOR = 1e-5  # linear mel power below this clamps before the log


@dataclass(frozen=True)
class MelConfig:
    """Analysis geometry for one log-mel representation.

    frame/hop are in milliseconds; frequencies in Hz.  FFT size is the next
    power of two at or above the frame length in samples.
    """

    sample_rate: int = 16000
    n_mels: int = 80
    fmin: float = 125.0
    fmax: float = 7600.0
    frame_ms: float = 25.0
    hop_ms: float = 10.0

    def __post_init__(self):
        if self.fmax > self.sample_rate / 2:
            raise ConfigError(
                f"mel fmax {self.fmax} exceeds Nyquist {self.sample_rate / 2}")
        if self.hop_ms <= 0 or self.frame_ms < self.hop_ms:
            raise ConfigError(f"bad frame/hop: {self.frame_ms}/{self.hop_ms} ms")

    @property
    def frame_length(self) -> int:
        return round(self.sample_rate * self.frame_ms / 1000.0)

    @property
    def hop_length(self) -> int:
        return round(self.sample_rate * self.hop_ms / 1000.0)

    @property
    def n_fft(self) -> int:
        n = 1
        while n < self.frame_length:
            n *= 2
        return n

    @property
    def seconds_per_frame(self) -> float:
        return self.hop_length / self.sample_rate

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "MelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"bad mel config line: {line!r}")
            key, val = line.split("=", 1)
            if key not in kinds:
                raise FormatError(f"unknown mel config key: {key!r}")
            kwargs[key] = int(val) if kinds[key] == "int" else float(val)
        missing = set(kinds) - set(kwargs)
        if missing:
            raise FormatError(f"mel config missing keys: {sorted(missing)}")
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM mono)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Returns (float32 samples in [-1, 1], sample_rate)."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        raw = f.readframes(f.getnframes())
        sr = f.getframerate()
    x = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return x, sr


def write_wav(path, x: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    pcm = (pcm * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# STFT / ISTFT


def _window(frame_length: int) -> np.ndarray:
    # periodic Hann; strictly positive interior keeps overlap-add well posed
    n = np.arange(frame_length)
    return (0.5 * (1.0 - np.cos(2.0 * np.pi * n / frame_length))).astype(np.float64)


def _frame_signal(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """[n] -> frames [T, frame_length] centered at t * hop."""
    n = len(x)
    hop, frame = cfg.hop_length, cfg.frame_length
    T = max(1, -(-n // hop))
    pad_left = frame // 2
    pad_right = max(0, (T - 1) * hop + frame - n - pad_left)
    if n >= 2:
        xp = np.pad(x.astype(np.float64), (pad_left, pad_right), mode="reflect")
    else:
        xp = np.pad(x.astype(np.float64), (pad_left, pad_right))
    idx = np.arange(frame)[None, :] + hop * np.arange(T)[:, None]
    return xp[idx]


def stft(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Complex spectrogram [T, n_fft // 2 + 1], T = ceil(len(x) / hop)."""
    frames = _frame_signal(x, cfg) * _window(cfg.frame_length)
    return np.fft.rfft(frames, n=cfg.n_fft, axis=-1)


def istft(spec: np.ndarray, cfg: MelConfig, length: int | None = None) -> np.ndarray:
    """Least-squares overlap-add inverse of ``stft``.

    spec [T, n_fft // 2 + 1]; returns float64 samples of ``length``
    (default T * hop).
    """
    T = spec.shape[0]
    hop, frame = cfg.hop_length, cfg.frame_length
    if length is None:
        length = T * hop
    w = _window(frame)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1)[:, :frame] * w
    pad_left = frame // 2
    total = pad_left + (T - 1) * hop + frame
    acc = np.zeros(total)
    wsum = np.zeros(total)
    for t in range(T):
        start = t * hop
        acc[start : start + frame] += frames[t]
        wsum[start : start + frame] += w * w
    out = acc / np.maximum(wsum, 1e-10)
    return out[pad_left : pad_left + length]


# ---------------------------------------------------------------------------
# mel filterbank and log-mel analysis


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters [n_mels, n_fft // 2 + 1], unit peak, on the
    log-compressed frequency scale between fmin and fmax."""
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def analyze(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Waveform -> log-mel [T, n_mels] (natural log, floor LOG_FLOOR)."""
    mag = np.abs(stft(x, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)


def mel_to_magnitude(logmel: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Approximate linear magnitude [T, n_bins] from log-mel [T, n_mels].

    Each mel channel's energy is spread back over its triangle, triangle
    normalized to unit sum, so a flat mel maps to a roughly flat spectrum.
    """
    fb = mel_filterbank(cfg)
    weights = fb / np.maximum(fb.sum(axis=1, keepdims=True), 1e-12)
    mel = np.exp(np.asarray(logmel, dtype=np.float64))
    return mel @ weights


def griffin_lim(mag: np.ndarray, cfg: MelConfig, n_iters: int = 60,
                seed: int = 0, momentum: float = 0.99) -> tuple[np.ndarray, list[float]]:
    """Phase recovery by overrelaxed alternating projections.

    mag [T, n_bins] target magnitudes.  Each iteration extrapolates the last
    two consistency projections by ``momentum``; an extrapolated step that
    would raise the spectral convergence error is discarded for the plain
    projection, which always descends, so the returned per-iteration curve
    is non-increasing by construction.  momentum=0 is the classic recursion.
    Returns (waveform of T * hop samples, curve of length n_iters).
    """
    mag = np.asarray(mag, dtype=np.float64)
    if not np.all(np.isfinite(mag)):
        raise DataError("griffin_lim needs finite magnitudes")
    denom = max(np.linalg.norm(mag), 1e-12)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    length = mag.shape[0] * cfg.hop_length

    def project(spectrum):
        """Enforce magnitudes, then STFT consistency; also report the error."""
        wave = istft(mag * np.exp(1j * np.angle(spectrum)), cfg, length)
        spec = stft(wave, cfg)
        return wave, spec, float(np.linalg.norm(np.abs(spec) - mag) / denom)

    x, spec, err = project(mag * phase)
    curve = [err]
    prev = spec
    for _ in range(n_iters - 1):
        x2, s2, e2 = project(spec + momentum * (spec - prev))
        prev = spec
        if e2 > err:
            x2, s2, e2 = project(spec)
            prev = s2  # restart the extrapolation from the plain iterate
        x, spec, err = x2, s2, e2
        curve.append(err)
    x = istft(mag * np.exp(1j * np.angle(spec)), cfg, length)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return x.astype(np.float32), curve


def mel_to_audio(logmel: np.ndarray, cfg: MelConfig, n_iters: int = 60,
                 seed: int = 0) -> np.ndarray:
    x, _ = griffin_lim(mel_to_magnitude(logmel, cfg), cfg, n_iters, seed)
    return x


# ---------------------------------------------------------------------------
# portable mel file format

MEL_MAGIC = b"T2MEL1"


def save_mel(path, logmel: np.ndarray, cfg: MelConfig) -> None:
    """Binary layout: magic, LE u32 frame count, LE u32 channel count,
    row-major float32 frames, then the config as UTF-8 key=value lines."""
    arr = np.ascontiguousarray(logmel, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError(f"mel array must be 2-D, got shape {arr.shape}")
    if arr.shape[1] != cfg.n_mels:
        raise FormatError(f"mel has {arr.shape[1]} channels, config says {cfg.n_mels}")
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())
        f.write(cfg.to_text().encode("utf-8"))


def load_mel(path) -> tuple[np.ndarray, MelConfig]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MEL_MAGIC)] != MEL_MAGIC:
        raise FormatError(f"{path}: bad magic, not a mel file")
    off = len(MEL_MAGIC)
    if len(blob) < off + 8:
        raise FormatError(f"{path}: truncated header")
    T, C = struct.unpack_from("<II", blob, off)
    off += 8
    nbytes = 4 * T * C
    if len(blob) < off + nbytes:
        raise FormatError(f"{path}: truncated payload ({len(blob) - off} of {nbytes} bytes)")
    arr = np.frombuffer(blob, dtype="<f4", count=T * C, offset=off).reshape(T, C).copy()
    cfg = MelConfig.from_text(blob[off + nbytes :].decode("utf-8"))
    if cfg.n_mels != C:
        raise FormatError(f"{path}: channel count {C} disagrees with config {cfg.n_mels}")
    return arr, cfg
