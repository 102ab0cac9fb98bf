"""Synthetic paired-speech corpus, on-disk dataset layout, and batching.

The toy language is built so a desk-scale model can actually learn it while
still exercising every interface of the real task: utterances are short
token sequences, "translation" is a deterministic adjacent-pair swap plus a
token relabeling (so output order is not monotonic in input order), and
each token renders as a harmonic complex with a token-specific spectral
envelope on a speaker-specific voice (f0, tilt, vibrato).  The same speaker
renders both sides of a pair, which is what makes voice preservation a
measurable property downstream.

Vocabulary convention everywhere: 0 = padding, 1 = BOS, 2 = EOS, and token
k maps to phoneme id k + 3.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .numerics.rng import stream
from .signal import LOG_FLOOR, MelConfig, analyze, load_mel, save_mel

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
PHONEME_OFFSET = 3

EDGE_RAMP_MS = 10.0  # half-cosine fade inside each token's boundary


@dataclass(frozen=True)
class ToyGrammar:
    n_tokens: int = 12
    min_len: int = 4
    max_len: int = 7

    @property
    def vocab_size(self) -> int:
        return PHONEME_OFFSET + self.n_tokens

    def duration_ms(self, token: int) -> float:
        return 140.0 + 17.0 * (token % 8)

    def relabel(self, token: int) -> int:
        # 5 is coprime with any n_tokens not divisible by 5, so this is a
        # bijection for the default 12
        return (5 * token + 3) % self.n_tokens

    def translate(self, tokens: np.ndarray) -> np.ndarray:
        """Swap adjacent pairs, then relabel; length is preserved."""
        tokens = np.asarray(tokens)
        out = tokens.copy()
        for i in range(0, len(tokens) - 1, 2):
            out[i], out[i + 1] = tokens[i + 1], tokens[i]
        return np.array([self.relabel(int(t)) for t in out], dtype=np.int64)

    def sample_sentence(self, rng: np.random.Generator) -> np.ndarray:
        length = int(rng.integers(self.min_len, self.max_len + 1))
        return rng.integers(0, self.n_tokens, size=length).astype(np.int64)

    def harmonic_profile(self, token: int, n_harmonics: int) -> np.ndarray:
        """Token timbre: one formant-like bump plus a 1/h skirt."""
        h = np.arange(1, n_harmonics + 1, dtype=np.float64)
        peak = 2.0 + (3.0 * token) % 9.0
        return np.exp(-((h - peak) ** 2) / 8.0) + 0.05 / h


@dataclass(frozen=True)
class SpeakerProfile:
    name: str
    f0_hz: float
    tilt_db_per_octave: float
    vibrato_hz: float = 5.0
    vibrato_depth: float = 0.01


def default_speakers() -> list[SpeakerProfile]:
    return [
        SpeakerProfile("low", 115.0, -3.0, vibrato_hz=4.7),
        SpeakerProfile("high", 205.0, -7.0, vibrato_hz=5.6),
    ]


def render_tokens(tokens, grammar: ToyGrammar, speaker: SpeakerProfile,
                  sample_rate: int, rng: np.random.Generator,
                  max_harmonics: int = 24) -> np.ndarray:
    """Tokens -> waveform whose length is exactly the sum of token durations.

    One phase-continuous f0 track runs through the utterance; each token
    contributes its own harmonic amplitude profile, faded in and out with
    half-cosine ramps that live entirely inside the token.
    """
    durs = np.array([round(grammar.duration_ms(int(t)) * sample_rate / 1000.0)
                     for t in tokens], dtype=np.int64)
    total = int(durs.sum())
    t = np.arange(total) / sample_rate
    f0_inst = speaker.f0_hz * (
        1.0 + speaker.vibrato_depth * np.sin(
            2.0 * np.pi * speaker.vibrato_hz * t + rng.uniform(0.0, 2.0 * np.pi)))
    phase = 2.0 * np.pi * np.cumsum(f0_inst) / sample_rate
    n_harm = min(max_harmonics, int(0.95 * (sample_rate / 2) / speaker.f0_hz))
    tilt = 10.0 ** (speaker.tilt_db_per_octave
                    * np.log2(np.arange(1, n_harm + 1)) / 20.0)

    ramp = round(EDGE_RAMP_MS * sample_rate / 1000.0)
    amp_track = np.zeros((total, n_harm))
    pos = 0
    for tok, d in zip(tokens, durs):
        env = np.ones(int(d))
        r = min(ramp, int(d) // 2)
        fade = 0.5 * (1.0 - np.cos(np.pi * np.arange(r) / r))
        env[:r] = fade
        env[int(d) - r:] = fade[::-1]
        amps = grammar.harmonic_profile(int(tok), n_harm) * tilt
        amp_track[pos : pos + int(d)] = env[:, None] * amps[None, :]
        pos += int(d)

    x = np.zeros(total)
    for h in range(1, n_harm + 1):
        x += amp_track[:, h - 1] * np.sin(h * phase)
    peak = np.abs(x).max()
    return (0.8 * x / peak if peak > 0 else x).astype(np.float64)


# ---------------------------------------------------------------------------
# example generation and on-disk dataset


@dataclass
class Example:
    """One utterance pair as the model sees it."""

    id: str
    src_mel: np.ndarray  # [T_s, C_in] float32 log-mel
    tgt_mel: np.ndarray  # [T_t, C_out] float32 log-mel
    phonemes: np.ndarray  # [L] int64 target phoneme ids (offset applied, no BOS/EOS)
    speaker: str


def split_of(tokens: np.ndarray) -> str:
    """Deterministic 80/20 content split, disjoint by sentence identity."""
    digest = hashlib.blake2b(np.asarray(tokens, dtype=np.int64).tobytes(),
                             digest_size=2).digest()
    return "eval" if digest[0] % 5 == 4 else "train"


def gen_pair(idx: int, grammar: ToyGrammar, speakers: list[SpeakerProfile],
             seed: int, in_cfg: MelConfig, out_cfg: MelConfig
             ) -> tuple[Example, str, np.ndarray, np.ndarray]:
    """Returns (example, split, src_wav, tgt_wav) for generation index idx."""
    rng = stream(seed, "example", idx)
    src_tokens = grammar.sample_sentence(rng)
    tgt_tokens = grammar.translate(src_tokens)
    speaker = speakers[int(rng.integers(len(speakers)))]
    src_wav = render_tokens(src_tokens, grammar, speaker, in_cfg.sample_rate, rng)
    tgt_wav = render_tokens(tgt_tokens, grammar, speaker, out_cfg.sample_rate, rng)
    ex = Example(
        id=f"ex{idx:05d}",
        src_mel=analyze(src_wav, in_cfg),
        tgt_mel=analyze(tgt_wav, out_cfg),
        phonemes=tgt_tokens + PHONEME_OFFSET,
        speaker=speaker.name,
    )
    return ex, split_of(src_tokens), src_wav, tgt_wav


def gen_dataset(root, n_train: int, n_eval: int, grammar: ToyGrammar,
                speakers: list[SpeakerProfile], seed: int,
                in_cfg: MelConfig, out_cfg: MelConfig) -> dict[str, int]:
    """Write train/ and eval/ datasets under root; returns counts written."""
    root = Path(root)
    counts = {"train": 0, "eval": 0}
    quota = {"train": n_train, "eval": n_eval}
    rows = {"train": [], "eval": []}
    for split in counts:
        (root / split / "mels").mkdir(parents=True, exist_ok=True)
    idx = 0
    while any(counts[s] < quota[s] for s in counts):
        ex, split, _, _ = gen_pair(idx, grammar, speakers, seed, in_cfg, out_cfg)
        idx += 1
        if counts[split] >= quota[split]:
            continue
        mel_dir = root / split / "mels"
        save_mel(mel_dir / f"{ex.id}.src.mel", ex.src_mel, in_cfg)
        save_mel(mel_dir / f"{ex.id}.tgt.mel", ex.tgt_mel, out_cfg)
        rows[split].append("\t".join([
            ex.id,
            f"mels/{ex.id}.src.mel",
            f"mels/{ex.id}.tgt.mel",
            " ".join(str(int(p)) for p in ex.phonemes),
            ex.speaker,
        ]))
        counts[split] += 1
    for split in counts:
        (root / split / "index.tsv").write_text("\n".join(rows[split]) + "\n",
                                                encoding="utf-8")
    return counts


def load_dataset(path) -> list[Example]:
    """Read an index.tsv directory written by gen_dataset."""
    path = Path(path)
    index = path / "index.tsv"
    if not index.exists():
        raise DataError(f"no index.tsv under {path}")
    examples = []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{index}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        ex_id, src_rel, tgt_rel, phon_text, speaker = parts
        src_mel, _ = load_mel(path / src_rel)
        tgt_mel, _ = load_mel(path / tgt_rel)
        phonemes = np.array([int(p) for p in phon_text.split()], dtype=np.int64)
        if phonemes.size and phonemes.min() < PHONEME_OFFSET:
            raise FormatError(f"{index}:{lineno}: phoneme id below offset {PHONEME_OFFSET}")
        examples.append(Example(ex_id, src_mel, tgt_mel, phonemes, speaker))
    if not examples:
        raise DataError(f"{index} lists no examples")
    return examples


# ---------------------------------------------------------------------------
# augmentations


def spec_augment(mel: np.ndarray, rng: np.random.Generator, n_freq_blocks: int = 2,
                 n_time_blocks: int = 10, freq_ratio: float = 0.33,
                 time_ratio: float = 0.05) -> np.ndarray:
    """Blank random frequency bands and time spans with the silence value.

    Block widths draw uniformly from [0, floor(ratio * dim)]; zero-width
    draws are legal no-ops.  Returns a new array.
    """
    out = mel.copy()
    T, C = mel.shape
    fill = np.float32(np.log(LOG_FLOOR))
    max_f = int(freq_ratio * C)
    max_t = int(time_ratio * T)
    for _ in range(n_freq_blocks):
        w = int(rng.integers(0, max_f + 1))
        if w:
            s = int(rng.integers(0, C - w + 1))
            out[:, s : s + w] = fill
    for _ in range(n_time_blocks):
        w = int(rng.integers(0, max_t + 1))
        if w:
            s = int(rng.integers(0, T - w + 1))
            out[s : s + w, :] = fill
    return out


def concat_examples(a: Example, b: Example) -> Example:
    """Row-concatenate two utterance pairs into one longer training example."""
    return Example(
        id=f"{a.id}+{b.id}",
        src_mel=np.concatenate([a.src_mel, b.src_mel], axis=0),
        tgt_mel=np.concatenate([a.tgt_mel, b.tgt_mel], axis=0),
        phonemes=np.concatenate([a.phonemes, b.phonemes]),
        speaker=f"{a.speaker}+{b.speaker}",
    )


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded model food.  Padding: mel rows at log silence, phoneme id 0."""

    ids: list[str]
    speakers: list[str]
    src: np.ndarray  # [B, T_s, C_in] float32
    src_len: np.ndarray  # [B] int64 valid frame counts
    phoneme_in: np.ndarray  # [B, L] int64, BOS + phonemes
    phoneme_tgt: np.ndarray  # [B, L] int64, phonemes + EOS
    phoneme_len: np.ndarray  # [B] int64 valid steps (len + 1)
    tgt: np.ndarray  # [B, T_t, C_out] float32
    tgt_len: np.ndarray  # [B] int64

    @property
    def size(self) -> int:
        return len(self.ids)


def make_batch(examples: list[Example]) -> Batch:
    B = len(examples)
    fill = np.float32(np.log(LOG_FLOOR))
    T_s = max(len(e.src_mel) for e in examples)
    T_t = max(len(e.tgt_mel) for e in examples)
    L = max(len(e.phonemes) for e in examples) + 1  # room for BOS/EOS
    C_in = examples[0].src_mel.shape[1]
    C_out = examples[0].tgt_mel.shape[1]

    src = np.full((B, T_s, C_in), fill, dtype=np.float32)
    tgt = np.full((B, T_t, C_out), fill, dtype=np.float32)
    phoneme_in = np.full((B, L), PAD_ID, dtype=np.int64)
    phoneme_tgt = np.full((B, L), PAD_ID, dtype=np.int64)
    src_len = np.zeros(B, dtype=np.int64)
    tgt_len = np.zeros(B, dtype=np.int64)
    phoneme_len = np.zeros(B, dtype=np.int64)
    for i, e in enumerate(examples):
        src[i, : len(e.src_mel)] = e.src_mel
        tgt[i, : len(e.tgt_mel)] = e.tgt_mel
        n = len(e.phonemes)
        phoneme_in[i, 0] = BOS_ID
        phoneme_in[i, 1 : n + 1] = e.phonemes
        phoneme_tgt[i, :n] = e.phonemes
        phoneme_tgt[i, n] = EOS_ID
        src_len[i] = len(e.src_mel)
        tgt_len[i] = len(e.tgt_mel)
        phoneme_len[i] = n + 1
    return Batch([e.id for e in examples], [e.speaker for e in examples],
                 src, src_len, phoneme_in, phoneme_tgt, phoneme_len, tgt, tgt_len)


@dataclass
class FeederConfig:
    batch_size: int = 8
    concat_prob: float = 0.0
    augment: bool = False
    n_freq_blocks: int = 2
    n_time_blocks: int = 10
    freq_ratio: float = 0.33
    time_ratio: float = 0.05


class BatchFeeder:
    """Stateless batch source: batch(step) depends only on (seed, step).

    Sampling is i.i.d. with replacement, so a resumed run at step k sees
    exactly the batch the original run would have seen.
    """

    def __init__(self, examples: list[Example], cfg: FeederConfig, seed: int):
        if not examples:
            raise DataError("feeder needs at least one example")
        self.examples = examples
        self.cfg = cfg
        self.seed = seed

    def batch(self, step: int) -> Batch:
        rng = stream(self.seed, "batch", step)
        n = len(self.examples)
        chosen = []
        for _ in range(self.cfg.batch_size):
            ex = self.examples[int(rng.integers(n))]
            if self.cfg.concat_prob > 0 and rng.random() < self.cfg.concat_prob:
                ex = concat_examples(ex, self.examples[int(rng.integers(n))])
            if self.cfg.augment:
                ex = Example(ex.id, spec_augment(
                    ex.src_mel, rng, self.cfg.n_freq_blocks, self.cfg.n_time_blocks,
                    self.cfg.freq_ratio, self.cfg.time_ratio),
                    ex.tgt_mel, ex.phonemes, ex.speaker)
            chosen.append(ex)
        return make_batch(chosen)
