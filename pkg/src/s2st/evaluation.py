"""Objective evaluation: DTW alignment, over-generation ratio, speaker statistics, BLEU.

Everything here is pure and deterministic. Frame distances floor-shift each
log-mel row so silence becomes a genuine zero vector and spectral shape, not
absolute level, drives the cosine. The over-generation metric (``udr``) counts
prediction frames stuck in long reference stalls of the DTW path; absolute
values are only meaningful for comparing systems on the same references.
"""

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .signal import LOG_FLOOR

SILENCE = float(np.log(LOG_FLOOR))


@dataclass
class DtwPath:
    """Monotone alignment from (0, 0) to (T_pred-1, T_ref-1).

    pairs: list of (pred_frame, ref_frame), consecutive deltas in
        {(1, 0), (0, 1), (1, 1)}.
    cost: summed frame distances along the path.
    """

    pairs: list
    cost: float


@dataclass
class UdrReport:
    unaligned_frames: int
    total_frames: int
    udr: float
    threshold_seconds: float


@dataclass
class CorpusUdr:
    pooled: UdrReport
    per_utterance_mean: float


@dataclass
class SpeakerTurnReport:
    """Cosines of the prediction's lead/trail segments against two sources."""

    lead_a: float
    lead_b: float
    trail_a: float
    trail_b: float


def _shifted(mel):
    """Log mel [T, C] -> floor-shifted float64 copy; silent rows become zero."""
    return np.maximum(np.asarray(mel, dtype=np.float64) - SILENCE, 0.0)


def _distance_matrix(pred_mel, ref_mel):
    """Pairwise 1 - cosine over floor-shifted rows, [T_pred, T_ref].

    Silent frames are zero vectors: distance 1 against voiced frames and 0
    against other silent frames, so identical inputs still align for free.
    """
    a = _shifted(pred_mel)
    b = _shifted(ref_mel)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    sim = a @ b.T
    denom = np.outer(na, nb)
    voiced = denom > 0.0
    sim[voiced] /= denom[voiced]
    sim[~voiced] = 0.0
    sim[np.outer(na == 0.0, nb == 0.0)] = 1.0
    return 1.0 - sim


def dtw_align(pred_mel, ref_mel):
    """Minimal-cost monotone alignment of two log mels.

    Ties in the backtrack prefer the diagonal, so identical inputs produce
    exactly the diagonal path.
    """
    pred_mel = np.asarray(pred_mel)
    ref_mel = np.asarray(ref_mel)
    if pred_mel.ndim != 2 or ref_mel.ndim != 2 or 0 in pred_mel.shape or 0 in ref_mel.shape:
        raise DataError("alignment needs two nonempty [frames, channels] mels")
    if pred_mel.shape[1] != ref_mel.shape[1]:
        raise DataError(
            f"channel mismatch: {pred_mel.shape[1]} vs {ref_mel.shape[1]}")
    dist = _distance_matrix(pred_mel, ref_mel).tolist()
    tp = len(dist)
    tr = len(dist[0])
    # plain-list DP: scalar indexing dominates here and lists beat ndarrays
    first = dist[0]
    row = [first[0]]
    for j in range(1, tr):
        row.append(row[j - 1] + first[j])
    acc = [row]
    for i in range(1, tp):
        di = dist[i]
        prev = acc[i - 1]
        row = [prev[0] + di[0]]
        for j in range(1, tr):
            row.append(di[j] + min(prev[j - 1], prev[j], row[j - 1]))
        acc.append(row)
    i = tp - 1
    j = tr - 1
    pairs = [(i, j)]
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag = acc[i - 1][j - 1]
            up = acc[i - 1][j]
            left = acc[i][j - 1]
            best = min(diag, up, left)
            if diag == best:
                i -= 1
                j -= 1
            elif up == best:
                i -= 1
            else:
                j -= 1
        pairs.append((i, j))
    pairs.reverse()
    return DtwPath(pairs=pairs, cost=float(acc[-1][-1]))


def udr(pred_mel, ref_mel, seconds_per_frame, threshold_seconds=1.0):
    """Unaligned duration ratio of a prediction against its reference.

    Maximal runs of consecutive (1, 0) path steps are over-generated speech
    (the prediction advances while the reference stalls); a run strictly
    longer than threshold_seconds counts all its frames as unaligned.
    """
    path = dtw_align(pred_mel, ref_mel)
    limit = threshold_seconds / seconds_per_frame
    unaligned = 0
    run = 0
    steps = ((b[0] - a[0], b[1] - a[1]) for a, b in zip(path.pairs, path.pairs[1:]))
    for step in list(steps) + [(1, 1)]:  # sentinel flushes the trailing run
        if step == (1, 0):
            run += 1
        else:
            if run > limit:
                unaligned += run
            run = 0
    total = int(np.asarray(pred_mel).shape[0])
    return UdrReport(unaligned_frames=unaligned, total_frames=total,
                     udr=unaligned / total, threshold_seconds=threshold_seconds)


def corpus_udr(pred_mels, ref_mels, seconds_per_frame, threshold_seconds=1.0):
    """Pool unaligned frames corpus-wide; also report the per-utterance mean."""
    if len(pred_mels) != len(ref_mels) or not pred_mels:
        raise DataError("corpus udr needs equal-length nonempty mel lists")
    reports = [udr(p, r, seconds_per_frame, threshold_seconds)
               for p, r in zip(pred_mels, ref_mels)]
    unaligned = sum(r.unaligned_frames for r in reports)
    total = sum(r.total_frames for r in reports)
    pooled = UdrReport(unaligned_frames=unaligned, total_frames=total,
                       udr=unaligned / total, threshold_seconds=threshold_seconds)
    return CorpusUdr(pooled=pooled,
                     per_utterance_mean=float(np.mean([r.udr for r in reports])))


def speaker_embedding(mel):
    """Unit-norm [2C] vector: per-channel mean and std over voiced frames."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise DataError("speaker statistics need a nonempty [frames, channels] mel")
    voiced = mel[np.any(mel > SILENCE + 1e-9, axis=1)]
    if voiced.shape[0] == 0:
        raise DataError("all frames silent; no speaker statistics")
    v = np.concatenate([voiced.mean(axis=0), voiced.std(axis=0)])
    return v / np.linalg.norm(v)


def _cosine(u, v):
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def affinity_matrix(embs_a, embs_b):
    """M[i][j] = cosine(embs_a[i], embs_b[j])."""
    a = np.asarray(embs_a, dtype=np.float64)
    b = np.asarray(embs_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError(f"embedding shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    sim = a @ b.T
    denom = np.outer(na, nb)
    voiced = denom > 0.0
    sim[voiced] /= denom[voiced]
    sim[~voiced] = 0.0
    return sim


def speaker_turn_similarity(pred_mel, src_a_mel, src_b_mel, seconds_per_frame,
                            segment_seconds=1.6):
    """Voice similarity of the prediction's lead/trail segments to each source."""
    pred_mel = np.asarray(pred_mel)
    seg = int(round(segment_seconds / seconds_per_frame))
    if seg < 1:
        raise DataError("segment shorter than one frame")
    if pred_mel.shape[0] < 2 * seg:
        raise DataError(
            f"prediction of {pred_mel.shape[0]} frames cannot hold two "
            f"{seg}-frame segments; discard this item")
    lead = speaker_embedding(pred_mel[:seg])
    trail = speaker_embedding(pred_mel[-seg:])
    emb_a = speaker_embedding(src_a_mel)
    emb_b = speaker_embedding(src_b_mel)
    return SpeakerTurnReport(lead_a=_cosine(lead, emb_a), lead_b=_cosine(lead, emb_b),
                             trail_a=_cosine(trail, emb_a), trail_b=_cosine(trail, emb_b))


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def phoneme_bleu(preds, refs, max_order=4):
    """Corpus-level BLEU over phoneme id sequences, in [0, 1].

    Modified n-gram precisions up to max_order, geometric mean, brevity
    penalty exp(1 - r/c) for short candidates. No smoothing: a zero precision
    at any order zeroes the score.
    """
    if len(preds) != len(refs):
        raise DataError(f"corpus size mismatch: {len(preds)} vs {len(refs)}")
    if not preds:
        raise DataError("empty evaluation corpus")
    matched = [0] * max_order
    totals = [0] * max_order
    cand_len = 0
    ref_len = 0
    for pred, ref in zip(preds, refs):
        pred = tuple(int(x) for x in pred)
        ref = tuple(int(x) for x in ref)
        cand_len += len(pred)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            ref_grams = _ngrams(ref, n)
            totals[n - 1] += max(len(pred) - n + 1, 0)
            matched[n - 1] += sum(min(count, ref_grams[gram])
                                  for gram, count in _ngrams(pred, n).items())
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, totals)) / max_order
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return float(brevity * math.exp(log_precision))


def _write_pgm(path, values):
    if values.ndim != 2 or values.size == 0:
        raise DataError("image must be a nonempty 2-d array")
    height, width = values.shape
    with open(path, "wb") as handle:
        handle.write(b"P5\n%d %d\n255\n" % (width, height))
        handle.write(values.tobytes())


def write_affinity_pgm(path, matrix):
    """8-bit PGM with cosines mapped by value = round(255 * (cos + 1) / 2)."""
    m = np.asarray(matrix, dtype=np.float64)
    _write_pgm(path, np.clip(np.rint(255.0 * (m + 1.0) / 2.0), 0, 255).astype(np.uint8))


def write_heatmap_pgm(path, matrix):
    """8-bit PGM of nonnegative weights, scaled so the global max maps to 255."""
    m = np.asarray(matrix, dtype=np.float64)
    top = m.max() if m.size else 0.0
    if top > 0.0:
        m = m / top
    _write_pgm(path, np.clip(np.rint(255.0 * m), 0, 255).astype(np.uint8))
