"""Operator entry point: data generation, training, inference, evaluation, figures.

Every subcommand is reproducible given --seed. Logs go to standard error,
data to files; failures exit 1 with one line `error: <category>: <detail>`.
"""

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import evaluation, presets, training
from .corpus import (
    BatchFeeder,
    ToyGrammar,
    default_speakers,
    gen_dataset,
    load_dataset,
    make_batch,
)
from .errors import ConfigError, DataError, ToolError
from .numerics.rng import stream
from .signal import analyze, load_mel, mel_to_audio, read_wav, save_mel, write_wav


class _Parser(argparse.ArgumentParser):
    """Routes usage mistakes through the one-line error contract."""

    def error(self, message):
        raise ConfigError(message)


def _log(message):
    print(message, file=sys.stderr)


def _resolved_items(args):
    items = presets.preset_items(args.preset)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        overrides = presets.parse_config_text(path.read_text(encoding="utf-8"))
        unknown = set(overrides) - set(items)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        items.update(overrides)
    for entry in args.set or []:
        key, sep, value = entry.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {entry!r}")
        if key not in items:
            raise ConfigError(f"unknown config key {key!r}")
        items[key] = value
    return items


def _load_preset(args):
    items = _resolved_items(args)
    return presets.build_preset(args.preset, items), items


def cmd_gen_data(args):
    preset, _ = _load_preset(args)
    grammar = ToyGrammar()
    counts = gen_dataset(args.out, args.train_count, args.eval_count, grammar,
                         default_speakers(), args.seed, preset.input_mel,
                         preset.output_mel)
    _log(f"wrote {counts['train']} train / {counts['eval']} eval examples to {args.out}")
    return 0


def cmd_train(args):
    preset, items = _load_preset(args)
    examples = load_dataset(Path(args.data) / "train")
    model = training.Model(preset.model, seed=preset.train.seed)
    feeder = BatchFeeder(examples, preset.feeder, preset.train.seed)
    eval_feeder = None
    if preset.train.eval_every > 0 and args.val_split != "none":
        held_out = None
        if args.val_split == "train":
            held_out = examples
        else:
            eval_index = Path(args.data) / "eval" / "index.tsv"
            if eval_index.exists():
                try:
                    held_out = load_dataset(eval_index.parent)
                except DataError:
                    _log("eval split is empty; training without validation")
        if held_out is not None:
            clean = dataclasses.replace(preset.feeder, augment=False, concat_prob=0.0)
            eval_feeder = BatchFeeder(held_out, clean, preset.train.seed + 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(presets.dump_items(items), encoding="utf-8")
    result = training.train(model, feeder, preset.train, out, resume=args.resume,
                            eval_feeder=eval_feeder, log_fn=_log)
    _log(f"finished at step {result['steps']} "
         f"({result['skipped']} skipped); checkpoint {result['checkpoint']}")
    return 0


def _load_input(path, mel_cfg):
    path = Path(path)
    if not path.exists():
        raise DataError(f"input not found: {path}")
    if path.suffix.lower() == ".wav":
        wav, rate = read_wav(path)
        if rate != mel_cfg.sample_rate:
            raise ConfigError(
                f"{path} is sampled at {rate} Hz, preset expects {mel_cfg.sample_rate}")
        return analyze(wav, mel_cfg)
    mel, stored_cfg = load_mel(path)
    if stored_cfg.n_mels != mel_cfg.n_mels:
        raise ConfigError(
            f"{path} has {stored_cfg.n_mels} channels, preset expects {mel_cfg.n_mels}")
    return mel


def cmd_infer(args):
    preset, _ = _load_preset(args)
    src_mel = _load_input(args.input, preset.input_mel)
    model = training.load_model(preset.model, args.ckpt)
    result = model.infer(src_mel[None].astype(np.float32),
                         np.array([len(src_mel)], dtype=np.int64),
                         max_len=args.max_phonemes,
                         prenet_rng=stream(args.seed, "prenet"),
                         duration_scale=args.duration_scale)
    n_phon = int(result.n_phonemes[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = result.ids[0, :n_phon]
    (out / "phonemes.txt").write_text(
        " ".join(str(int(i)) for i in ids) + "\n", encoding="utf-8")
    (out / "durations.txt").write_text(
        "".join(f"{d:.6f}\n" for d in result.duration_s[0, :n_phon]), encoding="utf-8")
    mel = result.mel[0, : int(result.frame_len[0])]
    save_mel(out / "output.mel", mel, preset.output_mel)
    write_wav(out / "output.wav", mel_to_audio(mel, preset.output_mel),
              preset.output_mel.sample_rate)
    for head in range(result.attention.shape[1]):
        np.save(out / f"attention_head{head}.npy",
                result.attention[0, head, :n_phon, :])
    _log(f"decoded {n_phon} phonemes, {mel.shape[0]} frames -> {out}")
    return 0


def _greedy_outputs(model, examples, seed, max_phonemes, duration_scale=1.0):
    """Per-example greedy decode; returns (id lists, trimmed mels)."""
    pred_ids = []
    pred_mels = []
    for i, ex in enumerate(examples):
        result = model.infer(ex.src_mel[None], np.array([len(ex.src_mel)]),
                             max_len=max_phonemes,
                             prenet_rng=stream(seed, "prenet", i),
                             duration_scale=duration_scale)
        n = int(result.n_phonemes[0])
        pred_ids.append([int(v) for v in result.ids[0, :n]])
        pred_mels.append(result.mel[0, : int(result.frame_len[0])])
    return pred_ids, pred_mels


def _teacher_forced_metrics(model, examples, train_cfg, batch_size):
    """Accuracy and spectrogram MSE over chunked teacher-forced passes,
    weighted by each chunk's valid phoneme steps and frames."""
    correct = 0
    steps_total = 0
    after_sum = 0.0
    frames_total = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = make_batch(chunk)
        breakdown = training.validate(model, batch, train_cfg, step=start)
        steps = int(batch.phoneme_len.sum())
        correct += breakdown.accuracy * steps
        steps_total += steps
        frames = int(batch.tgt_len.sum())
        after_sum += breakdown.spec_after * frames
        frames_total += frames
    return correct / max(steps_total, 1), after_sum / max(frames_total, 1)


def _affinity_stats(matrix):
    diag = np.diag(matrix)
    off = matrix[~np.eye(matrix.shape[0], dtype=bool)]
    return float(diag.mean()), float(off.mean())


def cmd_eval(args):
    preset, _ = _load_preset(args)
    examples = load_dataset(Path(args.data) / args.split)
    if args.limit and args.limit < len(examples):
        examples = examples[: args.limit]
    spf = preset.model.seconds_per_frame
    refs = [[int(p) for p in ex.phonemes] for ex in examples]
    ref_mels = [ex.tgt_mel for ex in examples]
    tf_accuracy = tf_postnet_mse = None
    if args.oracle:
        pred_ids, pred_mels = refs, ref_mels
    else:
        if not args.ckpt:
            raise ConfigError("eval needs --ckpt (or --oracle)")
        model = training.load_model(preset.model, args.ckpt)
        pred_ids, pred_mels = _greedy_outputs(model, examples, args.seed,
                                              args.max_phonemes,
                                              duration_scale=args.duration_scale)
        tf_accuracy, tf_postnet_mse = _teacher_forced_metrics(
            model, examples, preset.train, preset.feeder.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bleu = evaluation.phoneme_bleu(pred_ids, refs)
    exact = [p == r for p, r in zip(pred_ids, refs)]
    reports = [evaluation.udr(p, r, spf, args.threshold_seconds)
               for p, r in zip(pred_mels, ref_mels)]
    pooled_unaligned = sum(r.unaligned_frames for r in reports)
    pooled_total = sum(r.total_frames for r in reports)

    with open(out / "items.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "speaker", "ref_len", "pred_len", "exact_match", "udr"])
        for ex, pred, hit, rep in zip(examples, pred_ids, exact, reports):
            writer.writerow([ex.id, ex.speaker, len(ex.phonemes), len(pred),
                             int(hit), f"{rep.udr:.6f}"])

    metrics = [
        ("n_items", len(examples)),
        ("phoneme_bleu", f"{bleu:.6f}"),
        ("exact_match_rate", f"{np.mean(exact):.6f}"),
        ("udr_pooled", f"{pooled_unaligned / pooled_total:.6f}"),
        ("udr_mean", f"{np.mean([r.udr for r in reports]):.6f}"),
    ]
    if tf_accuracy is not None:
        metrics.insert(2, ("tf_accuracy", f"{tf_accuracy:.6f}"))
        metrics.insert(3, ("tf_postnet_mse", f"{tf_postnet_mse:.6f}"))

    tgt_embs = [evaluation.speaker_embedding(m) for m in ref_mels]
    pred_embs = [evaluation.speaker_embedding(m) for m in pred_mels]
    tgt_affinity = evaluation.affinity_matrix(pred_embs, tgt_embs)
    np.save(out / "affinity_tgt.npy", tgt_affinity)
    diag, off = _affinity_stats(tgt_affinity)
    metrics += [("affinity_tgt_diag", f"{diag:.6f}"),
                ("affinity_tgt_offdiag", f"{off:.6f}")]
    if examples[0].src_mel.shape[1] == pred_mels[0].shape[1]:
        src_embs = [evaluation.speaker_embedding(ex.src_mel) for ex in examples]
        src_affinity = evaluation.affinity_matrix(pred_embs, src_embs)
        np.save(out / "affinity_src.npy", src_affinity)
        diag, off = _affinity_stats(src_affinity)
        metrics += [("affinity_src_diag", f"{diag:.6f}"),
                    ("affinity_src_offdiag", f"{off:.6f}")]
    else:
        _log("source and prediction channel counts differ; skipping source affinity")

    if args.turn_pairs > 0:
        metrics += _speaker_turns(args, preset, examples, out)

    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "value"])
        writer.writerows(metrics)
    _log(f"evaluated {len(examples)} items -> {out / 'metrics.csv'}")
    return 0


def _speaker_turns(args, preset, examples, out):
    """Two-speaker concatenations scored lead/trail against each source."""
    if examples[0].src_mel.shape[1] != preset.output_mel.n_mels:
        raise ConfigError("speaker turns need matching source/output mel channels")
    if not args.ckpt:
        raise ConfigError("speaker turns need --ckpt")
    model = training.load_model(preset.model, args.ckpt)
    by_speaker = {}
    for ex in examples:
        by_speaker.setdefault(ex.speaker, []).append(ex)
    if len(by_speaker) < 2:
        raise DataError("speaker turns need at least two speakers in the split")
    (first, firsts), (second, seconds) = sorted(by_speaker.items())[:2]
    rng = stream(args.seed, "turn-pairs")
    rows = []
    matched = []
    mismatched = []
    spf = preset.model.seconds_per_frame
    for k in range(args.turn_pairs):
        ex_a = firsts[int(rng.integers(len(firsts)))]
        ex_b = seconds[int(rng.integers(len(seconds)))]
        src = np.concatenate([ex_a.src_mel, ex_b.src_mel])
        result = model.infer(src[None], np.array([len(src)]),
                             max_len=args.max_phonemes,
                             prenet_rng=stream(args.seed, "turn-prenet", k))
        pred = result.mel[0, : int(result.frame_len[0])]
        try:
            report = evaluation.speaker_turn_similarity(
                pred, ex_a.src_mel, ex_b.src_mel, spf,
                segment_seconds=args.segment_seconds)
        except DataError:
            continue  # too short: the protocol discards the pair
        rows.append([ex_a.id, ex_b.id, f"{report.lead_a:.6f}", f"{report.lead_b:.6f}",
                     f"{report.trail_a:.6f}", f"{report.trail_b:.6f}"])
        matched += [report.lead_a, report.trail_b]
        mismatched += [report.lead_b, report.trail_a]
    if not rows:
        raise DataError("every speaker-turn pair was discarded as too short")
    with open(out / "turns.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id_lead", "id_trail", "lead_a", "lead_b", "trail_a", "trail_b"])
        writer.writerows(rows)
    return [("turn_pairs_scored", len(rows)),
            ("turn_matched_mean", f"{np.mean(matched):.6f}"),
            ("turn_mismatched_mean", f"{np.mean(mismatched):.6f}")]


def cmd_plot(args):
    src = Path(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for path in sorted(src.glob("affinity*.npy")):
        evaluation.write_affinity_pgm(out / f"{path.stem}.pgm", np.load(path))
        written += 1
    for path in sorted(src.glob("attention_head*.npy")):
        evaluation.write_heatmap_pgm(out / f"{path.stem}.pgm", np.load(path))
        written += 1
    if written == 0:
        raise DataError(f"no affinity*.npy or attention_head*.npy under {src}")
    _log(f"wrote {written} images to {out}")
    return 0


def cmd_preset_dump(args):
    items = _resolved_items(args)
    presets.build_preset(args.preset, items)  # validate before printing
    sys.stdout.write(presets.dump_items(items))
    return 0


def _add_config_flags(parser, default_preset="toy"):
    parser.add_argument("--preset", default=default_preset, choices=presets.PRESET_NAMES)
    parser.add_argument("--config", help="flat key=value file overriding the preset")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config item (repeatable)")


def build_parser():
    parser = _Parser(prog="s2st", description="speech-to-speech translation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic paired-speech dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--eval-count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--val-split", default="eval", choices=("eval", "train", "none"),
                   help="where validation batches come from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="translate one utterance (wav or mel input)")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-phonemes", type=int, default=100)
    p.add_argument("--duration-scale", type=float, default=1.0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    _add_config_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--max-phonemes", type=int, default=100)
    p.add_argument("--threshold-seconds", type=float, default=1.0)
    p.add_argument("--duration-scale", type=float, default=1.0)
    p.add_argument("--turn-pairs", type=int, default=0,
                   help="score this many two-speaker concatenations")
    p.add_argument("--segment-seconds", type=float, default=1.6)
    p.add_argument("--oracle", action="store_true",
                   help="score the references against themselves (no model)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render eval/infer arrays as PGM images")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("preset-dump", help="print the resolved configuration")
    p.add_argument("preset", choices=presets.PRESET_NAMES)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_preset_dump)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ToolError as err:
        print(f"error: {err.category}: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: data: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
