"""Speaker-turn oracle run: concatenation augmentation at probability 0.5.

Trains on the two-speaker toy corpus with ConcatAug, then scores lead/trail
speaker similarity over constructed two-speaker inputs. The control numbers
(same protocol, a model trained without ConcatAug) come from the
run_generalize checkpoint via --control-ckpt. Writes report.json under --root.
"""

import argparse
import json
import sys
from pathlib import Path

from runlib import chunked_train, metrics, run

TURN_ARGS = ["--turn-pairs", 110, "--segment-seconds", 0.8]


def turn_margins(scores):
    matched = float(scores["turn_matched_mean"])
    mismatched = float(scores["turn_mismatched_mean"])
    return matched, mismatched, matched - mismatched


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--root", default="runs/speaker_turn")
    parser.add_argument("--data", default="runs/generalize/data",
                        help="reuse the generalization corpus")
    parser.add_argument("--control-ckpt", default="",
                        help="no-ConcatAug checkpoint for the control margin")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--cap", type=int, default=30000)
    parser.add_argument("--chunk", type=int, default=2000)
    parser.add_argument("--bleu-target", type=float, default=0.92)
    args = parser.parse_args()
    root = Path(args.root)
    data = Path(args.data)
    if not (data / "train" / "index.tsv").exists():
        run(["gen-data", "--out", data, "--train-count", 2000,
             "--eval-count", 200, "--seed", args.seed])
    scores = {}
    steps = 0
    ckpt = None
    for steps, ckpt in chunked_train(data, root / "model", args.seed,
                                     args.chunk, args.cap,
                                     extra_sets=["train.eval_every=500",
                                                 "augment.concat_prob=0.5"]):
        run(["eval", "--data", data, "--split", "eval", "--ckpt", ckpt,
             "--out", root / "eval", "--seed", args.seed])
        scores = metrics(root / "eval" / "metrics.csv")
        print(f"[speaker-turn] step {steps}: bleu {scores['phoneme_bleu']} "
              f"tf_acc {scores['tf_accuracy']}", file=sys.stderr)
        if float(scores["phoneme_bleu"]) >= args.bleu_target:
            break
    run(["eval", "--data", data, "--split", "eval", "--ckpt", ckpt,
         "--out", root / "turns", "--seed", args.seed] + TURN_ARGS)
    turns = metrics(root / "turns" / "metrics.csv")
    matched, mismatched, margin = turn_margins(turns)
    report = {
        "seed": args.seed,
        "steps": steps,
        "checkpoint": str(ckpt),
        "phoneme_bleu": float(scores["phoneme_bleu"]),
        "turn_pairs_scored": int(turns["turn_pairs_scored"]),
        "turn_matched_mean": matched,
        "turn_mismatched_mean": mismatched,
        "turn_margin": margin,
    }
    if args.control_ckpt:
        run(["eval", "--data", data, "--split", "eval", "--ckpt", args.control_ckpt,
             "--out", root / "turns_control", "--seed", args.seed] + TURN_ARGS)
        control = metrics(root / "turns_control" / "metrics.csv")
        c_matched, c_mismatched, c_margin = turn_margins(control)
        report["control_pairs_scored"] = int(control["turn_pairs_scored"])
        report["control_matched_mean"] = c_matched
        report["control_mismatched_mean"] = c_mismatched
        report["control_margin"] = c_margin
    (root / "report.json").write_text(json.dumps(report, indent=2) + "\n",
                                      encoding="utf-8")
    print(json.dumps(report), file=sys.stderr)


if __name__ == "__main__":
    main()
