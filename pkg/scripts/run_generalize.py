"""Generalization oracle run: 2000 train / 200 held-out pairs, one fixed seed.

Calibrates the held-out phoneme BLEU threshold, the affinity diagonal margin,
and the over-generation (duration x3) UDR comparison. Writes report.json
under --root.
"""

import argparse
import json
import sys
from pathlib import Path

from runlib import chunked_train, metrics, run


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--root", default="runs/generalize")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--cap", type=int, default=30000)
    parser.add_argument("--chunk", type=int, default=2000)
    parser.add_argument("--bleu-target", type=float, default=0.92)
    args = parser.parse_args()
    root = Path(args.root)
    data = root / "data"
    if not (data / "train" / "index.tsv").exists():
        run(["gen-data", "--out", data, "--train-count", 2000,
             "--eval-count", 200, "--seed", args.seed])
    scores = {}
    steps = 0
    ckpt = None
    for steps, ckpt in chunked_train(data, root / "model", args.seed,
                                     args.chunk, args.cap,
                                     extra_sets=["train.eval_every=500"]):
        run(["eval", "--data", data, "--split", "eval", "--ckpt", ckpt,
             "--out", root / "eval", "--seed", args.seed])
        scores = metrics(root / "eval" / "metrics.csv")
        print(f"[generalize] step {steps}: bleu {scores['phoneme_bleu']} "
              f"tf_acc {scores['tf_accuracy']} udr {scores['udr_pooled']}",
              file=sys.stderr)
        if float(scores["phoneme_bleu"]) >= args.bleu_target:
            break
    # over-generation probe: the same checkpoint with durations tripled
    run(["eval", "--data", data, "--split", "eval", "--ckpt", ckpt,
         "--out", root / "eval_slow", "--seed", args.seed,
         "--duration-scale", 3])
    slow = metrics(root / "eval_slow" / "metrics.csv")
    report = {
        "seed": args.seed,
        "steps": steps,
        "checkpoint": str(ckpt),
        "phoneme_bleu": float(scores["phoneme_bleu"]),
        "tf_accuracy": float(scores["tf_accuracy"]),
        "exact_match_rate": float(scores["exact_match_rate"]),
        "udr_pooled": float(scores["udr_pooled"]),
        "udr_pooled_duration_x3": float(slow["udr_pooled"]),
        "affinity_src_diag": float(scores["affinity_src_diag"]),
        "affinity_src_offdiag": float(scores["affinity_src_offdiag"]),
    }
    (root / "report.json").write_text(json.dumps(report, indent=2) + "\n",
                                      encoding="utf-8")
    print(json.dumps(report), file=sys.stderr)


if __name__ == "__main__":
    main()
