"""Overfit oracle run: 32 examples, toy preset, one fixed seed.

Demonstrates the memorization targets (teacher-forced accuracy, greedy exact
matches) and calibrates the post-net spectrogram MSE bound. Writes
report.json under --root; metrics land in the usual run CSVs.
"""

import argparse
import json
import sys
from pathlib import Path

from runlib import chunked_train, metrics, run


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--root", default="runs/overfit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--cap", type=int, default=5000)
    parser.add_argument("--chunk", type=int, default=500)
    args = parser.parse_args()
    root = Path(args.root)
    data = root / "data"
    if not (data / "train" / "index.tsv").exists():
        run(["gen-data", "--out", data, "--train-count", 32, "--eval-count", 0,
             "--seed", args.seed])
    scores = {}
    steps = 0
    ckpt = None
    for steps, ckpt in chunked_train(data, root / "model", args.seed,
                                     args.chunk, args.cap, val_split="train",
                                     extra_sets=["train.eval_every=100"]):
        run(["eval", "--data", data, "--split", "train", "--ckpt", ckpt,
             "--out", root / "eval", "--seed", args.seed])
        scores = metrics(root / "eval" / "metrics.csv")
        print(f"[overfit] step {steps}: tf_acc {scores['tf_accuracy']} "
              f"exact {scores['exact_match_rate']} "
              f"postnet_mse {scores['tf_postnet_mse']}", file=sys.stderr)
        if (float(scores["tf_accuracy"]) >= 0.99
                and float(scores["exact_match_rate"]) >= 30 / 32):
            break
    report = {
        "seed": args.seed,
        "steps": steps,
        "checkpoint": str(ckpt),
        "tf_accuracy": float(scores["tf_accuracy"]),
        "exact_match_rate": float(scores["exact_match_rate"]),
        "tf_postnet_mse": float(scores["tf_postnet_mse"]),
        "udr_pooled": float(scores["udr_pooled"]),
    }
    (root / "report.json").write_text(json.dumps(report, indent=2) + "\n",
                                      encoding="utf-8")
    print(json.dumps(report), file=sys.stderr)


if __name__ == "__main__":
    main()
