"""Shared plumbing for the calibration run scripts."""

import sys
from pathlib import Path

from s2st.cli import main


def run(args):
    """Invoke one CLI subcommand; abort the script on failure."""
    code = main([str(a) for a in args])
    if code != 0:
        sys.exit(code)


def metrics(path):
    """metrics.csv -> {metric: value-string}."""
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()[1:]
    return dict(line.split(",", 1) for line in lines)


def chunked_train(data, out, seed, chunk, cap, extra_sets=(), val_split="eval"):
    """Generator of (total_steps, checkpoint_path), training chunk by chunk.

    The caller breaks out when its stopping metric is reached; training
    resumes from the previous chunk's checkpoint each round.
    """
    steps = 0
    ckpt = None
    while steps < cap:
        steps = min(steps + chunk, cap)
        cmd = ["train", "--data", data, "--out", out, "--val-split", val_split,
               "--set", f"train.steps={steps}", "--set", f"train.seed={seed}",
               "--set", "train.ckpt_every=0"]
        for item in extra_sets:
            cmd += ["--set", item]
        if ckpt is not None:
            cmd += ["--resume", ckpt]
        run(cmd)
        ckpt = Path(out) / f"ckpt_{steps:07d}.ckpt"
        yield steps, ckpt
