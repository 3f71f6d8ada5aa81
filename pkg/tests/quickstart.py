"""The documented quickstart, driven in-process through the CLI entry point."""
from pathlib import Path

from logoret.cli import main

ARTIFACTS = (
    "data/manifest.jsonl",
    "feats/train.jsonl",
    "head.head",
    "protos.pidx",
    "detections.jsonl",
    "report.json",
)


def run_quickstart(root, classes=3, backgrounds=4, per_class=4, channels=64, crop=64, epochs=3):
    root = Path(root)
    steps = [
        ["assets", "--out", root / "assets", "--classes", classes, "--backgrounds", backgrounds],
        ["synth", "--backgrounds", root / "assets/backgrounds", "--logos", root / "assets/logos.jsonl",
         "--out", root / "data", "--seed", 7, "--per-class", per_class],
        ["featurize", "--manifest", root / "data/manifest.jsonl", "--images", root / "data/images",
         "--out", root / "feats", "--channels", channels, "--crop-size", crop],
        ["train", "--manifest", root / "feats/train.jsonl", "--out", root / "head.head",
         "--epochs", epochs, "--lr", "1e-3", "--batch-size", 16, "--log", root / "train_log.jsonl"],
        ["index", "build", "--logos", root / "assets/logos.jsonl", "--head", root / "head.head",
         "--out", root / "protos.pidx", "--crop-size", crop],
        ["run", "--images", root / "data/images", "--proposals", root / "data/manifest.jsonl",
         "--index", root / "protos.pidx", "--head", root / "head.head", "--crop-size", crop,
         "--threshold", "0.0", "--out", root / "detections.jsonl"],
        ["eval", "--detections", root / "detections.jsonl", "--truth", root / "data/manifest.jsonl",
         "--out", root / "report.json"],
    ]
    for argv in steps:
        code = main([str(a) for a in argv])
        if code != 0:
            raise RuntimeError(f"step {argv[0]} exited with {code}")
    return {name: (root / name).read_bytes() for name in ARTIFACTS}
