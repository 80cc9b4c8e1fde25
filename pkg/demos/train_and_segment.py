"""
Training a small model end to end
=================================

A short run on a small synthetic dataset, driven through the same
functions as the ``acmseg`` command line: generate scenes, train the
backbone through the unrolled contour, then segment the held-out images
and score them.  Use the default configuration and 30 epochs for real
results; this demo keeps everything small so that it finishes in about a
minute.
"""

from pathlib import Path

from acmseg import cli, metrics
from acmseg.training import RunLog

work = Path("demo_run")

# Eighty 64x64 scenes with one to four instances and an illumination ramp.
cli.main(["synth", "--out", str(work / "data"), "--train", "64", "--test", "16", "--seed", "1"])

# A narrow network and eight epochs.
(work / "small.toml").write_text("[backbone]\nbase_channels = 4\n\n[train]\nepochs = 8\n")
cli.main(["train", "--config", str(work / "small.toml"), "--data", str(work / "data"),
          "--out", str(work / "model"), "--deterministic"])

# The run log holds one record per optimiser step and one per epoch.
log = RunLog.read(work / "model" / "runlog.jsonl")
for rec in log.of_type("epoch"):
    print(f"epoch {rec['epoch']}  lr {rec['lr']:g}  held-out dice {rec['eval']['dice']:.3f}")

# Segment every image with the last checkpoint; the maps land next to the masks.
cli.main(["segment", "--weights", str(work / "model" / "last"), "--input", str(work / "data"),
          "--out", str(work / "segment")])
cli.main(["eval", "--pred", str(work / "segment"), "--gt", str(work / "data"), "--out", str(work / "eval")])
print("metrics:", ", ".join(metrics.METRIC_NAMES), "written to", work / "eval")
