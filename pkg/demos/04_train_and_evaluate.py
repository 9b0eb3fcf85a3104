"""End to end: a short training run, zero-shot evaluation, and exported artifacts.

This is the smoke configuration (2k env steps). Real runs use the configs in
configs/ through the command line, e.g.

    lexa train --config configs/pointrooms_cosine.json --seed 0 --outdir runs/cos0
    lexa eval --ckpt runs/cos0/checkpoints/step_200000.ckpt --goals src/lexa/goals/pointrooms.json --episodes-per-goal 10
    lexa export --run runs/cos0 --what heatmap
"""

import sys
import tempfile
from pathlib import Path

from lexa.cli import main

configs = Path(__file__).resolve().parents[1] / "configs"
goals = Path(__file__).resolve().parents[1] / "src" / "lexa" / "goals" / "pointrooms.json"

with tempfile.TemporaryDirectory() as d:
    run = Path(d) / "smoke"
    code = main(["train", "--config", str(configs / "smoke.json"), "--seed", "0", "--outdir", str(run)])
    if code:
        sys.exit(code)
    ckpt = sorted(run.glob("checkpoints/*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))[-1]
    main(["eval", "--ckpt", str(ckpt), "--goals", str(goals), "--episodes-per-goal", "2"])
    for what in ("curves", "heatmap", "coincidental"):
        main(["export", "--run", str(run), "--what", what])
    print((run / "exports" / "coincidental.csv").read_text())
