"""Metric exports: success curves, per-goal heatmaps, coincidental-success logs."""

from __future__ import annotations

import csv
import json
import math
import struct
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import Env, GoalSpec

EXPORTS = ("curves", "heatmap", "coincidental")


def coincidental_tracker(episode, goals: Sequence[GoalSpec], env: Env) -> dict[str, bool]:
    """Flag each goal satisfied at any step of an exploration episode."""
    if episode.kind not in ("random", "explorer"):
        raise ValueError(f"coincidental tracking applies to exploration episodes, not {episode.kind!r}")
    if episode.states is None:
        raise ValueError("episode carries no environment states")
    return {g.id: bool(np.any(env.success_batch(episode.states, g))) for g in goals}


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def eval_records(records: Sequence[dict]) -> list[dict]:
    return [r for r in records if "eval/mean_success" in r]


def goal_ids_from(records: Sequence[dict], prefix: str, suffix: str) -> list[str]:
    ids: list[str] = []
    for r in records:
        for k in r:
            if k.startswith(prefix) and k.endswith(suffix):
                gid = k[len(prefix):-len(suffix)]
                if gid and gid not in ids:
                    ids.append(gid)
    return ids


def export_curves(records, outdir: Path) -> list[Path]:
    path = outdir / "curves.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["env_step", "mean_success"])
        for r in eval_records(records):
            w.writerow([r["env_step"], r["eval/mean_success"]])
    return [path]


def export_heatmap(records, outdir: Path) -> list[Path]:
    evals = eval_records(records)
    goals = [g for g in goal_ids_from(evals, "eval/", "_success") if g != "mean"]
    matrix = np.array([[r.get(f"eval/{g}_success", float("nan")) for r in evals] for g in goals],
                      dtype=float).reshape(len(goals), len(evals))
    path = outdir / "heatmap.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["goal_id"] + [str(r["env_step"]) for r in evals])
        for g, row in zip(goals, matrix):
            w.writerow([g] + [f"{v:g}" for v in row])
    png = outdir / "heatmap.png"
    write_png(png, heatmap_image(matrix))
    return [path, png]


def export_coincidental(records, outdir: Path) -> list[Path]:
    prefix, suffix = "explore/coincidental_", "_count"
    rows = [r for r in records if any(k.startswith(prefix) for k in r)]
    goals = goal_ids_from(rows, prefix, suffix)
    path = outdir / "coincidental.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["env_step"] + goals)
        for r in rows:
            w.writerow([r["env_step"]] + [r.get(f"{prefix}{g}{suffix}", 0) for g in goals])
    return [path]


def export(run_dir, what: str) -> list[Path]:
    if what not in EXPORTS:
        raise ValueError(f"unknown export {what!r}; choose from {EXPORTS}")
    run_dir = Path(run_dir)
    records = read_metrics(run_dir / "metrics.jsonl")
    outdir = run_dir / "exports"
    outdir.mkdir(exist_ok=True)
    return {"curves": export_curves, "heatmap": export_heatmap,
            "coincidental": export_coincidental}[what](records, outdir)


def write_success_csv(path, result: dict, episodes: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["goal_id", "success_rate", "episodes"])
        for gid, rate in result["per_goal"].items():
            w.writerow([gid, f"{rate:g}", episodes])


def format_table(result: dict) -> str:
    width = max([len(g) for g in result["per_goal"]] + [4])
    lines = [f"{'goal':<{width}}  success"]
    for gid, rate in result["per_goal"].items():
        lines.append(f"{gid:<{width}}  {100 * rate:6.1f}%")
    lines.append(f"{'mean':<{width}}  {100 * result['mean']:6.1f}%")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# raster output
# ---------------------------------------------------------------------------

def heatmap_image(matrix: np.ndarray, cell: int = 12) -> np.ndarray:
    """Goals x evaluations grid, white (0) to dark blue (1); NaN cells grey."""
    rows, cols = matrix.shape
    img = np.full((max(rows, 1) * cell, max(cols, 1) * cell, 3), 255, np.uint8)
    lo, hi = np.array([255, 255, 255], float), np.array([8, 48, 107], float)
    for i in range(rows):
        for j in range(cols):
            v = matrix[i, j]
            color = (160, 160, 160) if math.isnan(v) else lo + (hi - lo) * float(np.clip(v, 0, 1))
            img[i * cell:(i + 1) * cell - 1, j * cell:(j + 1) * cell - 1] = color
    return img


def write_png(path, rgb: np.ndarray) -> None:
    """Write an 8-bit RGB image as PNG."""
    rgb = np.ascontiguousarray(rgb, np.uint8)
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[y].tobytes() for y in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (struct.pack(">I", len(data)) + tag + data
                + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF))

    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)))
        f.write(chunk(b"IDAT", zlib.compress(raw, 9)))
        f.write(chunk(b"IEND", b""))
