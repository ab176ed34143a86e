"""Attention cost benchmark: analytic score-matrix counts cross-checked
against measured allocations, plus wall-clock comparison, written as CSV."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionParams,
    PositionalEmbeddings,
    count_attention_cost,
    dense_mhsa,
    track_score_allocation,
    twin_attention,
)
from .autodiff import Tensor
from .errors import UsageError

CSV_COLUMNS = ("kind", "height", "width", "channels", "heads",
               "flops", "score_memory", "measured_score_memory", "wall_time_s")


@dataclass
class BenchRow:
    kind: str
    height: int
    width: int
    channels: int
    heads: int
    flops: int
    score_memory: int
    measured_score_memory: int
    wall_time_s: float


def _median_time(fn, runs: int) -> float:
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_attention(sizes=(4, 8, 16, 32), channels: int = 32, heads: int = 1,
                    runs: int = 20, rectangular: bool = True, seed: int = 0) -> list[BenchRow]:
    """Measure both attention kinds over a grid-size sweep.

    Raises if the measured score-matrix allocation deviates from the analytic
    count for any configuration.
    """
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    from .attention import AttentionConfig  # local import to build cfg for twin calls

    pairs = [(h, w) for h in sizes for w in sizes if rectangular or h == w]
    for h, w in pairs:
        cfg = AttentionConfig(embed_dim=channels, heads=heads, grid_n=max(h, w))
        params_a = AttentionParams(channels, rng)
        params_b = AttentionParams(channels, rng)
        pe = PositionalEmbeddings(h, w, channels, rng)
        grid = Tensor(rng.normal(size=(h, w, channels)).astype(np.float32))
        seq = Tensor(grid.data.reshape(h * w, channels))

        with ad.no_grad():
            with track_score_allocation() as tracker:
                dense_mhsa(seq, params_a, heads)
            full_measured = tracker.elements
            full_time = _median_time(lambda: dense_mhsa(seq, params_a, heads), runs)

            with track_score_allocation() as tracker:
                twin_attention(grid, pe, params_a, params_b, cfg)
            twin_measured = tracker.elements
            twin_time = _median_time(lambda: twin_attention(grid, pe, params_a, params_b, cfg), runs)

        for kind, measured, wall in (("full", full_measured, full_time), ("twin", twin_measured, twin_time)):
            analytic = count_attention_cost(kind, h, w, channels, heads)
            if measured != analytic["score_memory"]:
                raise UsageError(
                    f"{kind} attention at {h}x{w}: measured score allocation {measured} "
                    f"!= analytic {analytic['score_memory']}"
                )
            rows.append(BenchRow(kind=kind, height=h, width=w, channels=channels, heads=heads,
                                 flops=analytic["flops"], score_memory=analytic["score_memory"],
                                 measured_score_memory=measured, wall_time_s=wall))
    return rows


def write_csv(rows: list[BenchRow], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([r.kind, r.height, r.width, r.channels, r.heads,
                             r.flops, r.score_memory, r.measured_score_memory, f"{r.wall_time_s:.6f}"])


def summarize(rows: list[BenchRow]) -> list[str]:
    lines = []
    by_size = {}
    for r in rows:
        by_size.setdefault((r.height, r.width), {})[r.kind] = r
    for (h, w), kinds in sorted(by_size.items()):
        if "full" in kinds and "twin" in kinds:
            f, t = kinds["full"], kinds["twin"]
            ratio_mem = t.score_memory / f.score_memory
            ratio_time = t.wall_time_s / f.wall_time_s if f.wall_time_s > 0 else float("nan")
            lines.append(
                f"{h:>3}x{w:<3} score-memory twin/full = {ratio_mem:.4f}  "
                f"wall-time twin/full = {ratio_time:.3f}"
            )
    return lines
