"""Analytic FLOP counts for the hierarchical model, from shapes alone.

Conventions (one multiply-add = 2 FLOPs):

* attention projections: ``8*N*dim^2`` per block (qkv plus output)
* attention scores and aggregation: ``2*N^2*dim`` each; windowed blocks use
  ``N = ws^2`` per window, over the padded window count
* MLP: ``4*N*dim*hidden``
* convolution: ``2*Cout*Cin*k^2*H'*W'``
* average pooling: ``k^2`` adds per output element (negligible, reported anyway)
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

from .checkpoint import PlainVitSchema
from .hier import STRIDES, HierVitConfig


def conv_flops(c_out: int, c_in: int, k: int, h_out: int, w_out: int) -> int:
    return 2 * c_out * c_in * k * k * h_out * w_out


def projection_flops(n_tokens: int, dim: int) -> int:
    return 8 * n_tokens * dim * dim


def mlp_flops(n_tokens: int, dim: int, hidden: int) -> int:
    return 4 * n_tokens * dim * hidden


def score_aggregate_flops(h: int, w: int, dim: int, window: int | None = None) -> int:
    """Score plus value-aggregation FLOPs for one block on an ``h x w`` map."""
    if window is None:
        n = h * w
        return 2 * (2 * n * n * dim)
    n_windows = math.ceil(h / window) * math.ceil(w / window)
    n = window * window
    return n_windows * 2 * (2 * n * n * dim)


@dataclass
class StageFlops:
    stage: int
    height: int
    width: int
    blocks: int
    entry: int = 0  # patch embed for stage 1, downsampler otherwise
    projections: int = 0
    score_aggregate: int = 0
    mlp: int = 0

    @property
    def total(self) -> int:
        return self.entry + self.projections + self.score_aggregate + self.mlp


@dataclass
class FlopsReport:
    stages: list[StageFlops] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(s.total for s in self.stages)


def analytic_flops(schema: PlainVitSchema, cfg: HierVitConfig, height: int, width: int) -> FlopsReport:
    d, hidden = schema.dim, schema.mlp_hidden
    plan = cfg.resolved_plan()
    h, w = height // STRIDES[0], width // STRIDES[0]
    report = FlopsReport()
    block = 0
    for stage, n_blocks in enumerate(cfg.stage_layout):
        if stage == 0:
            entry = conv_flops(d, schema.in_chans, schema.patch, h, w)
        else:
            kind = cfg.final_pool if stage == 3 else "learned"
            if kind == "gap":
                entry = d * h * w
                h = w = 1
            else:
                h, w = -(-h // 2), -(-w // 2)
                if kind == "learned":
                    entry = conv_flops(d, d, 3, h, w) + 9 * d * h * w
                else:
                    entry = 4 * d * h * w
        sf = StageFlops(stage + 1, h, w, n_blocks, entry=entry)
        for _ in range(n_blocks):
            sf.projections += projection_flops(h * w, d)
            sf.mlp += mlp_flops(h * w, d, hidden)
            sf.score_aggregate += score_aggregate_flops(h, w, d, plan[block])
            block += 1
        report.stages.append(sf)
    return report


@dataclass
class Timing:
    repeats: int
    seconds: list[float]
    tokens: int

    @property
    def total(self) -> float:
        return sum(self.seconds)

    @property
    def tokens_per_second(self) -> float:
        return self.repeats * self.tokens / self.total if self.total > 0 else float("inf")


def time_forward(fn, repeats: int, tokens: int) -> Timing:
    """Time ``repeats`` calls of ``fn()``; ``tokens`` is work per call."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    seconds = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        seconds.append(time.perf_counter() - start)
    return Timing(repeats, seconds, tokens)
