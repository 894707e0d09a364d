"""Serve-time replay: hard cascade filtering with per-query, per-stage keep
counts derived from the model's expected pass counts.

Replay walks each query's instances through the stages, keeping the top-k by
cumulative pass probability at every stage (deterministic; a stochastic
Bernoulli-pass mode exists for oracle comparisons). Raw replay accounting is
in sample units; the report scales each query by M_q / N_q to the equivalent
figures over the full recalled set, which is what the result floor and the
latency ceiling are expressed against.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .cascade import batch_log_pass
from .core import CascadeModel, QueryGroup, pack_groups, stage_costs
from .objective import ObjectiveConfig

THREADS_ENV = "CLOES_THREADS"


def _env_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def plan(model: CascadeModel, group: QueryGroup, sample_scaled: bool = True) -> list[int]:
    """Integer keep counts per stage: ceil of the expected pass count, clamped
    to [1, items remaining]; non-increasing across stages.

    With ``sample_scaled`` (default) the expectation is over the group's
    sampled instances, i.e. the recall-scaled expectation times N_q / M_q,
    which is the threshold actually applicable when replaying a sample.
    ``sample_scaled=False`` uses the recall-scaled expectation directly and is
    only meaningful when the group holds the full recalled set.
    """
    packed = pack_groups([group])
    _, cum_log_p = batch_log_pass(model, packed)
    pass_sums = np.exp(cum_log_p).sum(axis=0)
    scale = 1.0 if sample_scaled else group.recalled_count / group.size
    remaining = group.size
    counts = []
    for j in range(model.n_stages):
        k = min(remaining, max(1, math.ceil(pass_sums[j] * scale)))
        counts.append(int(k))
        remaining = k
    return counts


@dataclass(frozen=True)
class ServePlan:
    """Threshold rule bound to a model; keep counts derive per query at run time."""

    model: CascadeModel
    rule: str = "expected_count_topk"
    sample_scaled: bool = True

    def keep_counts(self, group: QueryGroup) -> list[int]:
        if self.rule != "expected_count_topk":
            raise ValueError(f"unknown threshold rule {self.rule!r}")
        return plan(self.model, group, self.sample_scaled)


@dataclass(frozen=True)
class ServedQuery:
    ranking: tuple[int, ...]          # surviving instance indices, best first
    realized_cost: float              # sample units
    realized_latency_units: float     # == realized_cost (single shard)
    stage_entrants: tuple[int, ...]
    stage_survivors: tuple[int, ...]


def serve_query(keep_counts: Sequence[int], model: CascadeModel, group: QueryGroup,
                stochastic: bool = False, rng: np.random.Generator | None = None,
                ) -> ServedQuery:
    """Replay one query through the cascade.

    Each stage scores the current survivors by cumulative pass probability and
    keeps the top ``keep_counts[j]`` (ties broken by input order); every
    entrant pays the stage cost. In stochastic mode survivors instead pass
    each stage independently with their stage pass probability and
    ``keep_counts`` is ignored; the result list may be empty (this mode is a
    pure Bernoulli oracle, so no survivor floor is applied).
    """
    T = model.n_stages
    if not stochastic and len(keep_counts) != T:
        raise ValueError(f"need {T} keep counts, got {len(keep_counts)}")
    packed = pack_groups([group])
    Z, cum_log_p = batch_log_pass(model, packed)
    if stochastic and rng is None:
        rng = np.random.default_rng(0)

    survivors = np.arange(group.size)
    t = stage_costs(model.assignment, model.schema)
    cost = 0.0
    entrants, kept = [], []
    for a in range(T):
        entrants.append(len(survivors))
        cost += len(survivors) * t[a]
        if stochastic:
            p_stage = expit(Z[survivors, a])
            survivors = np.sort(survivors[rng.random(len(survivors)) < p_stage])
        else:
            order = np.lexsort((survivors, -cum_log_p[survivors, a]))
            survivors = np.sort(survivors[order[: int(keep_counts[a])]])
        kept.append(len(survivors))
    final_order = np.lexsort((survivors, -cum_log_p[survivors, -1]))
    ranking = tuple(int(i) for i in survivors[final_order])
    return ServedQuery(
        ranking=ranking, realized_cost=float(cost), realized_latency_units=float(cost),
        stage_entrants=tuple(entrants), stage_survivors=tuple(kept),
    )


@dataclass(frozen=True)
class SimQueryRecord:
    query_id: str
    recalled_count: int
    size: int
    final_count: float                # recall-scaled
    realized_cost: float              # recall-scaled cost units
    realized_latency_units: float
    realized_latency_ms: float
    below_floor: bool
    above_latency_ceiling: bool


@dataclass(frozen=True)
class SimReport:
    traffic_multiplier: float
    total_cost: float
    utilization_proxy: float          # traffic_multiplier * total_cost
    mean_latency_units: float
    p95_latency_units: float
    mean_latency_ms: float
    p95_latency_ms: float
    fraction_below_floor: float
    fraction_above_latency_ceiling: float
    per_query: tuple[SimQueryRecord, ...]

    def to_text(self) -> str:
        pairs = [
            ("traffic_multiplier", self.traffic_multiplier),
            ("total_cost", self.total_cost),
            ("utilization_proxy", self.utilization_proxy),
            ("mean_latency_units", self.mean_latency_units),
            ("p95_latency_units", self.p95_latency_units),
            ("mean_latency_ms", self.mean_latency_ms),
            ("p95_latency_ms", self.p95_latency_ms),
            ("fraction_below_floor", self.fraction_below_floor),
            ("fraction_above_latency_ceiling", self.fraction_above_latency_ceiling),
        ]
        return "\n".join(f"{k} {v:.6g}" for k, v in pairs) + "\n"

    def write_records(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.per_query:
                fh.write(json.dumps({
                    "query_id": r.query_id, "recalled_count": r.recalled_count,
                    "size": r.size, "final_count": r.final_count,
                    "realized_cost": r.realized_cost,
                    "realized_latency_units": r.realized_latency_units,
                    "realized_latency_ms": r.realized_latency_ms,
                    "below_floor": r.below_floor,
                    "above_latency_ceiling": r.above_latency_ceiling,
                }) + "\n")


def simulate(model: CascadeModel, data: Sequence[QueryGroup], cfg: ObjectiveConfig,
             traffic_multiplier: float = 1.0,
             keep_counts_fn: Callable[[QueryGroup], Sequence[int]] | None = None,
             stochastic: bool = False, seed: int = 0) -> SimReport:
    """Replay every group through ``serve_query`` and aggregate.

    The utilization proxy is traffic_multiplier times total cost (open loop);
    per-query latency does not depend on the multiplier. ``keep_counts_fn``
    overrides the default expected-count plan (e.g. a fixed-size baseline).
    Worker parallelism is capped by the CLOES_THREADS environment variable;
    results are reduced in query order either way.
    """
    if traffic_multiplier <= 0:
        raise ValueError("traffic_multiplier must be > 0")
    groups = list(data)
    counts_fn = keep_counts_fn if keep_counts_fn is not None else (
        lambda g: plan(model, g)
    )

    def _one(args):
        idx, group = args
        rng = np.random.default_rng([seed, idx]) if stochastic else None
        served = serve_query(counts_fn(group), model, group, stochastic=stochastic, rng=rng)
        scale = group.recalled_count / group.size
        latency = served.realized_cost * scale
        return SimQueryRecord(
            query_id=group.query_id, recalled_count=group.recalled_count,
            size=group.size, final_count=len(served.ranking) * scale,
            realized_cost=served.realized_cost * scale,
            realized_latency_units=latency,
            realized_latency_ms=latency / cfg.cost_units_per_ms,
            below_floor=bool(len(served.ranking) * scale < cfg.result_floor),
            above_latency_ceiling=bool(latency > cfg.latency_ceiling),
        )

    workers = _env_workers()
    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = tuple(pool.map(_one, enumerate(groups)))
    else:
        records = tuple(_one(x) for x in enumerate(groups))

    if records:
        lat = np.array([r.realized_latency_units for r in records])
        total = float(sum(r.realized_cost for r in records))
        report = SimReport(
            traffic_multiplier=float(traffic_multiplier), total_cost=total,
            utilization_proxy=float(traffic_multiplier * total),
            mean_latency_units=float(lat.mean()),
            p95_latency_units=float(np.percentile(lat, 95)),
            mean_latency_ms=float(lat.mean() / cfg.cost_units_per_ms),
            p95_latency_ms=float(np.percentile(lat, 95) / cfg.cost_units_per_ms),
            fraction_below_floor=float(np.mean([r.below_floor for r in records])),
            fraction_above_latency_ceiling=float(
                np.mean([r.above_latency_ceiling for r in records])
            ),
            per_query=records,
        )
    else:
        report = SimReport(
            traffic_multiplier=float(traffic_multiplier), total_cost=0.0,
            utilization_proxy=0.0, mean_latency_units=0.0, p95_latency_units=0.0,
            mean_latency_ms=0.0, p95_latency_ms=0.0, fraction_below_floor=0.0,
            fraction_above_latency_ceiling=0.0, per_query=(),
        )
    return report
