"""Loss functions and their analytic gradients.

Three nested objectives over a cascade model:

  level 1: behavior-weighted negative log-likelihood + L2 regularization
  level 2: level 1 + a CPU-cost term charging each stage's cost to the items
           expected to enter it
  level 3: level 2 + smooth (softplus) penalties keeping the expected
           per-query result count above a floor and the expected per-query
           latency below a ceiling

Everything is computed in log space from the stage logits, so no intermediate
log(0) occurs for finite weights. The key identity used for log(1 - prod_j p_j)
is the telescoping expansion

    1 - p_1...p_T = sum_j (1 - p_j) * prod_{k<j} p_k

whose terms are products of sigmoids, each stable as a sum of log-sigmoids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .cascade import batch_log_pass
from .core import (
    LABEL_CLICK,
    LABEL_PURCHASE,
    CascadeModel,
    PackedDataset,
    QueryGroup,
    pack_groups,
    stage_costs,
)

OBJECTIVE_LEVELS = ("l1", "l2", "l3")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Coefficients and thresholds of the full objective.

    alpha      L2 regularization coefficient.
    beta       CPU-cost trade-off coefficient.
    gamma      softplus sharpness; the softplus-hinge gap is ln(2)/gamma.
    delta      weight of the result-count floor penalty.
    latency_penalty_weight
               weight of the latency ceiling penalty.
    result_floor       desired minimum expected result count per query (N_o).
    latency_ceiling    latency threshold per query, in cost units (T_l).
    purchase_weight    how many times more important a purchase is than a click.
    price_weight       multiplier on log(price) in behavior weights.
    squared_l2         ridge (|w|^2) when True, plain Euclidean norm otherwise.
    penalty_per_instance
               sum the per-query penalties once per instance (multiplying each
               query's penalty by its group size) instead of once per query.
    latency_survivor_form
               charge stage j's cost to that stage's survivors instead of its
               entrants when computing expected latency.
    cost_units_per_ms  reporting-only conversion between cost units and ms.
    """

    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 10.0
    delta: float = 1.0
    latency_penalty_weight: float = 0.05
    result_floor: float = 200.0
    latency_ceiling: float = 19_500.0
    purchase_weight: float = 10.0
    price_weight: float = 1.0
    squared_l2: bool = True
    penalty_per_instance: bool = False
    latency_survivor_form: bool = False
    cost_units_per_ms: float = 150.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.delta < 0 or self.latency_penalty_weight < 0:
            raise ValueError("alpha, beta, delta and latency_penalty_weight must be >= 0")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.result_floor <= 0 or self.latency_ceiling <= 0:
            raise ValueError("result_floor and latency_ceiling must be > 0")
        if self.purchase_weight < 1:
            raise ValueError("purchase_weight must be >= 1 (purchases never matter less than clicks)")
        if self.price_weight < 0:
            raise ValueError("price_weight must be >= 0")

    def latency_ceiling_ms(self) -> float:
        return self.latency_ceiling / self.cost_units_per_ms


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components plus the analytic gradient of ``total``.

    ``total`` is composed exactly as
    nll + alpha*l2 + beta*expected_cost + delta*size_penalty
        + latency_penalty_weight*latency_penalty
    with the coefficients of terms absent from the objective level zeroed.
    """

    total: float
    nll: float
    l2: float
    expected_cost: float
    size_penalty: float
    latency_penalty: float
    gradient: np.ndarray
    objective: str = "l3"


def instance_weight(instance, cfg: ObjectiveConfig) -> float:
    """Importance weight of one instance by behavior type and log price.

    purchase -> purchase_weight * price_weight * log(price)
    click    -> price_weight * log(price)
    none     -> 1
    Positive for prices above 1 (natural log).
    """
    if not instance.price > 0:
        raise ValueError(f"price must be positive, got {instance.price}")
    if instance.label == LABEL_PURCHASE:
        return cfg.purchase_weight * cfg.price_weight * math.log(instance.price)
    if instance.label == LABEL_CLICK:
        return cfg.price_weight * math.log(instance.price)
    return 1.0


def _instance_weights(labels: np.ndarray, prices: np.ndarray, cfg: ObjectiveConfig) -> np.ndarray:
    if np.any(prices <= 0):
        raise ValueError("prices must be positive")
    w = np.ones_like(prices)
    logp = np.log(prices)
    w = np.where(labels == LABEL_CLICK, cfg.price_weight * logp, w)
    w = np.where(labels == LABEL_PURCHASE, cfg.purchase_weight * cfg.price_weight * logp, w)
    return w


def softplus(x):
    """Overflow-safe log(1 + exp(x))."""
    return np.logaddexp(0.0, x)


def _scaled_softplus_gap(diff, gamma):
    """(1/gamma) * ln(1 + exp(gamma * diff)) as hinge plus residual.

    Writing it as max(diff, 0) + log1p(exp(-gamma*|diff|))/gamma adds a
    nonnegative residual to the hinge, so the smooth penalty never dips below
    the hinge it bounds, even in floating point.
    """
    return np.maximum(diff, 0.0) + np.log1p(np.exp(-gamma * np.abs(diff))) / gamma


def softplus_penalty(z: float, threshold: float, gamma: float) -> float:
    """(1/gamma) * ln(1 + exp(gamma * (threshold - z))).

    Smooth upper bound of the hinge max(threshold - z, 0); the gap is at most
    ln(2)/gamma, attained at z = threshold.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return float(_scaled_softplus_gap(threshold - z, gamma))


@dataclass(frozen=True)
class _Terms:
    """Raw per-dataset quantities produced by one forward/backward sweep."""

    nll: float
    cost: float
    size_penalty: float
    latency_penalty: float
    counts_final: np.ndarray      # per-query expected final count (recall-scaled)
    latencies: np.ndarray         # per-query expected latency, cost units
    grad_nll: np.ndarray | None
    grad_cost: np.ndarray | None
    grad_size: np.ndarray | None
    grad_latency: np.ndarray | None


def _accumulate_weight_grad(model: CascadeModel, packed: PackedDataset, dZ: np.ndarray) -> np.ndarray:
    """Chain dLoss/dZ (n, T) back to the flat weight vector."""
    T = model.n_stages
    parts = []
    for a in range(T):
        cols = list(model.assignment.stages[a])
        parts.append(packed.X[:, cols].T @ dZ[:, a])
        per_group = np.add.reduceat(dZ[:, a], packed.offsets[:-1])
        parts.append(packed.G.T @ per_group)
    return np.concatenate(parts)


def _evaluate_terms(model: CascadeModel, packed: PackedDataset, cfg: ObjectiveConfig,
                    want_grad: bool) -> _Terms:
    T = model.n_stages
    t = stage_costs(model.assignment, model.schema)
    nw = model.n_weights

    if packed.n_instances == 0:
        zeros = (np.zeros(nw) if want_grad else None)
        return _Terms(0.0, 0.0, 0.0, 0.0, np.zeros(0), np.zeros(0),
                      zeros, zeros, zeros, zeros)

    Z, cum_log_p = batch_log_pass(model, packed)
    log_q = log_expit(-Z)                      # log(1 - p) per stage
    prefix = cum_log_p - log_expit(Z)          # sum of log p over stages < j
    log_p_final = cum_log_p[:, -1]
    # telescoping: log(1 - prod p) = logsumexp_j [log(1-p_j) + sum_{k<j} log p_k]
    log_1mp = logsumexp(log_q + prefix, axis=1)

    wgt = _instance_weights(packed.labels, packed.prices, cfg)
    y = packed.y
    nll = -float(np.sum(wgt * (y * log_p_final + (1.0 - y) * log_1mp)))

    P = np.exp(cum_log_p)                      # cumulative pass probabilities
    sizes = packed.sizes
    mratio = packed.mcounts / sizes            # M_q / N_q

    # suffix[i, b] = sum_{k=b}^{T-2} t[k+1] * P[i, k]: the cost the item is
    # expected to incur in stages after b, given it passes stage b.
    suffix = np.zeros_like(P)
    if T > 1:
        later = P[:, : T - 1] * t[1:]
        suffix[:, : T - 1] = np.flip(np.cumsum(np.flip(later, axis=1), axis=1), axis=1)

    cost = float(t[0] * packed.n_instances + np.sum(suffix[:, 0]))

    group_final = np.add.reduceat(P[:, -1], packed.offsets[:-1])
    counts_final = mratio * group_final
    size_pen_q = _scaled_softplus_gap(cfg.result_floor - counts_final, cfg.gamma)

    if cfg.latency_survivor_form:
        surv = np.flip(np.cumsum(np.flip(P * t, axis=1), axis=1), axis=1)
        latencies = mratio * np.add.reduceat(surv[:, 0], packed.offsets[:-1])
        lat_suffix = surv
    else:
        latencies = t[0] * packed.mcounts + mratio * np.add.reduceat(
            suffix[:, 0], packed.offsets[:-1]
        )
        lat_suffix = suffix
    lat_pen_q = _scaled_softplus_gap(latencies - cfg.latency_ceiling, cfg.gamma)

    pen_scale = sizes.astype(np.float64) if cfg.penalty_per_instance else np.ones_like(mratio)
    size_penalty = float(np.sum(pen_scale * size_pen_q))
    latency_penalty = float(np.sum(pen_scale * lat_pen_q))

    if not want_grad:
        return _Terms(nll, cost, size_penalty, latency_penalty, counts_final,
                      latencies, None, None, None, None)

    sig_neg = np.exp(log_q)                    # 1 - p per stage, underflow-safe
    # y=0 term is p * (1 - p_j) / (1 - p): <= 1 analytically, so summing the
    # exponents before exponentiating cannot overflow.
    neg_term = np.exp((log_p_final - log_1mp)[:, None] + log_q)
    dZ_nll = wgt[:, None] * np.where(y[:, None] > 0, -sig_neg, neg_term)
    grad_nll = _accumulate_weight_grad(model, packed, dZ_nll)

    dZ_cost = sig_neg * suffix
    grad_cost = _accumulate_weight_grad(model, packed, dZ_cost)

    size_coef = -expit(cfg.gamma * (cfg.result_floor - counts_final)) * mratio * pen_scale
    dZ_size = np.repeat(size_coef, sizes)[:, None] * P[:, -1][:, None] * sig_neg
    grad_size = _accumulate_weight_grad(model, packed, dZ_size)

    lat_coef = expit(cfg.gamma * (latencies - cfg.latency_ceiling)) * mratio * pen_scale
    dZ_lat = np.repeat(lat_coef, sizes)[:, None] * sig_neg * lat_suffix
    grad_latency = _accumulate_weight_grad(model, packed, dZ_lat)

    return _Terms(nll, cost, size_penalty, latency_penalty, counts_final, latencies,
                  grad_nll, grad_cost, grad_size, grad_latency)


def _as_packed(data) -> PackedDataset:
    return data if isinstance(data, PackedDataset) else pack_groups(data)


def weighted_nll(model: CascadeModel, data, cfg: ObjectiveConfig) -> float:
    """Behavior-weighted negative log-likelihood of the cascade on ``data``."""
    return _evaluate_terms(model, _as_packed(data), cfg, want_grad=False).nll


def expected_count(model: CascadeModel, group: QueryGroup, j: int) -> float:
    """Expected number of the query's recalled items passing the first ``j``
    stages: (M_q / N_q) * sum_i P(pass stages 1..j). ``j = 0`` returns M_q."""
    T = model.n_stages
    if not 0 <= j <= T:
        raise ValueError(f"stage index {j} out of range 0..{T}")
    if j == 0:
        return float(group.recalled_count)
    packed = pack_groups([group])
    _, cum_log_p = batch_log_pass(model, packed)
    return float(group.recalled_count / group.size * np.sum(np.exp(cum_log_p[:, j - 1])))


def dataset_expected_count(model: CascadeModel, data, j: int) -> float:
    """Unscaled dataset-level expectation: sum over all instances of the
    probability of passing the first ``j`` stages (``j = 0`` counts them all)."""
    packed = _as_packed(data)
    T = model.n_stages
    if not 0 <= j <= T:
        raise ValueError(f"stage index {j} out of range 0..{T}")
    if j == 0:
        return float(packed.n_instances)
    _, cum_log_p = batch_log_pass(model, packed)
    return float(np.sum(np.exp(cum_log_p[:, j - 1])))


def expected_cost(model: CascadeModel, data) -> float:
    """Total expected CPU cost: every item entering stage j pays t_j, with all
    instances entering stage 1 and no cost beyond the final stage."""
    packed = _as_packed(data)
    t = stage_costs(model.assignment, model.schema)
    total = t[0] * packed.n_instances
    for j in range(1, model.n_stages):
        total += t[j] * dataset_expected_count(model, packed, j)
    return float(total)


def expected_latency(model: CascadeModel, group: QueryGroup, cfg: ObjectiveConfig | None = None) -> float:
    """Expected latency of one query in cost units.

    Default charges stage j's cost to the items expected to enter it
    (all M_q recalled items enter stage 1). With ``latency_survivor_form``
    the cost is charged to stage j's survivors instead.
    """
    survivor_form = bool(cfg and cfg.latency_survivor_form)
    t = stage_costs(model.assignment, model.schema)
    T = model.n_stages
    if survivor_form:
        return float(sum(t[j] * expected_count(model, group, j + 1) for j in range(T)))
    return float(sum(t[j] * expected_count(model, group, j) for j in range(T)))


def _masked_coeffs(cfg: ObjectiveConfig, objective: str) -> tuple[float, float, float]:
    if objective not in OBJECTIVE_LEVELS:
        raise ValueError(f"objective must be one of {OBJECTIVE_LEVELS}, got {objective!r}")
    beta = cfg.beta if objective in ("l2", "l3") else 0.0
    delta = cfg.delta if objective == "l3" else 0.0
    lat_w = cfg.latency_penalty_weight if objective == "l3" else 0.0
    return beta, delta, lat_w


def _reg_value_and_grad(w: np.ndarray, cfg: ObjectiveConfig, want_grad: bool):
    if cfg.squared_l2:
        val = float(w @ w)
        grad = 2.0 * w if want_grad else None
    else:
        norm = float(np.linalg.norm(w))
        val = norm
        if want_grad:
            grad = w / norm if norm > 0 else np.zeros_like(w)
        else:
            grad = None
    return val, grad


def loss(model: CascadeModel, data, cfg: ObjectiveConfig, objective: str = "l3",
         want_grad: bool = True) -> LossBreakdown:
    """Loss breakdown (and analytic gradient) at the requested objective level."""
    packed = _as_packed(data)
    beta, delta, lat_w = _masked_coeffs(cfg, objective)
    terms = _evaluate_terms(model, packed, cfg, want_grad)
    w = model.flat_weights()
    reg, reg_grad = _reg_value_and_grad(w, cfg, want_grad)

    total = (terms.nll + cfg.alpha * reg + beta * terms.cost
             + delta * terms.size_penalty + lat_w * terms.latency_penalty)
    if want_grad:
        gradient = (terms.grad_nll + cfg.alpha * reg_grad + beta * terms.grad_cost
                    + delta * terms.grad_size + lat_w * terms.grad_latency)
    else:
        gradient = np.zeros(0)
    return LossBreakdown(
        total=float(total), nll=terms.nll, l2=reg, expected_cost=terms.cost,
        size_penalty=terms.size_penalty, latency_penalty=terms.latency_penalty,
        gradient=gradient, objective=objective,
    )


def loss_l1(model: CascadeModel, data, cfg: ObjectiveConfig) -> LossBreakdown:
    return loss(model, data, cfg, "l1")


def loss_l2(model: CascadeModel, data, cfg: ObjectiveConfig) -> LossBreakdown:
    return loss(model, data, cfg, "l2")


def loss_l3(model: CascadeModel, data, cfg: ObjectiveConfig) -> LossBreakdown:
    return loss(model, data, cfg, "l3")


def per_query_expectations(model: CascadeModel, data, cfg: ObjectiveConfig):
    """(expected final counts, expected latencies) per query, recall-scaled."""
    packed = _as_packed(data)
    terms = _evaluate_terms(model, packed, cfg, want_grad=False)
    return terms.counts_final, terms.latencies
