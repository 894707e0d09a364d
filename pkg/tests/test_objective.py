import math

import numpy as np
import pytest

from cascade_ranker.core import (
    Feature,
    FeatureSchema,
    Instance,
    QueryGroup,
    StageAssignment,
    pack_groups,
)
from cascade_ranker.datagen import GenConfig, default_assignment, default_schema, generate
from cascade_ranker.objective import (
    LossBreakdown,
    ObjectiveConfig,
    dataset_expected_count,
    expected_cost,
    expected_count,
    expected_latency,
    instance_weight,
    loss,
    loss_l1,
    loss_l2,
    loss_l3,
    softplus_penalty,
    weighted_nll,
)
from cascade_ranker.trainer import init_weights


def _logit(p):
    return math.log(p / (1.0 - p))


def _schema2(costs=(0.02, 0.74)):
    return FeatureSchema(tuple(Feature(f"f{k}", c) for k, c in enumerate(costs)),
                         query_bin_edges=(10,))


def _group_with_final_probs(schema, probs, mcount, label=0, price=math.e, qid="q0"):
    """T=1 group whose instances have the given final probabilities (via the
    first feature with unit weight)."""
    instances = tuple(
        Instance(np.array([_logit(p)] + [0.0] * (schema.item_dim - 1)), label, price)
        for p in probs
    )
    return QueryGroup(qid, schema.query_onehot(mcount), mcount, instances)


def _unit_model(schema, stages):
    """Model with item weight 1.0 on each stage's first feature, zero query weights."""
    asg = StageAssignment(stages)
    item = tuple(np.array([1.0] + [0.0] * (len(s) - 1)) for s in asg.stages)
    query = tuple(np.zeros(schema.query_feature_dim) for _ in asg.stages)
    from cascade_ranker.core import CascadeModel
    return CascadeModel(item, query, asg, schema)


class TestInstanceWeight:
    def test_purchase(self):
        cfg = ObjectiveConfig(purchase_weight=10, price_weight=3)
        inst = Instance(np.zeros(1), label=2, price=math.e)
        assert instance_weight(inst, cfg) == pytest.approx(30.0)

    def test_click(self):
        cfg = ObjectiveConfig(purchase_weight=10, price_weight=3)
        inst = Instance(np.zeros(1), label=1, price=math.e)
        assert instance_weight(inst, cfg) == pytest.approx(3.0)

    def test_no_behavior_is_one(self):
        cfg = ObjectiveConfig(purchase_weight=10, price_weight=3)
        for price in (0.5, 1.0, math.e, 1e6):
            assert instance_weight(Instance(np.zeros(1), 0, price), cfg) == 1.0

    def test_nonpositive_price_rejected(self):
        cfg = ObjectiveConfig()
        bad = Instance(np.zeros(1), 1, 1.0)
        object.__setattr__(bad, "price", 0.0)  # bypass dataclass freezing
        with pytest.raises(ValueError, match="positive"):
            instance_weight(bad, cfg)


class TestWeightedNll:
    def test_single_positive_zero_weights_t1(self):
        schema = _schema2()
        model = init_weights(schema, StageAssignment(((0,), (1,))), 0, 0.0)
        model1 = init_weights(schema, StageAssignment(((0, 1),)), 0, 0.0)
        cfg = ObjectiveConfig(purchase_weight=1, price_weight=1)
        g = QueryGroup("q", schema.query_onehot(5), 5,
                       (Instance(np.zeros(2), 1, math.e),))  # wgt = 1
        assert weighted_nll(model1, [g], cfg) == pytest.approx(math.log(2), rel=1e-12)
        assert weighted_nll(model, [g], cfg) == pytest.approx(math.log(4), rel=1e-12)

    def test_weight_linearity(self):
        # weight 2 on one instance == two copies at weight 1
        schema = _schema2()
        model = init_weights(schema, StageAssignment(((0, 1),)), 3, 0.5)
        cfg = ObjectiveConfig(purchase_weight=1, price_weight=1)
        x = np.array([0.4, -0.2])
        heavy = QueryGroup("q", schema.query_onehot(5), 5,
                           (Instance(x, 1, math.e ** 2),))             # wgt = 2
        twice = QueryGroup("q", schema.query_onehot(5), 5,
                           (Instance(x, 1, math.e), Instance(x, 1, math.e)))
        assert weighted_nll(model, [heavy], cfg) == pytest.approx(
            weighted_nll(model, [twice], cfg), rel=1e-12)

    def test_reduces_to_unweighted_loglik(self):
        # purchase_weight 1, all prices e, price_weight 1 -> every wgt = 1
        schema = default_schema()
        asg = default_assignment(schema)
        model = init_weights(schema, asg, 5, 0.4)
        rng = np.random.default_rng(8)
        groups = [
            QueryGroup(f"q{i}", schema.query_onehot(30), 30, tuple(
                Instance(rng.standard_normal(5), int(rng.random() < 0.3), math.e)
                for _ in range(6)))
            for i in range(4)
        ]
        cfg = ObjectiveConfig(purchase_weight=1, price_weight=1)
        from cascade_ranker.cascade import batch_final_probs
        p = batch_final_probs(model, groups)
        y = pack_groups(groups).y
        plain = -float(np.sum(y * np.log(p) + (1 - y) * np.log(1 - p)))
        assert weighted_nll(model, groups, cfg) == pytest.approx(plain, rel=1e-10)

    def test_extreme_logits_stay_finite(self):
        schema = _schema2()
        model = _unit_model(schema, ((0,), (1,)))
        cfg = ObjectiveConfig()
        g = QueryGroup("q", schema.query_onehot(5), 5, (
            Instance(np.array([800.0, 900.0]), 0, 2.0),
            Instance(np.array([-900.0, 700.0]), 1, 2.0),
        ))
        val = weighted_nll(model, [g], cfg)
        assert np.isfinite(val)
        bd = loss(model, [g], cfg, "l1")
        assert np.all(np.isfinite(bd.gradient))


class TestExpectedCount:
    def test_two_instances(self):
        schema = _schema2()
        model = _unit_model(schema, ((0, 1),))
        g = _group_with_final_probs(schema, [0.5, 0.25], mcount=2)
        assert expected_count(model, g, 1) == pytest.approx(0.75, rel=1e-12)

    def test_recall_scaling(self):
        schema = _schema2()
        model = _unit_model(schema, ((0, 1),))
        g = _group_with_final_probs(schema, [0.5, 0.25], mcount=200)
        assert expected_count(model, g, 1) == pytest.approx(75.0, rel=1e-12)

    def test_stage_zero_is_recalled_count(self):
        schema = _schema2()
        model = _unit_model(schema, ((0, 1),))
        g = _group_with_final_probs(schema, [0.5, 0.25], mcount=123)
        assert expected_count(model, g, 0) == 123.0

    def test_monte_carlo_consistency(self):
        # Eq-7-style expectations vs Bernoulli per-stage survival over 1e4
        # trials, within 3 standard errors.
        schema = default_schema()
        asg = default_assignment(schema)
        model = init_weights(schema, asg, 13, 0.8)
        rng = np.random.default_rng(99)
        group = QueryGroup("q0", schema.query_onehot(40), 40, tuple(
            Instance(rng.standard_normal(5), 0, 2.0) for _ in range(12)))
        from cascade_ranker.cascade import score_group
        stage_p = np.stack([p.per_stage for p in score_group(model, group)])  # (n, T)

        trials = 10_000
        mc = np.random.default_rng(7)
        draws = mc.random((trials, *stage_p.shape)) < stage_p    # (trials, n, T)
        alive = np.cumprod(draws, axis=2)                        # survived through stage
        counts = alive.sum(axis=1)                               # (trials, T)
        for j in range(1, model.n_stages + 1):
            exact = dataset_expected_count(model, [group], j)
            sample_mean = counts[:, j - 1].mean()
            se = counts[:, j - 1].std(ddof=1) / math.sqrt(trials)
            assert abs(sample_mean - exact) <= 3 * max(se, 1e-12), (
                f"stage {j}: MC {sample_mean} vs exact {exact} (se {se})")


class TestExpectedCost:
    def test_arithmetic(self):
        # 100 instances at stage-1 pass prob 0.1: cost = 100*0.02 + 10*0.74
        schema = _schema2()
        model = _unit_model(schema, ((0,), (1,)))
        probs = [0.1] * 100
        g = QueryGroup("q", schema.query_onehot(100), 100, tuple(
            Instance(np.array([_logit(p), 0.0]), 0, 2.0) for p in probs))
        assert expected_cost(model, [g]) == pytest.approx(9.4, rel=1e-9)

    def test_zero_pass_limit(self):
        schema = _schema2()
        model = _unit_model(schema, ((0,), (1,)))
        g = QueryGroup("q", schema.query_onehot(50), 50, tuple(
            Instance(np.array([-800.0, 0.0]), 0, 2.0) for _ in range(50)))
        assert expected_cost(model, [g]) == pytest.approx(50 * 0.02)

    def test_single_stage_cost_ignores_weights(self):
        schema = _schema2()
        for seed in range(3):
            model = init_weights(schema, StageAssignment(((0, 1),)), seed, 2.0)
            g = _group_with_final_probs(schema, [0.9, 0.1, 0.5], mcount=10)
            assert expected_cost(model, [g]) == pytest.approx(3 * 0.76)


class TestExpectedLatency:
    def test_single_stage(self):
        schema = _schema2()
        model = _unit_model(schema, ((0,),))
        g = QueryGroup("q", schema.query_onehot(100), 100,
                       (Instance(np.array([0.0, 0.0]), 0, 2.0),))
        assert expected_latency(model, g) == pytest.approx(2.0)

    def test_two_stage_arithmetic(self):
        # M=100, t=(0.02, 0.74), E[Count_1]=25 -> 2 + 18.5
        schema = _schema2()
        model = _unit_model(schema, ((0,), (1,)))
        g = QueryGroup("q", schema.query_onehot(100), 100,
                       (Instance(np.array([_logit(0.25), 0.0]), 0, 2.0),))
        assert expected_count(model, g, 1) == pytest.approx(25.0, rel=1e-12)
        assert expected_latency(model, g) == pytest.approx(20.5, rel=1e-9)

    def test_zero_probability_floor(self):
        schema = _schema2()
        model = _unit_model(schema, ((0,), (1,)))
        g = QueryGroup("q", schema.query_onehot(100), 100,
                       (Instance(np.array([-800.0, 0.0]), 0, 2.0),))
        assert expected_latency(model, g) == pytest.approx(2.0)

    def test_survivor_form_flag(self):
        schema = _schema2()
        model = _unit_model(schema, ((0,), (1,)))
        g = QueryGroup("q", schema.query_onehot(100), 100,
                       (Instance(np.array([_logit(0.25), 0.0]), 0, 2.0),))
        cfg = ObjectiveConfig(latency_survivor_form=True)
        # survivors: t1*E[C1] + t2*E[C2]; E[C2] = 100 * 0.25 * 0.5
        want = 0.02 * 25.0 + 0.74 * 12.5
        assert expected_latency(model, g, cfg) == pytest.approx(want, rel=1e-9)


class TestSoftplusPenalty:
    def test_at_threshold(self):
        for gamma in (1.0, 10.0, 100.0):
            assert softplus_penalty(200.0, 200.0, gamma) == pytest.approx(
                math.log(2) / gamma, rel=1e-12)

    def test_deep_hinge_region(self):
        val = softplus_penalty(190.0, 200.0, 10.0)
        assert val == pytest.approx(10.0, abs=1e-9)

    def test_satisfied_region_vanishes(self):
        val = softplus_penalty(210.0, 200.0, 10.0)
        assert 0.0 <= val <= math.exp(-100) / 10 * (1 + 1e-9)

    def test_invalid_gamma(self):
        with pytest.raises(ValueError, match="gamma"):
            softplus_penalty(1.0, 2.0, 0.0)

    def test_hinge_bound_on_grid(self):
        # 0 <= softplus - hinge <= ln(2)/gamma, equality at z = threshold
        theta = 200.0
        z = np.linspace(theta - 50, theta + 50, 10_000)
        for gamma in (1.0, 10.0, 100.0):
            sp = np.array([softplus_penalty(zi, theta, gamma) for zi in z])
            hinge = np.maximum(theta - z, 0.0)
            gap = sp - hinge
            assert gap.min() >= 0.0
            assert gap.max() <= math.log(2) / gamma + 1e-12
            assert abs(z[np.argmax(gap)] - theta) <= (z[1] - z[0]) + 1e-12


def _random_problem(seed, n_groups=6, size=5, t_l=40.0, n_o=8.0):
    schema = default_schema()
    asg = default_assignment(schema)
    rng = np.random.default_rng(seed)
    groups = []
    for i in range(n_groups):
        m = int(rng.integers(size, 40))
        groups.append(QueryGroup(
            f"q{i}", schema.query_onehot(m), m, tuple(
                Instance(rng.standard_normal(5), int(rng.integers(0, 3)),
                         float(1.1 + rng.random() * 20))
                for _ in range(size))))
    model = init_weights(schema, asg, seed + 100, 0.7)
    cfg = ObjectiveConfig(alpha=0.3, beta=0.7, gamma=10.0, delta=0.9,
                          latency_penalty_weight=0.4, result_floor=n_o,
                          latency_ceiling=t_l)
    return model, groups, cfg


class TestLossComposition:
    def test_zero_coefficients_collapse_to_nll(self):
        model, groups, _ = _random_problem(1)
        cfg = ObjectiveConfig(alpha=0.0, beta=0.0, delta=0.0, latency_penalty_weight=0.0)
        nll = weighted_nll(model, groups, cfg)
        for fn in (loss_l1, loss_l2, loss_l3):
            assert fn(model, groups, cfg).total == pytest.approx(nll, rel=1e-12)

    def test_zero_weight_single_positive(self):
        schema = _schema2()
        model = init_weights(schema, StageAssignment(((0, 1),)), 0, 0.0)
        cfg = ObjectiveConfig(alpha=1.0, purchase_weight=1, price_weight=1)
        g = QueryGroup("q", schema.query_onehot(5), 5, (Instance(np.zeros(2), 1, math.e),))
        assert loss_l1(model, [g], cfg).total == pytest.approx(math.log(2), rel=1e-12)

    def test_bitwise_recomposition(self):
        model, groups, cfg = _random_problem(2)
        for objective, (beta, delta, latw) in {
            "l1": (0.0, 0.0, 0.0),
            "l2": (cfg.beta, 0.0, 0.0),
            "l3": (cfg.beta, cfg.delta, cfg.latency_penalty_weight),
        }.items():
            bd = loss(model, groups, cfg, objective)
            recomposed = (bd.nll + cfg.alpha * bd.l2 + beta * bd.expected_cost
                          + delta * bd.size_penalty + latw * bd.latency_penalty)
            assert recomposed == bd.total  # bitwise

    def test_all_components_finite(self):
        model, groups, cfg = _random_problem(3)
        bd = loss_l3(model, groups, cfg)
        for v in (bd.total, bd.nll, bd.l2, bd.expected_cost, bd.size_penalty,
                  bd.latency_penalty):
            assert np.isfinite(v)
        assert np.all(np.isfinite(bd.gradient))

    def test_monotone_in_beta_and_delta(self):
        model, groups, cfg = _random_problem(4)
        import dataclasses
        lo = loss_l2(model, groups, dataclasses.replace(cfg, beta=0.5)).total
        hi = loss_l2(model, groups, dataclasses.replace(cfg, beta=1.5)).total
        assert hi > lo  # expected_cost > 0 always (stage-1 term)
        bd = loss_l3(model, groups, cfg)
        if bd.size_penalty > 0:
            lo = loss_l3(model, groups, dataclasses.replace(cfg, delta=0.5)).total
            hi = loss_l3(model, groups, dataclasses.replace(cfg, delta=1.5)).total
            assert hi > lo

    def test_reduction_order_stability(self):
        # vectorized whole-dataset loss vs per-group accumulation
        model, groups, cfg = _random_problem(5, n_groups=12)
        whole = loss_l3(model, groups, cfg)
        nll = sum(weighted_nll(model, [g], cfg) for g in groups)
        assert nll == pytest.approx(whole.nll, rel=1e-10)
        cost = sum(expected_cost(model, [g]) for g in groups)
        assert cost == pytest.approx(whole.expected_cost, rel=1e-10)
        size_pen = sum(
            softplus_penalty(expected_count(model, g, model.n_stages),
                             cfg.result_floor, cfg.gamma) for g in groups)
        assert size_pen == pytest.approx(whole.size_penalty, rel=1e-10)
        # penalty grows when latency exceeds the ceiling: threshold-from-below
        lat_pen = sum(
            softplus_penalty(cfg.latency_ceiling, expected_latency(model, g), cfg.gamma)
            for g in groups)
        assert lat_pen == pytest.approx(whole.latency_penalty, rel=1e-10)


def _fd_gradient(model, groups, cfg, objective, h=1e-5):
    w = model.flat_weights()
    grad = np.zeros_like(w)
    for k in range(w.shape[0]):
        wp, wm = w.copy(), w.copy()
        wp[k] += h
        wm[k] -= h
        fp = loss(model.with_flat_weights(wp), groups, cfg, objective, want_grad=False).total
        fm = loss(model.with_flat_weights(wm), groups, cfg, objective, want_grad=False).total
        grad[k] = (fp - fm) / (2 * h)
    return grad


class TestGradients:
    @pytest.mark.parametrize("objective", ["l1", "l2", "l3"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_central_differences(self, objective, seed):
        model, groups, cfg = _random_problem(seed)
        analytic = loss(model, groups, cfg, objective).gradient
        numeric = _fd_gradient(model, groups, cfg, objective)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-5

    @pytest.mark.parametrize("kwargs", [
        {"squared_l2": False, "alpha": 1.3},
        {"latency_survivor_form": True},
        {"penalty_per_instance": True},
    ])
    def test_variant_flags(self, kwargs):
        import dataclasses
        model, groups, cfg = _random_problem(6)
        cfg = dataclasses.replace(cfg, **kwargs)
        analytic = loss(model, groups, cfg, "l3").gradient
        numeric = _fd_gradient(model, groups, cfg, "l3")
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert np.max(np.abs(analytic - numeric) / denom) < 2e-5
