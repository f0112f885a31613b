"""Merging mechanics: mean-merge hand values, grouped/expanded forward
equivalence, oracle purity, whole-model conversion protocol."""

import numpy as np
import pytest

from gqakit.errors import ConfigError, GroupingError, PlanError
from gqakit.grouping import HeadGrouping, SearchConfig
from gqakit.merge import (LayerGroupingPlan, attention_param_entries,
                          convert_model, group_and_convert,
                          layer_projection_oracle, merge_heads,
                          merge_layer_heads)
from gqakit.model import (AttentionLayerWeights, ModelConfig, forward,
                          init_model, named_tensors)

CFG = ModelConfig(n_layers=2, n_heads=4, head_dim=4, d_model=16,
                  mlp_hidden=24, vocab_size=13, max_seq_len=8, n_classes=3)
CFG_1L = ModelConfig(n_layers=1, n_heads=4, head_dim=2, d_model=8,
                     mlp_hidden=12, vocab_size=9, max_seq_len=6, n_classes=2)


def make_batch(cfg, b_sz, t, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg.vocab_size, size=(b_sz, t))


def make_evaluator(cfg, seed):
    """Deterministic checkpoint score: squashed logit mass on a fixed batch."""
    batch = make_batch(cfg, 2, 5, seed)

    def evaluate(ckpt):
        logits, _ = forward(ckpt, batch)
        return float(np.tanh(np.abs(logits).mean()))

    return evaluate


class TestMergeHeads:
    def test_mean_of_two_heads(self):
        attn = AttentionLayerWeights(
            w_q=np.zeros((2, 1, 2)),
            w_k=np.array([[[1.0, 3.0]], [[3.0, 5.0]]]),
            w_v=np.array([[[2.0, 0.0]], [[4.0, 6.0]]]),
            w_o=np.zeros((2, 2)))
        both = HeadGrouping.from_groups([[0, 1]], 2)
        plan = LayerGroupingPlan(0, both, both)
        merged = merge_heads(attn, plan)
        assert merged.w_k.shape == (1, 1, 2)
        assert np.array_equal(merged.w_k[0], [[2.0, 4.0]])
        assert np.array_equal(merged.w_v[0], [[3.0, 3.0]])

    def test_opposite_heads_cancel(self):
        w = np.random.default_rng(0).normal(size=(1, 2))
        attn = AttentionLayerWeights(
            w_q=np.zeros((2, 1, 2)), w_k=np.stack([w, -w]),
            w_v=np.stack([w, -w]), w_o=np.zeros((2, 2)))
        both = HeadGrouping.from_groups([[0, 1]], 2)
        merged = merge_heads(attn, LayerGroupingPlan(0, both, both))
        assert np.all(merged.w_k == 0.0)
        assert np.all(merged.w_v == 0.0)

    def test_key_and_value_groupings_are_independent(self):
        attn = AttentionLayerWeights(
            w_q=np.zeros((4, 1, 1)),
            w_k=np.arange(4.0).reshape(4, 1, 1),
            w_v=np.arange(4.0).reshape(4, 1, 1) * 10,
            w_o=np.zeros((4, 4)))
        plan = LayerGroupingPlan(
            0,
            HeadGrouping.from_groups([[0, 1], [2, 3]], 4),
            HeadGrouping.from_groups([[0, 3], [1, 2]], 4))
        merged = merge_heads(attn, plan)
        assert merged.w_k.ravel().tolist() == [0.5, 2.5]
        assert merged.w_v.ravel().tolist() == [15.0, 15.0]

    def test_group_rows_follow_plan_order(self):
        attn = AttentionLayerWeights(
            w_q=np.zeros((4, 1, 1)),
            w_k=np.arange(4.0).reshape(4, 1, 1),
            w_v=np.arange(4.0).reshape(4, 1, 1),
            w_o=np.zeros((4, 4)))
        g = HeadGrouping.from_groups([[1, 3], [0, 2]], 4)  # canonical: [[0,2],[1,3]]
        merged = merge_heads(attn, LayerGroupingPlan(0, g, g))
        assert g.groups == ((0, 2), (1, 3))
        assert merged.w_k.ravel().tolist() == [1.0, 2.0]

    def test_rejects_already_grouped_input(self):
        attn = AttentionLayerWeights(
            w_q=np.zeros((4, 1, 1)), w_k=np.zeros((2, 1, 1)),
            w_v=np.zeros((4, 1, 1)), w_o=np.zeros((4, 4)))
        g = HeadGrouping.from_groups([[0, 1], [2, 3]], 4)
        with pytest.raises(GroupingError):
            merge_heads(attn, LayerGroupingPlan(0, g, g))

    def test_rejects_wrong_head_count(self):
        attn = AttentionLayerWeights(
            w_q=np.zeros((4, 1, 1)), w_k=np.zeros((4, 1, 1)),
            w_v=np.zeros((4, 1, 1)), w_o=np.zeros((4, 4)))
        g2 = HeadGrouping.from_groups([[0, 1]], 2)
        with pytest.raises(GroupingError):
            merge_heads(attn, LayerGroupingPlan(0, g2, g2))


class TestMergeLayerHeads:
    def test_sets_grouping_and_shapes(self):
        ckpt = init_model(CFG, 0)
        kg = HeadGrouping.from_groups([[0, 2], [1, 3]], 4)
        vg = HeadGrouping.from_groups([[0, 1], [2, 3]], 4)
        out = merge_layer_heads(ckpt, 0, kg, vg)
        assert out.layers[0].attn.w_k.shape[0] == 2
        assert out.kv_grouping[0] == (kg, vg)
        sing = HeadGrouping.singletons(4)
        assert out.kv_grouping[1] == (sing, sing)
        # Input untouched.
        assert ckpt.kv_grouping is None
        assert ckpt.layers[0].attn.w_k.shape[0] == 4

    def test_singleton_merge_is_identity_on_logits(self):
        ckpt = init_model(CFG, 1)
        sing = HeadGrouping.singletons(4)
        out = merge_layer_heads(ckpt, 0, sing, sing)
        batch = make_batch(CFG, 3, 6, 0)
        a, _ = forward(ckpt, batch)
        b, _ = forward(out, batch)
        assert np.abs(a - b).max() < 1e-12

    def test_identical_heads_merge_without_logit_change(self):
        ckpt = init_model(CFG, 2)
        for lw in ckpt.layers:
            lw.attn.w_k[1] = lw.attn.w_k[0]
            lw.attn.w_k[3] = lw.attn.w_k[2]
            lw.attn.w_v[1] = lw.attn.w_v[0]
            lw.attn.w_v[3] = lw.attn.w_v[2]
        g = HeadGrouping.from_groups([[0, 1], [2, 3]], 4)
        out = ckpt
        for li in range(CFG.n_layers):
            out = merge_layer_heads(out, li, g, g)
        batch = make_batch(CFG, 3, 6, 1)
        a, _ = forward(ckpt, batch)
        b, _ = forward(out, batch)
        assert np.abs(a - b).max() < 1e-9

    def test_remerge_same_grouping_is_noop_on_weights(self):
        ckpt = init_model(CFG, 3)
        g = HeadGrouping.from_groups([[0, 3], [1, 2]], 4)
        once = merge_layer_heads(ckpt, 0, g, g)
        twice = merge_layer_heads(once, 0, g, g)
        assert np.array_equal(once.layers[0].attn.w_k, twice.layers[0].attn.w_k)
        assert np.array_equal(once.layers[0].attn.w_v, twice.layers[0].attn.w_v)

    def test_grouped_forward_equals_expanded_forward(self):
        ckpt = init_model(CFG, 4)
        kg = HeadGrouping.from_groups([[0, 1, 2], [3]], 4)
        vg = HeadGrouping.from_groups([[0], [1, 2, 3]], 4)
        grouped = merge_layer_heads(ckpt, 1, kg, vg)
        # Expanded twin: per-head tensors holding the shared group means.
        expanded = init_model(CFG, 4)
        kmap, vmap = grouped.layer_maps(1)
        expanded.layers[1].attn.w_k = grouped.layers[1].attn.w_k[kmap]
        expanded.layers[1].attn.w_v = grouped.layers[1].attn.w_v[vmap]
        batch = make_batch(CFG, 3, 7, 2)
        a, _ = forward(grouped, batch)
        b, _ = forward(expanded, batch)
        assert np.abs(a - b).max() < 1e-12

    def test_rejects_bad_layer_index(self):
        ckpt = init_model(CFG, 0)
        sing = HeadGrouping.singletons(4)
        with pytest.raises(PlanError):
            merge_layer_heads(ckpt, 2, sing, sing)


class TestParamAccounting:
    def test_counts_match_tensor_sizes(self):
        ckpt = init_model(CFG, 5)
        d, h, dh = CFG.d_model, CFG.n_heads, CFG.head_dim
        per_layer = h * d * dh * 3 + d * d
        assert attention_param_entries(ckpt) == CFG.n_layers * per_layer
        g = HeadGrouping.from_groups([[0, 1], [2, 3]], 4)
        merged = merge_layer_heads(ckpt, 0, g, g)
        saved = 2 * 2 * d * dh  # two fewer key and value tensors
        assert attention_param_entries(merged) == CFG.n_layers * per_layer - saved


class TestLayerProjectionOracle:
    def test_matches_manual_merge_for_all_partitions(self):
        ckpt = init_model(CFG_1L, 6)
        evaluate = make_evaluator(CFG_1L, 3)
        oracle = layer_projection_oracle(ckpt, 0, "key", evaluate)
        sing = HeadGrouping.singletons(4)
        for groups in ([[0, 1], [2, 3]], [[0, 2], [1, 3]], [[0, 3], [1, 2]]):
            g = HeadGrouping.from_groups(groups, 4)
            assert oracle(g) == evaluate(merge_layer_heads(ckpt, 0, g, sing))

    def test_value_oracle_keeps_keys_per_head(self):
        ckpt = init_model(CFG_1L, 7)
        seen = []

        def spy(cand):
            seen.append(cand)
            return 0.5

        oracle = layer_projection_oracle(ckpt, 0, "value", spy)
        g = HeadGrouping.from_groups([[0, 1, 2, 3]], 4)
        oracle(g)
        kg, vg = seen[0].kv_grouping[0]
        assert kg == HeadGrouping.singletons(4)
        assert vg == g
        assert seen[0].layers[0].attn.w_k.shape[0] == 4
        assert seen[0].layers[0].attn.w_v.shape[0] == 1

    def test_does_not_mutate_input(self):
        ckpt = init_model(CFG_1L, 8)
        before = {n: t.copy() for n, t in named_tensors(ckpt)}
        oracle = layer_projection_oracle(ckpt, 0, "key", make_evaluator(CFG_1L, 4))
        oracle(HeadGrouping.from_groups([[0, 1], [2, 3]], 4))
        assert ckpt.kv_grouping is None
        for name, t in named_tensors(ckpt):
            assert np.array_equal(before[name], t), name

    def test_rejects_bad_projection_and_layer(self):
        ckpt = init_model(CFG_1L, 0)
        with pytest.raises(ConfigError):
            layer_projection_oracle(ckpt, 0, "query", lambda c: 0.0)
        with pytest.raises(PlanError):
            layer_projection_oracle(ckpt, 1, "key", lambda c: 0.0)


class TestConvertModel:
    def test_applies_plans_in_layer_order(self):
        ckpt = init_model(CFG, 9)
        g = HeadGrouping.from_groups([[0, 1], [2, 3]], 4)
        plans = [LayerGroupingPlan(1, g, g), LayerGroupingPlan(0, g, g)]
        out = convert_model(ckpt, plans)
        assert out.kv_grouping[0] == (g, g)
        assert out.kv_grouping[1] == (g, g)

    def test_rejects_duplicate_layer(self):
        ckpt = init_model(CFG, 0)
        g = HeadGrouping.from_groups([[0, 1], [2, 3]], 4)
        with pytest.raises(PlanError):
            convert_model(ckpt, [LayerGroupingPlan(0, g, g),
                                 LayerGroupingPlan(0, g, g)])


class TestGroupAndConvert:
    def test_neighbour_no_oracle_and_param_counts(self):
        ckpt = init_model(CFG, 10)
        out, report = group_and_convert(ckpt, 2, "neighbour")
        assert report.oracle_calls == 0
        assert report.strategy == "neighbour"
        expect = HeadGrouping.from_groups([[0, 1], [2, 3]], 4)
        for li in range(CFG.n_layers):
            assert out.kv_grouping[li] == (expect, expect)
        assert report.attn_params_before == attention_param_entries(ckpt)
        assert report.attn_params_after == attention_param_entries(out)
        assert report.attn_params_after < report.attn_params_before

    def test_group_size_one_preserves_logits_and_params(self):
        ckpt = init_model(CFG, 11)
        out, report = group_and_convert(ckpt, 1, "neighbour")
        batch = make_batch(CFG, 3, 6, 5)
        a, _ = forward(ckpt, batch)
        b, _ = forward(out, batch)
        assert np.abs(a - b).max() < 1e-12
        assert report.attn_params_after == report.attn_params_before

    def test_symmetric_oracle_call_accounting(self):
        ckpt = init_model(CFG, 12)
        evaluate = make_evaluator(CFG, 6)
        calib = make_batch(CFG, 2, 5, 7)
        scfg = SearchConfig(group_size=2, n_iters=5, seed=0)
        out, report = group_and_convert(
            ckpt, 2, "symmetric", calibration_batch=calib, evaluate=evaluate,
            search_cfg=scfg)
        # two layers x two projections x (initial eval + 5 iterations)
        assert report.oracle_calls == 2 * 2 * 6
        for plan in report.plans:
            assert plan.key_search.oracle_calls == 6
            assert plan.key_grouping.is_uniform(2)
            assert plan.value_grouping.is_uniform(2)

    def test_sequential_capture_provenance(self):
        ckpt = init_model(CFG, 13)
        evaluate = make_evaluator(CFG, 8)
        calib = make_batch(CFG, 2, 5, 9)
        scfg = SearchConfig(group_size=2, n_iters=3, seed=1)
        _, report = group_and_convert(
            ckpt, 2, "symmetric", calibration_batch=calib, evaluate=evaluate,
            search_cfg=scfg)
        assert report.plans[0].capture_provenance == ()
        assert report.plans[1].capture_provenance == ((2, 2),)

    def test_asymmetric_preserves_group_count(self):
        ckpt = init_model(CFG, 14)
        evaluate = make_evaluator(CFG, 10)
        calib = make_batch(CFG, 2, 5, 11)
        scfg = SearchConfig(group_size=2, n_iters=8, seed=2)
        out, report = group_and_convert(
            ckpt, 2, "asymmetric", calibration_batch=calib, evaluate=evaluate,
            search_cfg=scfg)
        for li, plan in enumerate(report.plans):
            assert plan.key_grouping.n_groups == 2
            assert plan.value_grouping.n_groups == 2
            assert out.layers[li].attn.w_k.shape[0] == 2

    def test_weight_metric_needs_no_calibration(self):
        ckpt = init_model(CFG_1L, 15)
        evaluate = make_evaluator(CFG_1L, 12)
        _, report = group_and_convert(
            ckpt, 2, "symmetric", evaluate=evaluate, metric="weight",
            search_cfg=SearchConfig(group_size=2, n_iters=3, seed=0))
        assert report.metric == "weight"

    def test_deterministic_per_seed(self):
        evaluate = make_evaluator(CFG, 13)
        calib = make_batch(CFG, 2, 5, 14)
        reports = []
        for _ in range(2):
            ckpt = init_model(CFG, 16)
            _, rep = group_and_convert(
                ckpt, 2, "symmetric", calibration_batch=calib,
                evaluate=evaluate, search_cfg=SearchConfig(group_size=2, n_iters=4, seed=5))
            reports.append(rep.to_dict())
        assert reports[0] == reports[1]

    def test_brute_dominates_search_on_first_layer(self):
        evaluate = make_evaluator(CFG_1L, 15)
        calib = make_batch(CFG_1L, 2, 5, 16)
        ckpt = init_model(CFG_1L, 17)
        _, rep_b = group_and_convert(ckpt, 2, "brute", evaluate=evaluate)
        _, rep_s = group_and_convert(
            ckpt, 2, "symmetric", calibration_batch=calib, evaluate=evaluate,
            search_cfg=SearchConfig(group_size=2, n_iters=6, seed=0))
        assert rep_b.plans[0].key_search.best_acc >= rep_s.plans[0].key_search.best_acc
        assert rep_b.plans[0].value_search.best_acc >= rep_s.plans[0].value_search.best_acc
        # 3 equal-size pair partitions per projection.
        assert rep_b.plans[0].key_search.oracle_calls == 3

    def test_validation_errors(self):
        ckpt = init_model(CFG_1L, 0)
        evaluate = make_evaluator(CFG_1L, 0)
        with pytest.raises(ConfigError):
            group_and_convert(ckpt, 2, "annealing")
        with pytest.raises(GroupingError):
            group_and_convert(ckpt, 3, "neighbour")
        with pytest.raises(ConfigError):
            group_and_convert(ckpt, 2, "symmetric",
                              calibration_batch=make_batch(CFG_1L, 1, 4, 0))
        with pytest.raises(ConfigError):
            group_and_convert(ckpt, 2, "symmetric", evaluate=evaluate)
        with pytest.raises(ConfigError):
            group_and_convert(ckpt, 2, "symmetric", evaluate=evaluate,
                              calibration_batch=make_batch(CFG_1L, 1, 4, 0),
                              search_cfg=SearchConfig(group_size=4))
        with pytest.raises(ConfigError):
            group_and_convert(ckpt, 2, "neighbour", metric="cosine")

    def test_rejects_already_converted(self):
        ckpt = init_model(CFG, 18)
        once, _ = group_and_convert(ckpt, 2, "neighbour")
        with pytest.raises(PlanError):
            group_and_convert(once, 2, "neighbour")
