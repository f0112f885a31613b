"""Head merging and whole-model conversion to grouped attention.

Merging replaces the per-head key/value projections of a layer by one
mean tensor per group. Conversion walks the layers in order; when a
layer is processed, every earlier layer already carries its final
grouping, so calibration activations reflect the model that will
actually run. Key and value groupings are chosen independently per
layer, each from its own deterministic search stream, and merged
together once both are fixed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from gqakit.errors import ConfigError, GroupingError, PlanError
from gqakit.grouping import (HeadGrouping, SearchConfig, SearchResult,
                             asymmetric_search, brute_force_search,
                             neighbour_grouping, symmetric_search)
from gqakit.model import (AttentionLayerWeights, Checkpoint,
                          capture_activations, copy_checkpoint)
from gqakit.numerics import derive_seed
from gqakit.similarity import METRICS, similarity_matrix

STRATEGIES = ("neighbour", "symmetric", "asymmetric", "brute")

Evaluator = Callable[[Checkpoint], float]


@dataclass
class LayerGroupingPlan:
    """Final key/value groupings for one layer, plus how they were found.

    capture_provenance, when set, echoes the (key, value) group counts
    of every earlier layer at the moment this layer's activations were
    captured: evidence the sequential protocol was followed.
    """

    layer_index: int
    key_grouping: HeadGrouping
    value_grouping: HeadGrouping
    key_search: Optional[SearchResult] = None
    value_search: Optional[SearchResult] = None
    capture_provenance: Optional[tuple[tuple[int, int], ...]] = None

    def to_dict(self) -> dict:
        return {
            "layer_index": self.layer_index,
            "key_grouping": self.key_grouping.to_lists(),
            "value_grouping": self.value_grouping.to_lists(),
            "key_search": None if self.key_search is None else self.key_search.to_dict(),
            "value_search": None if self.value_search is None else self.value_search.to_dict(),
            "capture_provenance":
                None if self.capture_provenance is None
                else [list(pair) for pair in self.capture_provenance],
        }


@dataclass
class ConversionReport:
    strategy: str
    metric: str
    group_size: int
    plans: list[LayerGroupingPlan]
    attn_params_before: int
    attn_params_after: int
    oracle_calls: int

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "metric": self.metric,
            "group_size": self.group_size,
            "plans": [p.to_dict() for p in self.plans],
            "attn_params_before": self.attn_params_before,
            "attn_params_after": self.attn_params_after,
            "oracle_calls": self.oracle_calls,
        }


def attention_param_entries(ckpt: Checkpoint) -> int:
    """Float entries actually stored across all attention projections."""
    return sum(lw.attn.w_q.size + lw.attn.w_k.size + lw.attn.w_v.size + lw.attn.w_o.size
               for lw in ckpt.layers)


def _effective_kv(ckpt: Checkpoint, layer_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-head key/value tensors with any existing grouping expanded."""
    kmap, vmap = ckpt.layer_maps(layer_index)
    lw = ckpt.layers[layer_index].attn
    return lw.w_k[kmap], lw.w_v[vmap]


def merge_heads(attn: "AttentionLayerWeights", plan: LayerGroupingPlan) -> "AttentionLayerWeights":
    """Mean-merge one attention layer's per-head key/value projections.

    Expects per-head tensors (one key and one value projection per
    head); returns a layer storing one shared tensor per group, in the
    plan's group order. Queries and the output projection pass through.
    """
    h = attn.w_q.shape[0]
    if attn.w_k.shape[0] != h or attn.w_v.shape[0] != h:
        raise GroupingError(
            "merge_heads needs per-head key/value tensors; expand an "
            "already-grouped layer before re-merging")
    for g in (plan.key_grouping, plan.value_grouping):
        if g.n_heads != h:
            raise GroupingError(f"grouping covers {g.n_heads} heads, layer has {h}")
        g.validate()
    new_k = np.stack([attn.w_k[list(g)].mean(axis=0)
                      for g in plan.key_grouping.groups])
    new_v = np.stack([attn.w_v[list(g)].mean(axis=0)
                      for g in plan.value_grouping.groups])
    return AttentionLayerWeights(w_q=attn.w_q, w_k=new_k, w_v=new_v, w_o=attn.w_o)


def merge_layer_heads(ckpt: Checkpoint, layer_index: int,
                      key_grouping: HeadGrouping,
                      value_grouping: HeadGrouping) -> Checkpoint:
    """New checkpoint with one layer's key/value heads mean-merged.

    Group means are taken over the effective per-head tensors, so
    re-merging with the same grouping is a no-op on the weights.
    """
    h = ckpt.config.n_heads
    if not (0 <= layer_index < ckpt.config.n_layers):
        raise PlanError(f"layer_index {layer_index} out of range")
    plan = LayerGroupingPlan(layer_index, key_grouping, value_grouping)
    k_eff, v_eff = _effective_kv(ckpt, layer_index)
    old = ckpt.layers[layer_index].attn
    expanded = AttentionLayerWeights(w_q=old.w_q, w_k=k_eff, w_v=v_eff, w_o=old.w_o)
    merged = merge_heads(expanded, plan)

    out = copy_checkpoint(ckpt)
    out.layers[layer_index].attn = AttentionLayerWeights(
        w_q=out.layers[layer_index].attn.w_q,
        w_k=merged.w_k, w_v=merged.w_v,
        w_o=out.layers[layer_index].attn.w_o)
    if out.kv_grouping is None:
        sing = HeadGrouping.singletons(h)
        out.kv_grouping = [(sing, sing) for _ in range(ckpt.config.n_layers)]
    out.kv_grouping[layer_index] = (key_grouping, value_grouping)
    return out


PROJECTIONS = ("key", "value")


def layer_projection_oracle(ckpt: Checkpoint, layer_index: int, projection: str,
                            evaluate: Evaluator) -> Callable[[HeadGrouping], float]:
    """Score candidate groupings for one layer and projection.

    The closure merges the candidate into a scratch copy (the other
    projection left per-head, later layers untouched) and evaluates the
    resulting model; the input checkpoint is never mutated.
    """
    if projection not in PROJECTIONS:
        raise ConfigError(f"unknown projection {projection!r}; expected one of {PROJECTIONS}")
    if not (0 <= layer_index < ckpt.config.n_layers):
        raise PlanError(f"layer_index {layer_index} out of range")
    sing = HeadGrouping.singletons(ckpt.config.n_heads)

    def oracle(grouping: HeadGrouping) -> float:
        if projection == "key":
            cand = merge_layer_heads(ckpt, layer_index, grouping, sing)
        else:
            cand = merge_layer_heads(ckpt, layer_index, sing, grouping)
        return evaluate(cand)

    return oracle


def convert_model(ckpt: Checkpoint, plans: list[LayerGroupingPlan]) -> Checkpoint:
    """Apply per-layer grouping plans in layer order."""
    seen = set()
    for plan in plans:
        if plan.layer_index in seen:
            raise PlanError(f"duplicate plan for layer {plan.layer_index}")
        seen.add(plan.layer_index)
    out = ckpt
    for plan in sorted(plans, key=lambda p: p.layer_index):
        out = merge_layer_heads(out, plan.layer_index,
                                plan.key_grouping, plan.value_grouping)
    return out


def _is_unconverted(ckpt: Checkpoint) -> bool:
    if ckpt.kv_grouping is None:
        return True
    h = ckpt.config.n_heads
    return all(kg.n_groups == h and vg.n_groups == h for kg, vg in ckpt.kv_grouping)


def _grouping_state(ckpt: Checkpoint, layer_index: int) -> tuple[tuple[int, int], ...]:
    h = ckpt.config.n_heads
    if ckpt.kv_grouping is None:
        return tuple((h, h) for _ in range(layer_index))
    return tuple((kg.n_groups, vg.n_groups)
                 for kg, vg in ckpt.kv_grouping[:layer_index])


def _layer_similarity(ckpt: Checkpoint, layer_index: int, metric: str,
                      calibration_batch):
    """Similarity matrices for one layer's keys and values, plus the
    provenance of the capture (earlier layers' group counts)."""
    if metric == "activation":
        cap = capture_activations(ckpt, calibration_batch, layer_index)
        return (similarity_matrix(cap.k_act, "activation"),
                similarity_matrix(cap.v_act, "activation"),
                cap.provenance)
    k_eff, v_eff = _effective_kv(ckpt, layer_index)
    return (similarity_matrix([k_eff[i] for i in range(len(k_eff))], "weight"),
            similarity_matrix([v_eff[i] for i in range(len(v_eff))], "weight"),
            _grouping_state(ckpt, layer_index))


def group_and_convert(ckpt: Checkpoint, group_size: int, strategy: str, *,
                      calibration_batch=None,
                      evaluate: Optional[Evaluator] = None,
                      metric: str = "activation",
                      search_cfg: Optional[SearchConfig] = None,
                      ) -> tuple[Checkpoint, ConversionReport]:
    """Choose groupings for every layer and merge them in.

    neighbour: contiguous head blocks, no oracle.
    symmetric / asymmetric: per-layer stochastic search over equal-size
        groupings, guided by the requested similarity metric, scored by
        `evaluate` on candidate merges of the current working model.
    brute: exhaustive over equal-size groupings, scored the same way.
    """
    cfg = ckpt.config
    h = cfg.n_heads
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    if group_size < 1 or h % group_size != 0:
        raise GroupingError(
            f"group size {group_size} must divide head count {h}")
    if not _is_unconverted(ckpt):
        raise PlanError("checkpoint already carries merged key/value groups")

    needs_oracle = strategy in ("symmetric", "asymmetric", "brute")
    if needs_oracle and evaluate is None:
        raise ConfigError(f"strategy {strategy!r} requires an evaluation function")
    if strategy in ("symmetric", "asymmetric"):
        if search_cfg is None:
            search_cfg = SearchConfig(group_size=group_size)
        if search_cfg.group_size != group_size:
            raise ConfigError("search_cfg.group_size disagrees with group_size")
        if metric == "activation" and calibration_batch is None:
            raise ConfigError("activation metric requires a calibration batch")

    working = ckpt
    plans: list[LayerGroupingPlan] = []
    oracle_calls = 0

    for li in range(cfg.n_layers):
        if strategy == "neighbour":
            g = neighbour_grouping(h, group_size)
            plans.append(LayerGroupingPlan(li, g, g))
            working = merge_layer_heads(working, li, g, g)
            continue

        key_oracle = layer_projection_oracle(working, li, "key", evaluate)
        value_oracle = layer_projection_oracle(working, li, "value", evaluate)
        provenance = _grouping_state(working, li)

        if strategy == "brute":
            kr = brute_force_search(key_oracle, h, group_size)
            vr = brute_force_search(value_oracle, h, group_size)
        else:
            sim_k, sim_v, provenance = _layer_similarity(
                working, li, metric, calibration_batch)
            search = symmetric_search if strategy == "symmetric" else asymmetric_search
            cfg_k = dataclasses.replace(
                search_cfg, seed=derive_seed(search_cfg.seed, f"layer{li}", "key"))
            cfg_v = dataclasses.replace(
                search_cfg, seed=derive_seed(search_cfg.seed, f"layer{li}", "value"))
            kr = search(sim_k, key_oracle, cfg_k)
            vr = search(sim_v, value_oracle, cfg_v)

        oracle_calls += kr.oracle_calls + vr.oracle_calls
        plans.append(LayerGroupingPlan(li, kr.best_grouping, vr.best_grouping,
                                       key_search=kr, value_search=vr,
                                       capture_provenance=provenance))
        working = merge_layer_heads(working, li, kr.best_grouping, vr.best_grouping)

    report = ConversionReport(
        strategy=strategy, metric=metric, group_size=group_size, plans=plans,
        attn_params_before=attention_param_entries(ckpt),
        attn_params_after=attention_param_entries(working),
        oracle_calls=oracle_calls)
    return working, report
