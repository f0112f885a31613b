"""Analytic parameter and FLOP counts for grouped attention.

Counts cover the attention projections and the two score/value matmuls
only; layer norms and the softmax itself are excluded. One
multiply-accumulate is two FLOPs. These formulas are what the
instrumented forward pass is checked against.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from gqakit.errors import ConfigError


def _check(d_model: int, n_heads: int, head_dim: int, group_size: int) -> int:
    if d_model < 1 or n_heads < 1 or head_dim < 1:
        raise ConfigError("dimensions must be >= 1")
    if group_size < 1 or n_heads % group_size != 0:
        raise ConfigError(
            f"group size {group_size} must divide head count {n_heads}")
    return n_heads // group_size


def attention_params(d_model: int, n_heads: int, head_dim: int,
                     group_size: int, n_layers: int = 1) -> int:
    """Stored float count of Q/K/V/O projections across n_layers."""
    n_kv = _check(d_model, n_heads, head_dim, group_size)
    per_layer = (n_heads * d_model * head_dim          # Q
                 + 2 * n_kv * d_model * head_dim       # K and V
                 + d_model * d_model)                  # O
    return n_layers * per_layer


def attention_flops_per_token(d_model: int, n_heads: int, head_dim: int,
                              group_size: int, seq_len: int) -> int:
    """FLOPs per token for one layer's attention at a given context length."""
    n_kv = _check(d_model, n_heads, head_dim, group_size)
    if seq_len < 1:
        raise ConfigError("seq_len must be >= 1")
    return (2 * n_heads * d_model * head_dim           # Q projection
            + 4 * n_kv * d_model * head_dim            # K and V projections
            + 2 * d_model * d_model                    # output projection
            + 4 * n_heads * head_dim * seq_len)        # scores + weighted sum


@dataclass
class CostRow:
    group_size: int
    n_kv_groups: int
    attn_params: int
    attn_flops_per_token: int
    relative_params: float
    relative_flops: float


@dataclass
class CostReport:
    d_model: int
    n_heads: int
    head_dim: int
    seq_len: int
    n_layers: int
    rows: list[CostRow]


def cost_curve(d_model: int, n_heads: int, head_dim: int, seq_len: int,
               n_layers: int = 1,
               group_sizes: list[int] | None = None) -> CostReport:
    """Params and FLOPs across group sizes, relative to the ungrouped model.

    Defaults to every divisor of the head count, ascending.
    """
    if group_sizes is None:
        group_sizes = [g for g in range(1, n_heads + 1) if n_heads % g == 0]
    base_params = attention_params(d_model, n_heads, head_dim, 1, n_layers)
    base_flops = attention_flops_per_token(d_model, n_heads, head_dim, 1, seq_len)
    rows = []
    for g in group_sizes:
        p = attention_params(d_model, n_heads, head_dim, g, n_layers)
        f = attention_flops_per_token(d_model, n_heads, head_dim, g, seq_len)
        rows.append(CostRow(
            group_size=g, n_kv_groups=n_heads // g, attn_params=p,
            attn_flops_per_token=f,
            relative_params=p / base_params, relative_flops=f / base_flops))
    return CostReport(d_model=d_model, n_heads=n_heads, head_dim=head_dim,
                      seq_len=seq_len, n_layers=n_layers, rows=rows)


def save_cost_csv(report: CostReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group_size", "n_kv_groups", "attn_params",
                    "attn_flops_per_token", "relative_params", "relative_flops"])
        for r in report.rows:
            w.writerow([r.group_size, r.n_kv_groups, r.attn_params,
                        r.attn_flops_per_token,
                        repr(r.relative_params), repr(r.relative_flops)])
