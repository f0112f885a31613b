"""Head-grouping strategies: neighbour baseline, similarity-guided
symmetric and asymmetric search, and exhaustive enumeration.

A grouping is a partition of the head indices {0..H-1} into non-empty
groups. The two stochastic searches walk the partition space guided by a
pairwise head-similarity matrix and an accuracy oracle; the asymmetric
variant may let group sizes diverge while keeping the number of groups
(and hence the KV budget) fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from gqakit.errors import BudgetError, ConfigError, GroupingError, OracleError
from gqakit.numerics import Rng, topk_excluding

# An accuracy oracle maps a candidate grouping to a deterministic,
# effect-free accuracy in [0, 1].
AccuracyOracle = Callable[["HeadGrouping"], float]

BRUTE_FORCE_CAP = 10**6


# ---------------------------------------------------------------------------
# HeadGrouping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadGrouping:
    """Canonical partition of head indices into non-empty groups.

    Each group is sorted ascending and groups are ordered by smallest
    member, so equal partitions compare (and hash) equal.
    """

    groups: tuple[tuple[int, ...], ...]
    n_heads: int

    @staticmethod
    def from_groups(groups: Sequence[Sequence[int]], n_heads: int) -> "HeadGrouping":
        canon = tuple(sorted((tuple(sorted(int(h) for h in g)) for g in groups),
                             key=lambda g: g[0] if g else -1))
        hg = HeadGrouping(groups=canon, n_heads=int(n_heads))
        hg.validate()
        return hg

    @staticmethod
    def singletons(n_heads: int) -> "HeadGrouping":
        return HeadGrouping.from_groups([[h] for h in range(n_heads)], n_heads)

    def validate(self) -> None:
        seen: set[int] = set()
        for g in self.groups:
            if len(g) == 0:
                raise GroupingError("empty group")
            if list(g) != sorted(g):
                raise GroupingError(f"group not sorted: {g}")
            seen.update(g)
        if len(seen) != sum(len(g) for g in self.groups):
            raise GroupingError("groups are not pairwise disjoint")
        if seen != set(range(self.n_heads)):
            raise GroupingError(
                f"groups must cover exactly 0..{self.n_heads - 1}, got {sorted(seen)}")
        starts = [g[0] for g in self.groups]
        if starts != sorted(starts):
            raise GroupingError("groups not ordered by smallest member")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_of(self, head: int) -> tuple[int, ...]:
        for g in self.groups:
            if head in g:
                return g
        raise GroupingError(f"head {head} not in any group")

    def head_to_group(self) -> np.ndarray:
        """Map head index -> group index, as an int array of length n_heads."""
        out = np.empty(self.n_heads, dtype=np.int64)
        for gi, g in enumerate(self.groups):
            for h in g:
                out[h] = gi
        return out

    def is_uniform(self, m: int) -> bool:
        return all(len(g) == m for g in self.groups)

    def to_lists(self) -> list[list[int]]:
        return [list(g) for g in self.groups]


# ---------------------------------------------------------------------------
# Search configuration and result
# ---------------------------------------------------------------------------


@dataclass
class SearchConfig:
    """Hyperparameters of the grouping search.

    Defaults mirror the search budget used throughout the experiments:
    10 iterations, top-3 candidates, acceptance/reset probability 0.1,
    preservation probability 0.2 (asymmetric only).
    """

    group_size: int
    n_iters: int = 10
    top_k: int = 3
    p_acc: float = 0.1
    p_reset: float = 0.1
    p_preserve: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_iters < 1:
            raise ConfigError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        for name in ("p_acc", "p_reset", "p_preserve"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")


@dataclass
class TraceEntry:
    iteration: int
    grouping: HeadGrouping
    accuracy: float
    accepted: bool
    reset: bool

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "grouping": self.grouping.to_lists(),
            "accuracy": self.accuracy,
            "accepted": self.accepted,
            "reset": self.reset,
        }


@dataclass
class SearchResult:
    best_acc: float
    best_grouping: HeadGrouping
    trace: list[TraceEntry] = field(default_factory=list)
    oracle_calls: int = 0

    def to_dict(self) -> dict:
        return {
            "best_acc": self.best_acc,
            "best_grouping": self.best_grouping.to_lists(),
            "oracle_calls": self.oracle_calls,
            "trace": [t.to_dict() for t in self.trace],
        }


# ---------------------------------------------------------------------------
# Deterministic grouping constructors
# ---------------------------------------------------------------------------


def neighbour_grouping(n_heads: int, m: int) -> HeadGrouping:
    """Adjacent heads in equal-size blocks: {0..m-1}, {m..2m-1}, ..."""
    _check_divides(n_heads, m)
    groups = [list(range(i, i + m)) for i in range(0, n_heads, m)]
    return HeadGrouping.from_groups(groups, n_heads)


def random_grouping(n_heads: int, m: int, rng: Rng) -> HeadGrouping:
    """Uniformly permute heads, then chunk into consecutive blocks of m."""
    _check_divides(n_heads, m)
    perm = rng.permutation(n_heads)
    groups = [perm[i:i + m].tolist() for i in range(0, n_heads, m)]
    return HeadGrouping.from_groups(groups, n_heads)


def _check_divides(n_heads: int, m: int) -> None:
    if m < 1 or n_heads < 1:
        raise ConfigError(f"need n_heads >= 1 and m >= 1, got {n_heads}, {m}")
    if n_heads % m != 0:
        raise ConfigError(f"group size {m} does not divide {n_heads} heads")


# ---------------------------------------------------------------------------
# Stochastic searches
# ---------------------------------------------------------------------------


def _sim_values(sim) -> np.ndarray:
    values = getattr(sim, "values", sim)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ConfigError(f"similarity matrix must be square, got {values.shape}")
    return values


def _call_oracle(oracle: AccuracyOracle, grouping: HeadGrouping) -> float:
    acc = float(oracle(grouping))
    if not math.isfinite(acc):
        raise OracleError(f"oracle returned non-finite accuracy {acc!r}")
    return acc


def _initial_result(grouping: HeadGrouping, oracle: AccuracyOracle) -> SearchResult:
    acc = _call_oracle(oracle, grouping)
    entry = TraceEntry(iteration=0, grouping=grouping, accuracy=acc,
                       accepted=True, reset=False)
    return SearchResult(best_acc=acc, best_grouping=grouping,
                        trace=[entry], oracle_calls=1)


def symmetric_search(sim, oracle: AccuracyOracle, cfg: SearchConfig,
                     sim_refresh: Optional[Callable[[], object]] = None) -> SearchResult:
    """Similarity-guided search over equal-size groupings.

    Per iteration: maybe reset to a fresh random grouping, pick a random
    head `a`, pick `b` among the top-k heads most similar to `a` outside
    `a`'s group, and swap `a` with a random member of `b`'s group so all
    groups keep size m. The candidate is adopted when it beats the best
    accuracy seen so far or when the acceptance coin fires; the best
    grouping is tracked separately. Random draws occur in a fixed order
    (reset coin, head a, head b, swap partner, acceptance coin) so traces
    are reproducible from the seed.

    `sim_refresh`, when given, is called at the start of every iteration
    and its return value replaces the similarity matrix; the default
    computes similarities once per layer, which is equivalent because
    within-layer swaps never change the per-head projections being
    compared.
    """
    return _run_search(sim, oracle, cfg, asymmetric=False, sim_refresh=sim_refresh)


def asymmetric_search(sim, oracle: AccuracyOracle, cfg: SearchConfig,
                      sim_refresh: Optional[Callable[[], object]] = None) -> SearchResult:
    """Similarity-guided search allowing uneven group sizes.

    Moves transfer head `a` into `b`'s group; with probability p_preserve
    a member of `b`'s group moves back to `a`'s former group, keeping all
    sizes intact, otherwise the sizes diverge. Moves that would empty
    `a`'s former group are rejected and redrawn so the number of groups
    (the KV budget) never changes.
    """
    return _run_search(sim, oracle, cfg, asymmetric=True, sim_refresh=sim_refresh)


def _run_search(sim, oracle: AccuracyOracle, cfg: SearchConfig,
                asymmetric: bool, sim_refresh) -> SearchResult:
    cfg.validate()
    values = _sim_values(sim)
    n_heads = values.shape[0]
    m = cfg.group_size
    _check_divides(n_heads, m)

    rng = Rng(cfg.seed)
    current = random_grouping(n_heads, m, rng)
    result = _initial_result(current, oracle)

    # With m == 1 or m == H the reachable partition space is a single
    # grouping; no move can change it, so the initial evaluation is final.
    if m == 1 or m == n_heads:
        return result

    for it in range(1, cfg.n_iters + 1):
        if sim_refresh is not None:
            values = _sim_values(sim_refresh())

        did_reset = rng.uniform() < cfg.p_reset
        if did_reset:
            current = random_grouping(n_heads, m, rng)

        if asymmetric:
            candidate = _asymmetric_move(current, values, cfg, rng)
        else:
            candidate = _symmetric_move(current, values, cfg, rng)

        coin = rng.uniform()
        acc = _call_oracle(oracle, candidate)
        result.oracle_calls += 1

        accepted = acc > result.best_acc or coin < cfg.p_acc
        if accepted:
            current = candidate
        if acc > result.best_acc:
            result.best_acc = acc
            result.best_grouping = candidate
        result.trace.append(TraceEntry(iteration=it, grouping=candidate,
                                       accuracy=acc, accepted=accepted,
                                       reset=did_reset))
    return result


def _pick_pair(g: HeadGrouping, values: np.ndarray, cfg: SearchConfig,
               rng: Rng) -> tuple[int, tuple[int, ...], int, tuple[int, ...], int]:
    """Draw head a, similar head b from another group, and a swap partner."""
    a = rng.randint(g.n_heads)
    group_a = g.group_of(a)
    top = topk_excluding(values[a], cfg.top_k, excluded=group_a)
    b = rng.choice(top)
    group_b = g.group_of(b)
    partner = rng.choice(group_b)
    return a, group_a, b, group_b, partner


def _symmetric_move(g: HeadGrouping, values: np.ndarray, cfg: SearchConfig,
                    rng: Rng) -> HeadGrouping:
    """Swap a with a member of b's group; all group sizes are preserved."""
    a, group_a, _, group_b, partner = _pick_pair(g, values, cfg, rng)
    new_a = [h for h in group_a if h != a] + [partner]
    new_b = [h for h in group_b if h != partner] + [a]
    rest = [list(grp) for grp in g.groups if grp not in (group_a, group_b)]
    return HeadGrouping.from_groups(rest + [new_a, new_b], g.n_heads)


def _asymmetric_move(g: HeadGrouping, values: np.ndarray, cfg: SearchConfig,
                     rng: Rng) -> HeadGrouping:
    """Move a into b's group, optionally swapping a partner back.

    Redraws the whole move whenever it would empty a's former group, so
    the group count is invariant. Draw order per attempt: head a, head b,
    swap partner, preserve coin.
    """
    while True:
        a, group_a, _, group_b, partner = _pick_pair(g, values, cfg, rng)
        preserve = rng.uniform() < cfg.p_preserve
        if preserve:
            new_a = [h for h in group_a if h != a] + [partner]
            new_b = [h for h in group_b if h != partner] + [a]
        else:
            if len(group_a) == 1:
                continue  # would empty a's former group; redraw
            new_a = [h for h in group_a if h != a]
            new_b = list(group_b) + [a]
        rest = [list(grp) for grp in g.groups if grp not in (group_a, group_b)]
        return HeadGrouping.from_groups(rest + [new_a, new_b], g.n_heads)


# ---------------------------------------------------------------------------
# Exhaustive baseline
# ---------------------------------------------------------------------------


def count_equal_partitions(n_heads: int, m: int) -> int:
    """Number of partitions of n_heads labelled heads into groups of m:
    n! / ((m!)^(n/m) * (n/m)!)."""
    _check_divides(n_heads, m)
    k = n_heads // m
    return math.factorial(n_heads) // (math.factorial(m) ** k * math.factorial(k))


def enumerate_equal_partitions(n_heads: int, m: int) -> Iterator[HeadGrouping]:
    """All partitions into groups of exactly m, in deterministic order.

    The smallest unplaced head anchors each new group, so every emitted
    grouping is already canonical.
    """
    _check_divides(n_heads, m)

    def rec(remaining: list[int], acc: list[tuple[int, ...]]):
        if not remaining:
            yield HeadGrouping(groups=tuple(acc), n_heads=n_heads)
            return
        anchor, rest = remaining[0], remaining[1:]
        for others in combinations(rest, m - 1):
            group = (anchor,) + others
            left = [h for h in rest if h not in others]
            acc.append(group)
            yield from rec(left, acc)
            acc.pop()

    yield from rec(list(range(n_heads)), [])


def brute_force_search(oracle: AccuracyOracle, n_heads: int, m: int) -> SearchResult:
    """Evaluate every equal-size partition and return the oracle-best one.

    Ties keep the earliest partition in enumeration order. Refuses to
    enumerate more than BRUTE_FORCE_CAP partitions.
    """
    total = count_equal_partitions(n_heads, m)
    if total > BRUTE_FORCE_CAP:
        raise BudgetError(
            f"{total} partitions of {n_heads} heads into groups of {m} "
            f"exceed the enumeration cap {BRUTE_FORCE_CAP}")

    result: Optional[SearchResult] = None
    for i, grouping in enumerate(enumerate_equal_partitions(n_heads, m)):
        acc = _call_oracle(oracle, grouping)
        if result is None:
            result = SearchResult(best_acc=acc, best_grouping=grouping)
            improved = True
        else:
            improved = acc > result.best_acc
            if improved:
                result.best_acc = acc
                result.best_grouping = grouping
        result.oracle_calls += 1
        result.trace.append(TraceEntry(iteration=i, grouping=grouping,
                                       accuracy=acc, accepted=improved,
                                       reset=False))
    assert result is not None
    return result
