"""Similarity scores against a scalar-loop oracle, plus matrix and CSV
plumbing."""

import csv
import math

import numpy as np
import pytest

from gqakit.errors import InputError, ShapeError
from gqakit.similarity import (SimilarityMatrix, activation_similarity,
                               save_similarity_csv, similarity_matrix,
                               weight_similarity)


def activation_similarity_oracle(a, b):
    """Double-loop reference: per-row best cosine match, both directions,
    averaged. Written with scalar math only."""
    def cos(u, v):
        nu = math.sqrt(sum(x * x for x in u))
        nv = math.sqrt(sum(x * x for x in v))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        c = sum(x * y for x, y in zip(u, v)) / (nu * nv)
        return max(-1.0, min(1.0, c))

    fwd = sum(max(cos(ra, rb) for rb in b) for ra in a)
    bwd = sum(max(cos(ra, rb) for ra in a) for rb in b)
    return 0.5 * (fwd + bwd)


class TestActivationSimilarity:
    def test_hand_example(self):
        a = [[1.0, 0.0], [0.0, 1.0]]
        b = [[1.0, 0.0], [1.0, 0.0]]
        # forward: row (1,0) matches 1, row (0,1) matches 0 -> 1
        # backward: both rows of b match (1,0) exactly -> 2
        assert activation_similarity(a, b) == pytest.approx(1.5)

    def test_self_similarity_equals_row_count(self):
        rng = np.random.default_rng(3)
        for n in (1, 4, 9):
            a = rng.normal(size=(n, 5))
            assert activation_similarity(a, a) == pytest.approx(n, abs=1e-9)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            a = rng.normal(size=(rng.integers(1, 9), 4))
            b = rng.normal(size=(rng.integers(1, 9), 4))
            got = activation_similarity(a, b)
            want = activation_similarity_oracle(a.tolist(), b.tolist())
            assert got == pytest.approx(want, abs=1e-9)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
        assert activation_similarity(a, b) == pytest.approx(
            activation_similarity(b, a), abs=1e-12)

    def test_zero_rows_contribute_zero(self):
        a = [[0.0, 0.0], [1.0, 0.0]]
        b = [[1.0, 0.0]]
        # zero row scores 0, the other row scores 1; backward max is 1.
        assert activation_similarity(a, b) == pytest.approx(1.0)

    def test_bounded_by_row_counts(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            a = rng.normal(size=(rng.integers(1, 7), 3))
            b = rng.normal(size=(rng.integers(1, 7), 3))
            s = activation_similarity(a, b)
            assert -0.5 * (len(a) + len(b)) <= s <= 0.5 * (len(a) + len(b))

    def test_rejects_bad_shapes(self):
        with pytest.raises(ShapeError):
            activation_similarity(np.ones(3), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            activation_similarity(np.ones((2, 3)), np.ones((2, 4)))
        with pytest.raises(InputError):
            activation_similarity(np.ones((0, 3)), np.ones((2, 3)))


class TestWeightSimilarity:
    def test_is_flattened_cosine(self):
        w_a = np.array([[1.0, 0.0], [0.0, 0.0]])
        w_b = np.array([[0.0, 0.0], [0.0, 2.0]])
        assert weight_similarity(w_a, w_a) == pytest.approx(1.0)
        assert weight_similarity(w_a, w_b) == pytest.approx(0.0)
        assert weight_similarity(w_a, -w_a) == pytest.approx(-1.0)

    def test_scale_invariant(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(3, 4, 2))
        assert weight_similarity(w, 7.5 * w) == pytest.approx(1.0)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            weight_similarity(np.ones((2, 2)), np.ones((2, 3)))


class TestSimilarityMatrix:
    def test_activation_matrix_entries_match_pairwise_calls(self):
        rng = np.random.default_rng(23)
        heads = [rng.normal(size=(6, 4)) for _ in range(4)]
        sim = similarity_matrix(heads, "activation")
        assert sim.metric == "activation"
        assert sim.n_heads == 4
        assert sim.n_rows == 6
        for i in range(4):
            for j in range(4):
                want = activation_similarity(heads[i], heads[j])
                assert sim.values[i, j] == pytest.approx(want, abs=1e-12)

    def test_diagonal_equals_row_count(self):
        rng = np.random.default_rng(29)
        heads = [rng.normal(size=(5, 3)) for _ in range(3)]
        sim = similarity_matrix(heads, "activation")
        assert np.allclose(np.diag(sim.values), 5.0, atol=1e-9)

    def test_weight_matrix_entries(self):
        rng = np.random.default_rng(31)
        heads = [rng.normal(size=(4, 2)) for _ in range(3)]
        sim = similarity_matrix(heads, "weight")
        assert sim.n_rows == 0
        for i in range(3):
            for j in range(3):
                want = weight_similarity(heads[i], heads[j])
                assert sim.values[i, j] == pytest.approx(want, abs=1e-12)

    def test_matrix_is_symmetric(self):
        rng = np.random.default_rng(37)
        heads = [rng.normal(size=(7, 4)) for _ in range(5)]
        for metric in ("activation", "weight"):
            sim = similarity_matrix(heads, metric)
            assert np.array_equal(sim.values, sim.values.T)

    def test_rejects_unknown_metric_and_empty_input(self):
        with pytest.raises(InputError):
            similarity_matrix([np.ones((2, 2))], "euclidean")
        with pytest.raises(InputError):
            similarity_matrix([], "activation")

    def test_rejects_non_square_values(self):
        with pytest.raises(ShapeError):
            SimilarityMatrix(values=np.ones((2, 3)), metric="weight", n_rows=0)


class TestCsv:
    def test_round_trips_exact_floats(self, tmp_path):
        rng = np.random.default_rng(41)
        heads = [rng.normal(size=(3, 2)) for _ in range(3)]
        sim = similarity_matrix(heads, "activation")
        path = tmp_path / "sim.csv"
        save_similarity_csv(sim, path)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 9
        for row in rows:
            i, j = int(row["head_i"]), int(row["head_j"])
            assert float(row["score"]) == sim.values[i, j]
