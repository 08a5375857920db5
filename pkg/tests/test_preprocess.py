import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cellgraph.errors import ConfigError, InputError
from cellgraph.preprocess import (
    PreprocessConfig,
    build_metacells,
    knn_graph,
    normalize,
    pca,
    select_hvg,
    vote_attributes,
)
from conftest import make_record


class TestNormalize:
    def test_rows_sum_to_target_pre_log(self):
        rng = np.random.default_rng(0)
        counts = rng.integers(0, 50, size=(30, 12)).astype(float) + 0.5
        out = normalize(counts, 10_000.0)
        np.testing.assert_allclose(np.expm1(out).sum(axis=1), 10_000.0, atol=1e-3)

    def test_known_values(self):
        out = normalize(np.array([[1.0, 3.0]]), 4.0)
        np.testing.assert_allclose(out, np.log1p([[1.0, 3.0]]))

    def test_zero_row_rejected(self):
        with pytest.raises(InputError, match="all-zero"):
            normalize(np.array([[1.0, 1.0], [0.0, 0.0]]))

    def test_negative_rejected(self):
        with pytest.raises(InputError, match="negative"):
            normalize(np.array([[1.0, -1.0]]))

    @settings(max_examples=50)
    @given(
        arrays(
            np.float64,
            st.tuples(st.integers(1, 8), st.integers(1, 6)),
            elements=st.floats(0.01, 100.0),
        )
    )
    def test_property_row_sums(self, counts):
        out = normalize(counts, 10_000.0)
        np.testing.assert_allclose(np.expm1(out).sum(axis=1), 10_000.0, rtol=1e-9)


class TestSelectHvg:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = rng.normal(scale=rng.random(10) * 3, size=(15, 10))
            n = int(rng.integers(1, 10))
            var = m.var(axis=0)
            oracle = sorted(sorted(range(10), key=lambda j: (-var[j], j))[:n])
            assert select_hvg(m, n) == oracle

    def test_ties_prefer_lower_index(self):
        col = np.array([0.0, 1.0, 0.0, 1.0])
        m = np.stack([col, col, col], axis=1)  # identical variances
        assert select_hvg(m, 2) == [0, 1]

    def test_output_sorted(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=(20, 9))
        out = select_hvg(m, 5)
        assert out == sorted(out)

    def test_too_many_requested(self):
        with pytest.raises(InputError):
            select_hvg(np.zeros((3, 2)), 3)


def subspace_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Projector distance between two row-spaces."""
    pa = a.T @ a
    pb = b.T @ b
    return float(np.abs(pa - pb).max())


class TestPca:
    def test_matches_dense_eig_small(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            rows = int(rng.integers(4, 11))
            cols = int(rng.integers(2, 11))
            m = rng.normal(size=(rows, cols))
            k = int(rng.integers(1, min(rows, cols) + 1))
            res = pca(m, k)
            centered = m - m.mean(axis=0)
            cov = centered.T @ centered / (rows - 1)
            evals, evecs = np.linalg.eigh(cov)
            order = np.argsort(evals)[::-1][:k]
            # compare only the well-determined (non-degenerate) leading block
            lead = [i for i, e in enumerate(evals[order]) if e > 1e-8]
            if lead and not res.rank_deficient:
                ref = evecs[:, order].T[lead]
                got = res.components[lead]
                assert subspace_distance(got, ref) < 1e-6
            np.testing.assert_allclose(
                res.explained_variance, np.maximum(evals[order], 0.0), atol=1e-9
            )

    def test_scores_are_projections(self):
        rng = np.random.default_rng(4)
        m = rng.normal(size=(12, 7))
        res = pca(m, 4)
        centered = m - res.mean
        np.testing.assert_allclose(res.scores, centered @ res.components.T, atol=1e-12)

    def test_components_orthonormal(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(10, 6))
        res = pca(m, 5)
        np.testing.assert_allclose(
            res.components @ res.components.T, np.eye(5), atol=1e-10
        )

    def test_rank_deficiency_flagged(self):
        rng = np.random.default_rng(6)
        base = rng.normal(size=(8, 2))
        m = base @ rng.normal(size=(2, 6))  # rank 2
        res = pca(m, 4)
        assert res.rank_deficient

    def test_k_too_large(self):
        with pytest.raises(InputError):
            pca(np.zeros((3, 5)), 4)

    def test_power_iteration_path_matches_eig(self):
        # above the column cutoff PCA switches to implicit power iteration
        rng = np.random.default_rng(7)
        m = rng.normal(size=(6, 2050))
        res = pca(m, 3)
        centered = m - m.mean(axis=0)
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        ref_ev = s**2 / (m.shape[0] - 1)
        np.testing.assert_allclose(res.explained_variance, ref_ev[:3], rtol=1e-6)
        assert subspace_distance(res.components, vt[:3]) < 1e-6

    def test_variance_non_increasing(self):
        rng = np.random.default_rng(8)
        m = rng.normal(size=(20, 10))
        ev = pca(m, 8).explained_variance
        assert all(ev[i] >= ev[i + 1] - 1e-12 for i in range(len(ev) - 1))


class TestKnnGraph:
    def oracle(self, points, k):
        n = len(points)
        out = []
        for i in range(n):
            d = [
                (float(np.sum((points[i] - points[j]) ** 2)), j)
                for j in range(n)
                if j != i
            ]
            d.sort()
            out.append([j for _, j in d[:k]])
        return out

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(15):
            n = int(rng.integers(5, 25))
            pts = rng.normal(size=(n, 3))
            k = int(rng.integers(1, n))
            assert knn_graph(pts, k) == self.oracle(pts, k)

    def test_ties_prefer_lower_index(self):
        pts = np.array([[0.0], [1.0], [-1.0]])  # 1 and 2 equidistant from 0
        assert knn_graph(pts, 1)[0] == [1]

    def test_self_excluded(self):
        pts = np.random.default_rng(10).normal(size=(6, 2))
        for i, nbrs in enumerate(knn_graph(pts, 5)):
            assert i not in nbrs

    def test_k_too_large(self):
        with pytest.raises(InputError):
            knn_graph(np.zeros((3, 2)), 3)


class TestVoteAttributes:
    def test_majority_wins(self):
        recs = [
            make_record(tissue_general="blood"),
            make_record(tissue_general="blood"),
            make_record(tissue_general="lung"),
        ]
        assert vote_attributes(recs).tissue_general == "blood"

    def test_tie_breaks_lexicographically(self):
        recs = [make_record(tissue_general="lung"), make_record(tissue_general="blood")]
        assert vote_attributes(recs).tissue_general == "blood"

    def test_missing_values_ignored(self):
        recs = [
            make_record(tissue=None),
            make_record(tissue="cortex"),
            make_record(tissue=None),
        ]
        assert vote_attributes(recs).tissue == "cortex"

    def test_all_missing_stays_missing(self):
        recs = [make_record(tissue=None), make_record(tissue=None)]
        assert vote_attributes(recs).tissue is None

    def test_row_pointer_follows_voted_path(self):
        recs = [
            make_record(matrix_file_path="a.npy", matrix_row_idx=7),
            make_record(matrix_file_path="a.npy", matrix_row_idx=3),
            make_record(matrix_file_path="b.npy", matrix_row_idx=0),
        ]
        voted = vote_attributes(recs)
        assert voted.matrix_file_path == "a.npy"
        assert voted.matrix_row_idx == 3  # min row among members on a.npy


class TestBuildMetacells:
    def make_inputs(self, rows, cols=8, seed=0):
        rng = np.random.default_rng(seed)
        matrix = rng.integers(1, 30, size=(rows, cols)).astype(float)
        attrs = [make_record(matrix_row_idx=i, donor_id=f"d{i % 3}") for i in range(rows)]
        return matrix, attrs

    def test_partition(self):
        matrix, attrs = self.make_inputs(47)
        cfg = PreprocessConfig(n_hvg=6, n_pcs=3, metacell_group_size=10, seed=0)
        cells = build_metacells(matrix, attrs, cfg)
        members = sorted(r for c in cells for r in c.member_rows)
        assert members == list(range(47))  # every row in exactly one group

    def test_group_count(self):
        matrix, attrs = self.make_inputs(47)
        cfg = PreprocessConfig(n_hvg=6, n_pcs=3, metacell_group_size=10, seed=0)
        cells = build_metacells(matrix, attrs, cfg)
        assert len(cells) <= -(-47 // 10)

    def test_expression_is_member_mean(self):
        matrix, attrs = self.make_inputs(25)
        cfg = PreprocessConfig(n_hvg=6, n_pcs=3, metacell_group_size=10, seed=0)
        cells = build_metacells(matrix, attrs, cfg)
        normalized = normalize(matrix, cfg.target_sum)
        for c in cells:
            np.testing.assert_allclose(
                c.expression, normalized[c.member_rows].mean(axis=0)
            )

    def test_deterministic(self):
        matrix, attrs = self.make_inputs(30)
        cfg = PreprocessConfig(n_hvg=5, n_pcs=2, metacell_group_size=8, seed=3)
        a = build_metacells(matrix, attrs, cfg)
        b = build_metacells(matrix, attrs, cfg)
        assert [c.member_rows for c in a] == [c.member_rows for c in b]

    def test_single_group_when_few_rows(self):
        matrix, attrs = self.make_inputs(5)
        cfg = PreprocessConfig(metacell_group_size=10)
        cells = build_metacells(matrix, attrs, cfg)
        assert len(cells) == 1
        assert cells[0].member_rows == list(range(5))

    def test_mismatched_attrs(self):
        matrix, attrs = self.make_inputs(10)
        with pytest.raises(InputError):
            build_metacells(matrix, attrs[:-1], PreprocessConfig())


class TestConfig:
    def test_defaults(self):
        cfg = PreprocessConfig()
        assert cfg.target_sum == 10_000.0
        assert cfg.n_hvg == 1500
        assert cfg.n_pcs == 50

    def test_rejects_nonpositive(self):
        with pytest.raises(ConfigError):
            PreprocessConfig(n_hvg=0)
        with pytest.raises(ConfigError):
            PreprocessConfig(target_sum=-1.0)
