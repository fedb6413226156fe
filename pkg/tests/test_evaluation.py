import math
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from stylecond.dataset import load_batch
from stylecond.evaluation import (
    EvalReport,
    EvaluationError,
    FeatureStats,
    compute_feature_stats,
    evaluate_model,
    frechet_distance,
    inception_score,
    matrix_sqrt_psd,
    per_class_diversity,
    truncation_sweep,
)
from stylecond.features import ToyFeatureExtractor
from stylecond.truncation import latent_center_of_mass, truncate_latent


def gaussian_fid_oracle(mu1, s1, mu2, s2):
    cross = scipy.linalg.sqrtm(s1 @ s2)
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * np.real(cross)))


def random_psd(rng, f):
    a = rng.normal(size=(f, f))
    return a.T @ a + 0.1 * np.eye(f)


class TestStats:
    def test_two_rows(self):
        s = compute_feature_stats(np.array([[0.0, 0.0], [2.0, 2.0]]))
        assert s.mu.tolist() == [1.0, 1.0]
        assert s.sigma.tolist() == [[2.0, 2.0], [2.0, 2.0]]
        assert s.count == 2

    def test_constant_rows(self):
        assert np.all(compute_feature_stats(np.ones((5, 3))).sigma == 0)

    def test_permutation_invariant(self):
        x = np.random.default_rng(0).normal(size=(20, 4))
        a, b = compute_feature_stats(x), compute_feature_stats(x[::-1])
        assert np.allclose(a.mu, b.mu, atol=1e-14) and np.allclose(a.sigma, b.sigma, atol=1e-14)

    def test_matches_numpy_cov(self):
        x = np.random.default_rng(1).normal(size=(30, 5))
        assert np.allclose(compute_feature_stats(x).sigma, np.cov(x, rowvar=False), atol=1e-12)

    def test_single_row(self):
        with pytest.raises(EvaluationError):
            compute_feature_stats(np.zeros((1, 3)))


class TestMatrixSqrt:
    def test_identity(self):
        assert np.allclose(matrix_sqrt_psd(np.eye(4)), np.eye(4), atol=1e-15)

    def test_diagonal(self):
        assert np.allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_reconstruction(self, seed):
        a = np.random.default_rng(seed).normal(size=(3, 3))
        m = a.T @ a
        s = matrix_sqrt_psd(m)
        assert np.max(np.abs(s @ s - m)) < 1e-8

    def test_rank_deficient(self):
        v = np.array([[1.0], [2.0], [2.0]])
        m = v @ v.T
        s = matrix_sqrt_psd(m)
        assert np.max(np.abs(s @ s - m)) < 1e-8

    def test_asymmetric_rejected(self):
        with pytest.raises(EvaluationError):
            matrix_sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestFrechet:
    def test_identical(self):
        x = np.random.default_rng(0).normal(size=(50, 6))
        s = compute_feature_stats(x)
        assert frechet_distance(s, s) < 1e-6

    def test_mean_shift(self):
        x = np.random.default_rng(0).normal(size=(50, 6))
        v = np.array([1.0, -2.0, 0.5, 0.0, 3.0, 0.25])
        a, b = compute_feature_stats(x), compute_feature_stats(x + v)
        assert abs(frechet_distance(a, b) - float(v @ v)) < 1e-8

    @pytest.mark.parametrize("seed", range(4))
    def test_closed_form_gaussians(self, seed):
        rng = np.random.default_rng(seed)
        mu1, mu2 = rng.normal(size=5), rng.normal(size=5)
        s1, s2 = random_psd(rng, 5), random_psd(rng, 5)
        got = frechet_distance(FeatureStats(mu1, s1, 0), FeatureStats(mu2, s2, 0))
        assert abs(got - gaussian_fid_oracle(mu1, s1, mu2, s2)) < 1e-4

    def test_scalar_gaussians(self):
        # 1-D: (m1 - m2)^2 + (sd1 - sd2)^2
        got = frechet_distance(FeatureStats(np.array([1.0]), np.array([[4.0]]), 0),
                               FeatureStats(np.array([3.0]), np.array([[9.0]]), 0))
        assert got == pytest.approx(4.0 + 1.0, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetric_and_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        a = compute_feature_stats(rng.normal(size=(12, 4)))
        b = compute_feature_stats(rng.normal(size=(12, 4)) * 2 + 1)
        ab, ba = frechet_distance(a, b), frechet_distance(b, a)
        assert ab >= 0 and abs(ab - ba) < 1e-8

    def test_dimension_mismatch(self):
        with pytest.raises(EvaluationError):
            frechet_distance(compute_feature_stats(np.eye(3)), compute_feature_stats(np.eye(4)[:3]))

    def test_shrinks_with_sample_count(self):
        rng = np.random.default_rng(0)
        mean, cov = np.zeros(4), np.diag([1.0, 2.0, 0.5, 1.5])
        fids = []
        for n in (100, 1000, 10000):
            a = compute_feature_stats(rng.multivariate_normal(mean, cov, size=n))
            b = compute_feature_stats(rng.multivariate_normal(mean, cov, size=n))
            fids.append(frechet_distance(a, b))
        assert fids[1] <= fids[0] * 1.1 and fids[2] <= fids[1] * 1.1


def brute_force_is(p):
    n, k = len(p), len(p[0])
    marginal = [sum(p[i][j] for i in range(n)) / n for j in range(k)]
    total = 0.0
    for i in range(n):
        for j in range(k):
            if p[i][j] > 0:
                total += p[i][j] * math.log(p[i][j] / marginal[j])
    return math.exp(total / n)


class TestInceptionScore:
    def test_rows_equal_marginal(self):
        assert inception_score(np.full((5, 4), 0.25)) == pytest.approx(1.0, abs=1e-15)

    def test_one_hot_diagonal(self):
        assert inception_score(np.eye(6)) == pytest.approx(6.0, rel=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        p = np.random.default_rng(seed).random((4, 3))
        p /= p.sum(axis=1, keepdims=True)
        assert abs(inception_score(p) - brute_force_is(p.tolist())) < 1e-10

    def test_zero_entries(self):
        p = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0]])
        assert abs(inception_score(p) - brute_force_is(p.tolist())) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 6))
    def test_bounds_and_row_order(self, seed, n, k):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.full(k, 0.3), size=n)
        p = np.clip(p, 0, None)
        p /= p.sum(axis=1, keepdims=True)
        score = inception_score(p)
        assert 1 - 1e-12 <= score <= k + 1e-9
        assert score == pytest.approx(inception_score(p[rng.permutation(n)]), rel=1e-12)

    @pytest.mark.parametrize("bad", [[[0.5, 0.6]], [[-0.1, 1.1]], [0.5, 0.5]])
    def test_invalid(self, bad):
        with pytest.raises(EvaluationError):
            inception_score(np.array(bad))


class TestTruncation:
    def test_examples(self):
        w, c = torch.tensor([2.0, 4.0]), torch.zeros(2)
        assert truncate_latent(w, c, 0.5).tolist() == [1.0, 2.0]
        w, c = torch.randn(3, 5), torch.randn(5)
        assert torch.equal(truncate_latent(w, c, 0.0), c.expand(3, 5))
        assert torch.equal(truncate_latent(w, c, 1.0), w)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-2, 2))
    def test_affine_in_psi(self, psi):
        w, c = torch.randn(4, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
        assert torch.allclose(truncate_latent(w, c, psi), c + psi * (w - c), atol=1e-12)

    def test_center_law_of_large_numbers(self):
        d, n = 16, 10_000
        w_bar = latent_center_of_mass(lambda x: x, None, None, n, seed=0, latent_dim=d)
        assert torch.linalg.norm(w_bar) < 3 * d / math.sqrt(n)

    def test_single_sample_center(self):
        z = torch.randn(1, 8, generator=torch.Generator().manual_seed(4))
        assert torch.equal(latent_center_of_mass(lambda x: x, None, None, 1, seed=4, latent_dim=8), z[0])

    def test_center_deterministic(self):
        f = lambda x: torch.tanh(x)  # noqa: E731
        a = latent_center_of_mass(f, None, None, 100, seed=3, latent_dim=4)
        b = latent_center_of_mass(f, None, None, 100, seed=3, latent_dim=4)
        assert torch.equal(a, b)

    def test_per_class_center(self):
        r = torch.tensor([[10.0], [-10.0]])
        center = latent_center_of_mass(lambda x: x[:, :1], r, [0.5, 0.5], 50, seed=0, latent_dim=1, fixed_class=1)
        assert center.tolist() == [-10.0]


class LinearStub:
    """Output linear in w; enough of the generator surface for grids."""

    def __init__(self, d=6, c=2):
        g = torch.Generator().manual_seed(0)
        self.num_classes, self.latent_dim = c, d
        self.config = SimpleNamespace(max_phase=0)
        self.r = torch.randn(c, d, generator=g)
        self.a = torch.randn(d, 48, generator=g) * 0.05

    def map(self, z, y):
        return z + y @ self.r

    def make_noise(self, n, phase, seed, shared=False):
        return None

    def synthesize(self, w, noise, phase, alpha=1.0):
        return (w @ self.a).view(-1, 3, 4, 4)


class TestSweep:
    def test_files_and_collapse(self, tmp_path):
        stub = LinearStub()
        paths = truncation_sweep(stub, [0, 0.5, 1], [0, 1], 4, seed=0, out_dir=tmp_path, w_avg=torch.zeros(2, 6))
        assert [p.name for p in paths] == ["sweep_psi0.png", "sweep_psi0.5.png", "sweep_psi1.png"]
        grid = np.asarray(Image.open(paths[0]))
        for row in range(2):
            tiles = [grid[row * 4:(row + 1) * 4, c * 4:(c + 1) * 4] for c in range(4)]
            assert all(np.array_equal(tiles[0], t) for t in tiles)

    def test_distance_grows_with_psi(self, tmp_path):
        stub = LinearStub()
        psis = [0, 0.25, 0.5, 1]
        paths = truncation_sweep(stub, psis, [0, 1], 6, seed=1, out_dir=tmp_path, w_avg=torch.zeros(2, 6))
        grids = [np.asarray(Image.open(p)).astype(float) for p in paths]
        dists = [np.abs(g - grids[0]).sum() for g in grids]
        assert dists == sorted(dists) and dists[-1] > 0

    def test_empty_psis(self, tmp_path):
        with pytest.raises(EvaluationError):
            truncation_sweep(LinearStub(), [], [0], 2, 0, tmp_path)


class TestEvaluateModel:
    def test_dataset_sampler_scores_zero(self, shapes_store):
        m, labels, _ = shapes_store

        def replay(y, seed):
            return load_batch(m, labels, 16, len(y), seed)[0]

        report = evaluate_model(replay, m, labels, ToyFeatureExtractor(), n_samples=8, seed=2, resolution=16)
        assert report.fid < 1e-6
        assert report.is_score >= 1.0

    def test_deterministic_and_round_trip(self, tmp_path, shapes_store):
        m, labels, _ = shapes_store

        def noise(y, seed):
            return np.random.default_rng(seed).uniform(-1, 1, (len(y), 3, 16, 16))

        a = evaluate_model(noise, m, labels, ToyFeatureExtractor(), 12, 5, 16)
        b = evaluate_model(noise, m, labels, ToyFeatureExtractor(), 12, 5, 16)
        assert a == b
        assert a.fid > 0
        assert EvalReport.load(a.save(tmp_path / "r.json")) == a

    def test_oversampling_warns(self, shapes_store, caplog):
        m, labels, _ = shapes_store
        evaluate_model(lambda y, s: load_batch(m, labels, 16, len(y), s)[0], m, labels, ToyFeatureExtractor(), 40, 0, 16)
        assert any("with replacement" in r.message for r in caplog.records)

    def test_wrong_sampler_shape(self, shapes_store):
        m, labels, _ = shapes_store
        with pytest.raises(EvaluationError):
            evaluate_model(lambda y, s: np.zeros((len(y), 3, 8, 8)), m, labels, ToyFeatureExtractor(), 4, 0, 16)


class TestDiversity:
    def test_pairwise_mean(self):
        images = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0], [1.0, 1.0]])
        out = per_class_diversity(images, np.array([0, 0, 1, 2]))
        assert out[0] == pytest.approx(5.0) and out[1] is None and out[2] is None
