import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egpr.ensemble import mix_moments, weights_from_mse
from egpr.gp import GPPrediction
from egpr.kernel import KernelParams, kernel_matrix
from egpr.metrics import decile_labels, decile_sizes, r2_pool, spearman
from egpr.panel import rank_transform
from egpr.portfolio import project_simplex, solve_simplex_qp

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = st.integers(1, 40).flatmap(lambda n: arrays(np.float64, n, elements=finite))
SETTINGS = settings(max_examples=60, deadline=None)


class TestSimplexProperties:
    @SETTINGS
    @given(vectors)
    def test_projection_feasible_and_idempotent(self, v):
        w = project_simplex(v)
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-9
        np.testing.assert_allclose(project_simplex(w), w, atol=1e-12)

    @SETTINGS
    @given(st.integers(2, 12), st.integers(0, 2**31 - 1))
    def test_qp_kkt(self, n, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(n, n))
        w, res = solve_simplex_qp(A @ A.T, rng.normal(size=n))
        assert res < 1e-8
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-9


class TestKernelProperties:
    @SETTINGS
    @given(st.integers(1, 15), st.integers(1, 6), st.integers(0, 2**31 - 1),
           st.floats(0.01, 10), st.floats(0, 5), st.floats(0.01, 100))
    def test_gram_symmetric_psd(self, n, d, seed, sigma, alpha, beta):
        X = np.random.default_rng(seed).normal(size=(n, d))
        K = kernel_matrix(KernelParams(sigma, alpha, beta), X)
        np.testing.assert_array_equal(K, K.T)
        assert np.all(K > 0)
        assert np.linalg.eigvalsh(K).min() >= -1e-9 * np.abs(K).max()


class TestEnsembleProperties:
    @SETTINGS
    @given(st.dictionaries(st.integers(0, 50), st.floats(1e-6, 1e3), min_size=1, max_size=10))
    def test_mse_weights_simplex(self, mse):
        calib = max(mse) + 1
        w = weights_from_mse(mse, calib)
        assert abs(sum(w.weights.values()) - 1) <= 1e-12
        assert w.weights[calib] == 0.0
        # lower MSE never gets less weight, up to the one-ulp normalization residual
        for a in mse:
            for b in mse:
                if mse[a] < mse[b]:
                    assert w.weights[a] >= w.weights[b] - 1e-15

    @SETTINGS
    @given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_mixture_mean_in_hull_and_cov_psd(self, k, m, seed):
        rng = np.random.default_rng(seed)
        preds, raw = {}, {}
        for j in range(k):
            A = rng.normal(size=(m, m))
            cov = A @ A.T
            preds[j] = GPPrediction(mean=rng.normal(size=m), cov=cov, var=np.diag(cov).copy())
            raw[j] = rng.uniform(0.1, 1)
        total = sum(raw.values())
        w = {j: v / total for j, v in raw.items()}
        mean, cov, var = mix_moments(w, preds)
        means = np.array([p.mean for p in preds.values()])
        assert np.all(mean >= means.min(0) - 1e-12) and np.all(mean <= means.max(0) + 1e-12)
        assert np.linalg.eigvalsh(cov).min() >= -1e-9 * max(1.0, np.abs(cov).max())
        _, _, dvar = mix_moments(w, preds, diagonal=True)
        np.testing.assert_allclose(dvar, var, rtol=1e-10, atol=1e-12)


class TestMetricProperties:
    @SETTINGS
    @given(vectors)
    def test_rank_transform_bounds_and_order(self, v):
        z = rank_transform(v)
        assert np.all(np.abs(z) < 1)
        order = np.argsort(v, kind="stable")
        assert np.all(np.diff(z[order]) >= 0)

    @SETTINGS
    @given(st.integers(0, 300))
    def test_decile_sizes(self, n):
        sizes = decile_sizes(n)
        assert sizes.sum() == n and sizes.max() - sizes.min() <= 1
        assert np.all(np.diff(sizes) >= 0)

    @SETTINGS
    @given(vectors)
    def test_decile_labels_monotone(self, v):
        labels = decile_labels(v)
        order = np.argsort(v, kind="stable")
        assert np.all(np.diff(labels[order]) >= 0)
        assert labels.min() >= 1 and labels.max() <= 10

    @SETTINGS
    @given(st.integers(3, 40), st.integers(0, 2**31 - 1))
    def test_spearman_monotone_invariance(self, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=n), rng.normal(size=n)
        assert abs(spearman(a, b) - spearman(np.exp(a), b**3)) < 1e-12
        assert abs(spearman(a, a) - 1) < 1e-12

    @SETTINGS
    @given(st.integers(1, 30), st.integers(0, 2**31 - 1))
    def test_r2_pool_anchors(self, n, seed):
        r = np.random.default_rng(seed).normal(size=n)
        assert r2_pool([r], [r]) == 1.0
        assert r2_pool([np.zeros(n)], [r]) == 0.0
