import numpy as np
import pytest

from enkf_lstm import bayes_lstm
from enkf_lstm.bayes_lstm import (
    PosteriorModel,
    TrainingConfig,
    estimate_noise_variance,
    jensen_lower_bound,
    make_samples,
    predict,
    predict_many,
    predictive_from_samples,
    stack_samples,
    train,
)
from enkf_lstm.datasets import SyntheticConfig, generate_synthetic
from enkf_lstm.enkf import Ensemble, ObservationModel, analysis_update, sample_prior
from enkf_lstm.errors import ConfigError, DataError
from enkf_lstm.lstm_core import LstmShape
from oracles import lower_bound_grid_argmax

SMALL = dict(sequence_len=4, batch_size=3, n_members=12, hidden_dim=3)


class TestMakeSamples:
    def test_boundary(self):
        assert len(make_samples(np.zeros((33, 5)), 32)) == 1

    def test_count_and_target(self):
        w = np.arange(40 * 2, dtype=float).reshape(40, 2)
        samples = make_samples(w, 32)
        assert len(samples) == 8
        np.testing.assert_array_equal(samples[0].y, w[32])
        np.testing.assert_array_equal(samples[3].x, w[3:35])

    def test_too_few(self):
        with pytest.raises(DataError):
            make_samples(np.zeros((32, 5)), 32)


class TestNoiseVariance:
    def test_single_residual(self):
        assert estimate_noise_variance([[2.0]], [[[1.0]]]) == 1.0

    def test_two_members(self):
        assert estimate_noise_variance([[0.0]], [[[1.0]], [[-1.0]]]) == 1.0

    def test_zero_residual_floor(self):
        with pytest.warns(RuntimeWarning):
            assert estimate_noise_variance([[1.0, 2.0]], [[[1.0, 2.0]]]) == bayes_lstm.NOISE_FLOOR

    def test_grid_search_oracle(self):
        rng = np.random.default_rng(8)
        grid = np.logspace(-3, 3, 2000)
        step = np.log(grid[1] / grid[0])
        Y = rng.standard_normal((3, 2))
        F = Y[None] + 0.7 * rng.standard_normal((4, 3, 2))
        est = estimate_noise_variance(Y, F)
        best = lower_bound_grid_argmax(Y, F, grid)
        assert abs(np.log(est) - np.log(best)) <= step
        assert jensen_lower_bound(Y, F, est) >= jensen_lower_bound(Y, F, best)


class TestPredict:
    def model_from_members(self, members, sigma_eps, shape):
        cfg = TrainingConfig(sequence_len=2, n_members=len(members), hidden_dim=shape.hidden_dim)
        return PosteriorModel(Ensemble(members), shape, sigma_eps, cfg)

    def test_identical_members(self, rng):
        shape = LstmShape(2, 3, 2)
        w = rng.standard_normal(shape.weight_count)
        model = self.model_from_members(np.tile(w, (5, 1)), 0.3, shape)
        pd = predict(model, rng.standard_normal((2, 2)))
        np.testing.assert_array_equal(pd.samples, np.tile(pd.samples[0], (5, 1)))
        np.testing.assert_allclose(pd.cov, 0.3 * np.eye(2), atol=1e-15)

    def test_hand_moments(self):
        pd = predictive_from_samples(np.array([[1.0], [3.0]]), 0.5)
        assert pd.mean[0] == 2.0
        assert pd.cov[0, 0] == 2.5

    def test_predict_many_matches_predict(self, rng):
        shape = LstmShape(2, 3, 2)
        model = self.model_from_members(rng.standard_normal((6, shape.weight_count)), 0.1, shape)
        X = rng.standard_normal((4, 2, 2))
        _, means, covs = predict_many(model, X)
        for k in range(4):
            pd = predict(model, X[k])
            np.testing.assert_allclose(pd.mean, means[k])
            np.testing.assert_allclose(pd.cov, covs[k])
            np.testing.assert_allclose(pd.cov, pd.cov.T)


class TestTrainingConfig:
    def test_rejects_single_member(self):
        with pytest.raises(ConfigError):
            TrainingConfig(n_members=1)

    def test_defaults(self):
        c = TrainingConfig()
        assert (c.sequence_len, c.batch_size, c.n_members, c.hidden_dim) == (32, 16, 100, 32)
        assert c.sigma_eps_init == 1.0 and c.mle_enabled


def small_series(rng, T=60, d=2):
    t = np.arange(T)
    return np.column_stack([np.sin(0.3 * t + k) for k in range(d)]) + 0.1 * rng.standard_normal((T, d))


class TestTrain:
    def test_degenerate_prior_leaves_weights(self, rng):
        samples = make_samples(small_series(rng, 8), 4)[:3]
        cfg = TrainingConfig(**SMALL, sigma_w=1e-12, mle_enabled=False)
        prior = sample_prior(LstmShape(2, 3, 2).weight_count, 1e-12, 12,
                             bayes_lstm._rng(cfg.seed, bayes_lstm._PRIOR_STREAM)).members
        model = train(samples, cfg)
        np.testing.assert_allclose(model.weight_ensemble.members, prior, atol=1e-20)

    def test_trailing_short_batch(self, rng, monkeypatch):
        seen = []
        real = bayes_lstm.analysis_update

        def spy(ens, obs, model, r):
            seen.append(model.obs_dim)
            return real(ens, obs, model, r)

        monkeypatch.setattr(bayes_lstm, "analysis_update", spy)
        samples = make_samples(small_series(rng, 4 + 8), 4)  # 8 samples, batches 3+3+2
        train(samples, TrainingConfig(**SMALL, mle_enabled=False))
        assert seen == [6, 6, 4]

    def test_augmentation_layout(self, rng, monkeypatch):
        calls = []
        real = bayes_lstm.analysis_update

        def spy(ens, obs, model, r):
            out = real(ens, obs, model, r)
            calls.append((ens.members.copy(), obs.copy(), model.obs_dim, out.members.copy()))
            return out

        monkeypatch.setattr(bayes_lstm, "analysis_update", spy)
        series = small_series(rng, 4 + 6)
        samples = make_samples(series, 4)
        cfg = TrainingConfig(**SMALL, mle_enabled=False)
        model = train(samples, cfg)
        shape = model.shape
        X, Y = stack_samples(samples)
        for b, (U, obs, k, post) in enumerate(calls):
            weights = U[:, k:]
            # output block is recomputed from the weights carried into this batch
            F = bayes_lstm.forward_ensemble(weights, shape, X[3 * b:3 * b + 3])
            np.testing.assert_array_equal(U[:, :k], F.reshape(len(F), -1))
            np.testing.assert_array_equal(obs, Y[3 * b:3 * b + 3].ravel())
            if b:
                np.testing.assert_array_equal(weights, calls[b - 1][3][:, calls[b - 1][2]:])
        np.testing.assert_array_equal(model.weight_ensemble.members, calls[-1][3][:, calls[-1][2]:])

    def test_seed_determinism(self, rng, tmp_path):
        samples = make_samples(small_series(rng, 30), 4)
        a = train(samples, TrainingConfig(**SMALL, seed=5))
        b = train(samples, TrainingConfig(**SMALL, seed=5))
        np.testing.assert_array_equal(a.weight_ensemble.members, b.weight_ensemble.members)
        assert a.sigma_eps == b.sigma_eps
        a.save(tmp_path / "a.bin")
        b.save(tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_checkpoint_round_trip_and_resume(self, rng, tmp_path):
        samples = make_samples(small_series(rng, 40), 4)
        cfg = TrainingConfig(**SMALL)
        model = train(samples[:20], cfg)
        model.save(tmp_path / "m.bin")
        back = PosteriorModel.load(tmp_path / "m.bin")
        np.testing.assert_array_equal(back.weight_ensemble.members, model.weight_ensemble.members)
        assert back.sigma_eps == model.sigma_eps and back.step == model.step == 7
        resumed = train(samples[20:], cfg, resume=back)
        assert resumed.step == 7 + 6
        batches = [r["batch"] for r in resumed.training_log if "batch" in r]
        assert batches[-6:] == list(range(7, 13))

    def test_mle_log_records_iterations(self, rng):
        samples = make_samples(small_series(rng, 40), 4)
        model = train(samples, TrainingConfig(**SMALL, mle_max_iter=3))
        mle = [r for r in model.training_log if "sigma_eps_mle" in r]
        assert 1 <= len(mle) <= 3
        assert model.sigma_eps == mle[-1]["sigma_eps_mle"]
        assert mle[0]["sigma_eps_used"] == 1.0

    def test_non_finite_samples_rejected(self, rng):
        series = small_series(rng, 10)
        series[6, 1] = np.nan
        with pytest.raises(DataError):
            train(make_samples(series, 4), TrainingConfig(**SMALL))


def test_linear_model_posterior_variance_shrinks():
    # linear-in-weights regression with the same augmented-state update
    rng = np.random.default_rng(2)
    n_feat, n_members = 3, 2000
    w_true = np.array([1.0, -0.5, 2.0])
    ens = sample_prior(n_feat, 1.0, n_members, rng).members
    for _ in range(10):
        X = rng.standard_normal((4, n_feat))
        y = X @ w_true + 0.1 * rng.standard_normal(4)
        F = ens @ X.T
        post = analysis_update(Ensemble(np.hstack([F, ens])), y, ObservationModel(4, 0.01), rng)
        ens = post.members[:, 4:]
    assert np.all(ens.var(axis=0, ddof=1) < 0.05)
    np.testing.assert_allclose(ens.mean(axis=0), w_true, atol=0.1)


@pytest.fixture(scope="module")
def fitted():
    cfg = SyntheticConfig(n_windows=700, hidden_dim=4, n_outliers=0)
    stream = generate_synthetic(cfg, np.random.default_rng(21))
    tc = TrainingConfig(sequence_len=32, n_members=60, hidden_dim=8, seed=3)
    train_part, test_part = stream.series[:400], stream.series[400:]
    model = train(make_samples(train_part, 32), tc)
    prior = train(make_samples(train_part[:33], 32),
                  TrainingConfig(sequence_len=32, n_members=60, hidden_dim=8, seed=3,
                                 sigma_eps_init=1e12, mle_enabled=False))
    X, Y = stack_samples(make_samples(test_part, 32))
    return model, prior, X, Y


@pytest.mark.slow
class TestSyntheticTraining:
    def test_posterior_beats_prior(self, fitted):
        model, prior, X, Y = fitted
        _, mu, _ = predict_many(model, X)
        _, mu0, _ = predict_many(prior, X)
        rmse = np.sqrt(np.mean((mu - Y) ** 2))
        rmse0 = np.sqrt(np.mean((mu0 - Y) ** 2))
        assert rmse < rmse0

    def test_predictive_coverage(self, fitted):
        from enkf_lstm.outlier_detect import chi2_critical, mahalanobis_sq

        model, _, X, Y = fitted
        _, mu, cov = predict_many(model, X)
        c = chi2_critical(Y.shape[1], 0.05)
        inside = [mahalanobis_sq(y, m, S) <= c for y, m, S in zip(Y, mu, cov)]
        assert np.mean(inside) >= 0.85
