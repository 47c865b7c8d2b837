import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from enkf_lstm.bayes_lstm import PosteriorModel, TrainingConfig
from enkf_lstm.enkf import Ensemble
from enkf_lstm.errors import DataError, NumericalError
from enkf_lstm.lstm_core import LstmShape, forward_ensemble
from enkf_lstm.outlier_detect import (
    chi2_cdf,
    chi2_critical,
    detect,
    mahalanobis_sq,
    read_report_csv,
    regularized_gamma_p,
    summarize,
    write_report_csv,
)


class TestMahalanobis:
    def test_zero_at_mean(self):
        assert mahalanobis_sq([1.0, 2.0], [1.0, 2.0], np.eye(2)) == 0.0

    def test_identity(self):
        assert mahalanobis_sq([3.0, 4.0], [0.0, 0.0], np.eye(2)) == pytest.approx(25.0, rel=1e-14)

    def test_diagonal(self):
        assert mahalanobis_sq([2.0, 1.0], [0.0, 0.0], np.diag([4.0, 1.0])) == pytest.approx(2.0, rel=1e-14)

    def test_singular_gets_jitter(self):
        d2 = mahalanobis_sq([1.0, 1.0], [0.0, 0.0], np.array([[1.0, 1.0], [1.0, 1.0]]))
        assert np.isfinite(d2) and d2 >= 0

    def test_indefinite_raises(self):
        with pytest.raises(NumericalError):
            mahalanobis_sq([1.0, 1.0], [0.0, 0.0], np.diag([1.0, -3.0]))

    def test_affine_invariance(self, rng):
        for _ in range(20):
            q = int(rng.integers(1, 6))
            B = rng.standard_normal((q, q))
            cov = B @ B.T + 0.1 * np.eye(q)
            obs, mean = rng.standard_normal(q), rng.standard_normal(q)
            L = rng.standard_normal((q, q)) + 2 * np.eye(q)
            a = mahalanobis_sq(obs, mean, cov)
            b = mahalanobis_sq(L @ obs, L @ mean, L @ cov @ L.T)
            assert b == pytest.approx(a, rel=1e-8)

    def test_flag_rate_matches_nominal_tail(self):
        rng = np.random.default_rng(3)
        q = 5
        B = rng.standard_normal((q, q))
        cov = B @ B.T + np.eye(q)
        mean = rng.standard_normal(q)
        draws = rng.multivariate_normal(mean, cov, size=100_000)
        # vectorised equivalent of mahalanobis_sq for the bulk check
        L = np.linalg.cholesky(cov)
        z = np.linalg.solve(L, (draws - mean).T)
        d2 = np.sum(z * z, axis=0)
        for k in range(5):
            assert mahalanobis_sq(draws[k], mean, cov) == pytest.approx(d2[k], rel=1e-10)
        rate = np.mean(d2 > chi2_critical(q, 0.05))
        assert abs(rate - 0.05) < 0.01


class TestChi2:
    @pytest.mark.parametrize("a", [0.5, 1.0, 2.5, 7.0, 30.0])
    def test_incomplete_gamma_against_scipy(self, a):
        for x in [1e-3, 0.3, 1.0, a, a + 1.5, 3 * a + 10]:
            assert regularized_gamma_p(a, x) == pytest.approx(special.gammainc(a, x), abs=1e-13)

    def test_dof2_closed_form(self):
        assert chi2_critical(2, 0.05) == pytest.approx(-2 * np.log(0.05), abs=1e-10)

    @pytest.mark.parametrize("dof, expected", [(1, 3.84145882069412664701), (5, 11.0704976935163552406)])
    def test_reference_values(self, dof, expected):
        assert chi2_critical(dof, 0.05) == pytest.approx(expected, abs=1e-8)

    def test_cdf_at_critical(self):
        for dof in range(1, 12):
            assert chi2_cdf(chi2_critical(dof, 0.01), dof) == pytest.approx(0.99, abs=1e-12)

    @pytest.mark.parametrize("tail", [0.0, 1.0, -0.1, 1.5])
    def test_invalid_tail(self, tail):
        with pytest.raises(ValueError):
            chi2_critical(3, tail)

    def test_invalid_dof(self):
        with pytest.raises(ValueError):
            chi2_critical(0, 0.05)


@settings(max_examples=30, deadline=None)
@given(dof=st.integers(1, 40), tail=st.floats(0.001, 0.5))
def test_critical_value_monotone(dof, tail):
    c = chi2_critical(dof, tail)
    assert chi2_critical(dof + 1, tail) > c
    assert chi2_critical(dof, tail * 1.5) < c


def member_model(rng, sigma_eps=0.04, sequence_len=4, spread=0.0, n=10):
    shape = LstmShape(2, 3, 2)
    w = 0.8 * rng.standard_normal(shape.weight_count)
    members = w + spread * rng.standard_normal((n, shape.weight_count))
    cfg = TrainingConfig(sequence_len=sequence_len, n_members=n, hidden_dim=3)
    return PosteriorModel(Ensemble(members), shape, sigma_eps, cfg), w


def self_generated_stream(w, shape, T, L, rng):
    s = np.zeros((T, shape.input_dim))
    s[:L] = 0.1 * rng.standard_normal((L, shape.input_dim))
    for t in range(L, T):
        s[t] = forward_ensemble(w[None], shape, s[None, t - L:t])[0, 0]
    return s


class TestDetect:
    def test_self_generated_stream_has_no_outliers(self, rng):
        model, w = member_model(rng)
        stream = self_generated_stream(w, model.shape, 104, 4, rng)
        reports = detect(stream, model)
        assert len(reports) == 100
        assert not any(r.is_outlier for r in reports)
        assert max(r.m_d2 for r in reports) < 1e-12

    def test_injected_shift_is_flagged(self, rng):
        model, w = member_model(rng, spread=0.01)
        stream = self_generated_stream(w, model.shape, 60, 4, rng)
        stream[40] += 10 * stream[4:].std(axis=0) + 10 * np.sqrt(model.sigma_eps)
        flagged = [r.window_index for r in detect(stream, model) if r.is_outlier]
        assert 40 in flagged

    def test_short_stream(self, rng):
        model, _ = member_model(rng)
        with pytest.raises(DataError):
            detect(np.zeros((4, 2)), model)

    def test_count_and_order(self, rng):
        model, _ = member_model(rng, spread=0.1)
        stream = rng.standard_normal((37, 2))
        reports = detect(stream, model, timestamps=100.0 + 300 * np.arange(37))
        assert [r.window_index for r in reports] == list(range(4, 37))
        assert reports[0].timestamp == 100.0 + 1200
        for r in reports:
            assert r.m_d2 >= 0
            assert r.is_outlier == (r.m_d2 > r.threshold)

    def test_csv_round_trip(self, rng, tmp_path):
        model, _ = member_model(rng, spread=0.1)
        reports = detect(rng.standard_normal((20, 2)), model)
        write_report_csv(reports, tmp_path / "r.csv")
        back = read_report_csv(tmp_path / "r.csv")
        assert [(r.window_index, r.m_d2, r.is_outlier) for r in back] == \
            [(r.window_index, r.m_d2, r.is_outlier) for r in reports]
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert header == "window_index,timestamp,m_d2,threshold,is_outlier"
        summary = summarize(reports)
        assert summary["n_windows"] == 16
