"""Chi-squared test of the squared Mahalanobis distance between each new
window and the ensemble predictive distribution built from the windows
before it."""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from .bayes_lstm import predict_many
from .errors import DataError, NumericalError, ShapeError

JITTER_START = 1e-9
JITTER_RETRIES = 3

_ITMAX = 10_000
_EPS = 1e-16
_TINY = 1e-300


def regularized_gamma_p(a, x):
    """Regularized lower incomplete gamma P(a, x).

    Power series below ``a + 1``, Lentz continued fraction for Q above.
    """
    if a <= 0:
        raise ValueError("a must be > 0")
    if x <= 0:
        return 0.0
    log_prefix = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        term = 1.0 / a
        total = term
        ap = a
        for _ in range(_ITMAX):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                return min(1.0, total * math.exp(log_prefix))
        raise NumericalError(f"incomplete gamma series did not converge (a={a}, x={x})")
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _ITMAX):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return max(0.0, 1.0 - math.exp(log_prefix) * h)
    raise NumericalError(f"incomplete gamma continued fraction did not converge (a={a}, x={x})")


def chi2_cdf(x, dof):
    return regularized_gamma_p(0.5 * dof, 0.5 * x)


def chi2_critical(dof, upper_tail=0.05):
    """Value ``c`` with ``P(chi2_dof <= c) = 1 - upper_tail``."""
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof!r}")
    if not (0.0 < upper_tail < 1.0):
        raise ValueError(f"upper_tail must lie in (0, 1), got {upper_tail!r}")
    target = 1.0 - upper_tail
    lo, hi = 0.0, max(1.0, float(dof))
    while chi2_cdf(hi, dof) < target:
        lo, hi = hi, 2.0 * hi
    return brentq(lambda c: chi2_cdf(c, dof) - target, lo, hi, xtol=1e-12, rtol=1e-14,
                  maxiter=500)


def _cholesky_with_jitter(cov):
    try:
        return scipy.linalg.cholesky(cov, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(cov)))
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    jitter = JITTER_START * scale
    for _ in range(JITTER_RETRIES + 1):
        try:
            return scipy.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]), lower=True,
                                         check_finite=False)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    cond = np.linalg.cond(cov) if np.all(np.isfinite(cov)) else np.inf
    raise NumericalError(f"covariance not positive definite after jitter "
                         f"(condition estimate {cond:.3e})", condition=float(cond))


def mahalanobis_sq(obs, mean, cov):
    """``(obs - mean)^T cov^{-1} (obs - mean)`` through a Cholesky solve."""
    diff = np.atleast_1d(np.asarray(obs, dtype=np.float64) - np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape != (diff.size, diff.size):
        raise ShapeError(f"covariance {cov.shape} does not match vector length {diff.size}")
    L = _cholesky_with_jitter(0.5 * (cov + cov.T))
    z = scipy.linalg.solve_triangular(L, diff, lower=True, check_finite=False)
    return float(z @ z)


@dataclass(frozen=True)
class OutlierReport:
    window_index: int
    timestamp: float
    m_d2: float
    threshold: float
    is_outlier: bool
    predictive_mean: np.ndarray
    predictive_cov_diag: np.ndarray


@dataclass(frozen=True)
class DetectConfig:
    upper_tail: float = 0.05
    chunk: int = 256


def detect(stream, model, config=None, timestamps=None, executor=None):
    """Score every window that has ``sequence_len`` predecessors.

    Parameters
    ----------
    stream : array_like, shape (T, q)
        Time-ordered window embeddings.
    model : PosteriorModel
    config : DetectConfig, optional
    timestamps : array_like, shape (T,), optional
        Window start times; defaults to the window index.

    Returns
    -------
    list of OutlierReport, one per window ``t >= sequence_len``.
    """
    config = config or DetectConfig()
    stream = np.asarray(stream, dtype=np.float64)
    L = model.config.sequence_len
    if stream.ndim != 2 or stream.shape[1] != model.shape.input_dim:
        raise ShapeError(f"stream must be (T, {model.shape.input_dim}), got {stream.shape}")
    T = stream.shape[0]
    if T < L + 1:
        raise DataError(f"stream has {T} windows; need at least {L + 1}")
    if not np.all(np.isfinite(stream)):
        raise DataError("stream contains non-finite values")
    ts = np.arange(T, dtype=np.float64) if timestamps is None else np.asarray(timestamps, float)
    threshold = chi2_critical(model.shape.output_dim, config.upper_tail)

    reports = []
    targets = np.arange(L, T)
    for start in range(0, targets.size, config.chunk):
        idx = targets[start:start + config.chunk]
        X = np.stack([stream[t - L:t] for t in idx])
        _, means, covs = predict_many(model, X, executor=executor)
        for t, mu, cov in zip(idx, means, covs):
            try:
                d2 = mahalanobis_sq(stream[t], mu, cov)
            except NumericalError as exc:
                raise NumericalError(f"window {t}: {exc}", exc.condition,
                                     {"window_index": int(t)}) from exc
            reports.append(OutlierReport(int(t), float(ts[t]), d2, threshold, d2 > threshold,
                                         mu, np.diag(cov).copy()))
    return reports


def write_report_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_index", "timestamp", "m_d2", "threshold", "is_outlier"])
        for r in reports:
            w.writerow([r.window_index, repr(float(r.timestamp)), repr(r.m_d2),
                        repr(r.threshold), int(r.is_outlier)])


def read_report_csv(path):
    """Minimal reports (no predictive moments) from a report CSV."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(OutlierReport(int(row["window_index"]), float(row["timestamp"]),
                                     float(row["m_d2"]), float(row["threshold"]),
                                     bool(int(row["is_outlier"])), np.empty(0), np.empty(0)))
    return out


def summarize(reports):
    n = len(reports)
    flagged = sum(r.is_outlier for r in reports)
    return {
        "n_windows": n,
        "n_flagged": int(flagged),
        "flag_rate": flagged / n if n else None,
        "threshold": reports[0].threshold if n else None,
        "flagged_windows": [r.window_index for r in reports if r.is_outlier],
    }


def write_summary_json(reports, path):
    with open(path, "w") as fh:
        json.dump(summarize(reports), fh, indent=2, sort_keys=True)
        fh.write("\n")
