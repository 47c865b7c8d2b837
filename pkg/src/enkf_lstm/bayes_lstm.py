"""Bayesian LSTM: the weight posterior is represented by an ensemble and
learned batch by batch with the EnKF on an augmented state.

For a batch of ``s`` sequences every member ``w_j`` is propagated to give
``F_j = [f(x_1, w_j), ..., f(x_s, w_j)]`` (length ``s*q``). The augmented
member ``[F_j, w_j]`` is updated against the stacked targets, and only the
weight block is kept for the next batch. The observation-noise variance can
be re-estimated by maximising the Jensen lower bound of the log-evidence,
which has the closed form ``mean over (targets, members, dims) of the squared
residual``.
"""

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import binfmt
from .enkf import Ensemble, ObservationModel, analysis_update, ensemble_moments, sample_prior
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .lstm_core import LstmShape, forward_ensemble

logger = logging.getLogger(__name__)

NOISE_FLOOR = 1e-12

# seed-stream tags, see _rng
_PRIOR_STREAM = 1
_PERTURB_STREAM = 2


@dataclass(frozen=True)
class TrainingConfig:
    sequence_len: int = 32
    batch_size: int = 16
    n_members: int = 100
    hidden_dim: int = 32
    sigma_w: float = 1.0
    # a variance, not a standard deviation
    sigma_eps_init: float = 1.0
    mle_enabled: bool = True
    mle_max_iter: int = 5
    mle_rtol: float = 0.01
    noise_estimator: str = "exact"
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.sequence_len >= 1, "sequence_len must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.n_members >= 2, "n_members must be >= 2"),
            (self.hidden_dim >= 1, "hidden_dim must be >= 1"),
            (self.sigma_w > 0, "sigma_w must be > 0"),
            (self.sigma_eps_init > 0, "sigma_eps_init must be > 0"),
            (self.mle_max_iter >= 1, "mle_max_iter must be >= 1"),
            (self.mle_rtol > 0, "mle_rtol must be > 0"),
            (self.noise_estimator in ("exact", "sample"), "noise_estimator must be 'exact' or 'sample'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class SamplePair:
    x: np.ndarray  # (sequence_len, d)
    y: np.ndarray  # (d,)


@dataclass
class PosteriorModel:
    weight_ensemble: Ensemble
    shape: LstmShape
    sigma_eps: float
    config: TrainingConfig
    step: int = 0
    training_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.weight_ensemble.dim != self.shape.weight_count:
            raise ShapeError("weight ensemble does not match the LSTM shape")
        if not (np.isfinite(self.sigma_eps) and self.sigma_eps > 0):
            raise DataError(f"sigma_eps must be finite and > 0, got {self.sigma_eps!r}")

    @property
    def n_members(self):
        return self.weight_ensemble.n_members

    def save(self, path):
        header = {
            "kind": "posterior_model",
            "shape": self.shape.to_dict(),
            "config": self.config.to_dict(),
            "sigma_eps": float(self.sigma_eps),
            "seed": self.config.seed,
            "ensemble": {"D": self.weight_ensemble.dim, "N": self.n_members,
                         "seed": self.config.seed, "step": int(self.step)},
        }
        binfmt.write(path, header, {"members": self.weight_ensemble.members})

    @classmethod
    def load(cls, path):
        header, arrays = binfmt.read(path)
        if header.get("kind") != "posterior_model":
            raise DataError(f"{path} is not a model checkpoint")
        return cls(
            weight_ensemble=Ensemble(arrays["members"]),
            shape=LstmShape.from_dict(header["shape"]),
            sigma_eps=header["sigma_eps"],
            config=TrainingConfig.from_dict(header["config"]),
            step=header["ensemble"]["step"],
        )


@dataclass(frozen=True)
class PredictiveDistribution:
    samples: np.ndarray  # (N, q)
    mean: np.ndarray     # (q,)
    cov: np.ndarray      # (q, q), ensemble covariance + sigma_eps I


def make_samples(windows, sequence_len):
    """Stride-1 sliding (input sequence, next window) pairs."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 2:
        raise ShapeError("windows must be a (T, d) array")
    T = windows.shape[0]
    if T < sequence_len + 1:
        raise DataError(f"need at least {sequence_len + 1} windows, got {T}")
    return [SamplePair(windows[i:i + sequence_len], windows[i + sequence_len])
            for i in range(T - sequence_len)]


def stack_samples(samples):
    if len(samples) == 0:
        raise DataError("no training samples")
    X = np.stack([np.asarray(s.x, dtype=np.float64) for s in samples])
    Y = np.stack([np.asarray(s.y, dtype=np.float64) for s in samples])
    if X.ndim != 3 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError("samples must share one (sequence_len, d) input and (q,) target shape")
    return X, Y


def estimate_noise_variance(targets, member_outputs):
    """Closed-form maximiser of the Jensen lower bound on the log-evidence.

    Parameters
    ----------
    targets : array_like, shape (M, q)
    member_outputs : array_like, shape (N, M, q)
        ``member_outputs[i, j]`` is member i's prediction for target j.
    """
    Y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    F = np.asarray(member_outputs, dtype=np.float64)
    if F.ndim == 2:
        F = F[:, None, :] if Y.shape[0] == 1 else F[:, :, None]
    if F.ndim != 3 or F.shape[1:] != Y.shape:
        raise ShapeError(f"member outputs {F.shape} do not match targets {Y.shape}")
    if Y.shape[0] < 1 or F.shape[0] < 1:
        raise DataError("need at least one target and one member")
    value = float(np.mean((F - Y[None]) ** 2))
    if value <= 0.0:
        warnings.warn("all residuals are zero; noise variance set to the floor", RuntimeWarning)
        return NOISE_FLOOR
    return value


def jensen_lower_bound(targets, member_outputs, sigma2):
    """The lower bound whose maximiser is :func:`estimate_noise_variance`."""
    Y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    F = np.asarray(member_outputs, dtype=np.float64)
    M, q = Y.shape
    N = F.shape[0]
    ssr = float(np.sum((F - Y[None]) ** 2))
    return (-0.5 * q * M * math.log(2 * math.pi) - 0.5 * q * M * math.log(sigma2)
            - ssr / (2.0 * N * sigma2))


def _rng(seed, stream, index=0):
    return np.random.default_rng([int(seed), stream, int(index)])


def _assimilate(weights, shape, X, Y, sigma2, config, first_step, executor, mle_iter):
    """One pass over (X, Y) in consecutive batches; returns the final weights
    and the per-batch log."""
    s = config.batch_size
    q = shape.output_dim
    log = []
    M = X.shape[0]
    for b, start in enumerate(range(0, M, s)):
        step = first_step + b
        Xb, Yb = X[start:start + s], Y[start:start + s]
        F = forward_ensemble(weights, shape, Xb, executor=executor)  # (N, s', q)
        if not np.all(np.isfinite(F)):
            raise NumericalError(f"non-finite member outputs in batch {step}",
                                 context={"batch": step})
        n_obs = Yb.shape[0] * q
        U = Ensemble(np.concatenate([F.reshape(F.shape[0], n_obs), weights], axis=1))
        obs = Yb.reshape(n_obs)
        try:
            post = analysis_update(U, obs, ObservationModel(n_obs, sigma2, config.noise_estimator),
                                   _rng(config.seed, _PERTURB_STREAM, step))
        except NumericalError as exc:
            exc.context["batch"] = step
            raise NumericalError(f"batch {step}: {exc}", exc.condition, exc.context) from exc
        weights = post.members[:, n_obs:]
        innov = obs - F.reshape(F.shape[0], n_obs).mean(axis=0)
        log.append({
            "mle_iter": mle_iter,
            "batch": step,
            "n_samples": int(Yb.shape[0]),
            "obs_dim": int(n_obs),
            "sigma_eps": float(sigma2),
            "innovation_norm": float(np.linalg.norm(innov)),
            "lower_bound": jensen_lower_bound(Yb, F, sigma2),
        })
    return weights, log


def train(samples, config=None, resume=None, executor=None):
    """Infer a weight-ensemble posterior from training samples.

    Parameters
    ----------
    samples : sequence of SamplePair
        In temporal order; batches are consecutive slices of ``batch_size``.
        A trailing short batch is assimilated with its reduced size.
    config : TrainingConfig
    resume : PosteriorModel, optional
        Continue assimilating from this posterior with its noise variance.
        Batch numbering continues from ``resume.step``; the noise MLE (which
        restarts from the prior) is not rerun.
    executor : concurrent.futures.Executor, optional
        Used for member propagation only; results do not depend on it.

    Returns
    -------
    PosteriorModel
    """
    config = config or TrainingConfig()
    X, Y = stack_samples(samples)
    if X.shape[1] != config.sequence_len:
        raise ShapeError(f"samples have length {X.shape[1]}, config says {config.sequence_len}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise DataError("training samples contain non-finite values")

    if resume is not None:
        shape = resume.shape
        if (shape.input_dim, shape.output_dim) != (X.shape[2], Y.shape[1]):
            raise ShapeError("resume model dimensions do not match the samples")
        weights, log = _assimilate(resume.weight_ensemble.members, shape, X, Y,
                                   resume.sigma_eps, config, resume.step, executor, 0)
        return PosteriorModel(Ensemble(weights), shape, resume.sigma_eps, config,
                              step=resume.step + len(log),
                              training_log=list(resume.training_log) + log)

    shape = LstmShape(X.shape[2], config.hidden_dim, Y.shape[1])
    prior = sample_prior(shape.weight_count, config.sigma_w, config.n_members,
                         _rng(config.seed, _PRIOR_STREAM)).members
    sigma2 = float(config.sigma_eps_init)
    full_log = []
    n_iter = config.mle_max_iter if config.mle_enabled else 1
    for it in range(n_iter):
        weights, log = _assimilate(prior, shape, X, Y, sigma2, config, 0, executor, it)
        full_log.extend(log)
        if not config.mle_enabled:
            break
        F = forward_ensemble(weights, shape, X, executor=executor)
        new = estimate_noise_variance(Y, F)
        logger.info("noise MLE iteration %d: sigma_eps %.6g -> %.6g", it, sigma2, new)
        full_log.append({"mle_iter": it, "sigma_eps_used": sigma2, "sigma_eps_mle": new})
        converged = abs(new - sigma2) < config.mle_rtol * sigma2
        sigma2 = new
        if converged:
            break
    return PosteriorModel(Ensemble(weights), shape, sigma2, config,
                          step=len(log), training_log=full_log)


def predict_many(model, X, executor=None):
    """Predictive samples, means and covariances for a stack of inputs.

    Returns ``(samples (n, N, q), means (n, q), covs (n, q, q))``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != model.shape.input_dim:
        raise ShapeError(f"inputs must be (n, length, {model.shape.input_dim}), got {X.shape}")
    F = forward_ensemble(model.weight_ensemble.members, model.shape, X, executor=executor)
    samples = F.transpose(1, 0, 2)
    means = samples.mean(axis=1)
    A = samples - means[:, None, :]
    covs = np.einsum("nik,nil->nkl", A, A) / (samples.shape[1] - 1)
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    covs = covs + model.sigma_eps * np.eye(model.shape.output_dim)
    return samples, means, covs


def predict(model, x_star, executor=None):
    """Predictive distribution of the next window given ``x_star``
    (sequence_len x d)."""
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_star.ndim != 2:
        raise ShapeError("x_star must be a (sequence_len, d) matrix")
    samples, means, covs = predict_many(model, x_star[None], executor=executor)
    return PredictiveDistribution(samples[0], means[0], covs[0])


def predictive_from_samples(samples, sigma_eps):
    """Moments of given output samples plus the observation-noise term."""
    ens = Ensemble(np.atleast_2d(np.asarray(samples, dtype=np.float64)).reshape(len(samples), -1))
    mean, cov = ensemble_moments(ens)
    return PredictiveDistribution(ens.members.copy(), mean, cov + sigma_eps * np.eye(mean.size))
