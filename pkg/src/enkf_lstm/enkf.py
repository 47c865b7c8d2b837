"""Stochastic (perturbed-observation) Ensemble Kalman Filter update.

The state is observed through ``H = [I_obs, 0]``, i.e. the first ``obs_dim``
coordinates of every member. Covariances are never formed in state space;
the gain is assembled from ensemble anomalies::

    A   = U - mean(U)                      (N x D)
    HA  = A[:, :obs_dim]
    PHt = A^T HA / (N - 1)                 (D x obs)
    HPHt = HA^T HA / (N - 1)               (obs x obs)
    R_e  = noise_variance * I             (noise_estimator="exact", default)
         or the sample covariance of the drawn perturbations ("sample")

and each member moves by ``PHt (HPHt + R_e)^{-1} (d_j - H u_j)`` with
``d_j = obs + eps_j``. The sample estimator has rank at most N - 1, so with
fewer members than observed coordinates it under-states the noise in most
directions and the filter over-fits; it is kept for comparison only.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import binfmt
from .errors import DataError, NumericalError, ShapeError

JITTER_START = 1e-9
JITTER_RETRIES = 3


@dataclass(frozen=True)
class Ensemble:
    """``members`` is an (N, D) array: one row per member."""

    members: np.ndarray

    def __post_init__(self):
        members = np.array(self.members, dtype=np.float64)
        if members.ndim != 2:
            raise ShapeError("ensemble members must form an (N, D) array")
        if members.shape[0] < 2:
            raise ShapeError(f"an ensemble needs at least 2 members, got {members.shape[0]}")
        if not np.all(np.isfinite(members)):
            raise DataError("ensemble contains non-finite entries")
        members.setflags(write=False)
        object.__setattr__(self, "members", members)

    @property
    def n_members(self):
        return self.members.shape[0]

    @property
    def dim(self):
        return self.members.shape[1]

    def to_bytes(self, seed=None, step=0):
        header = {"kind": "ensemble", "D": self.dim, "N": self.n_members,
                  "seed": seed, "step": int(step)}
        return binfmt.dumps(header, {"members": self.members})

    @classmethod
    def from_bytes(cls, blob):
        """Returns ``(ensemble, header)``."""
        header, arrays = binfmt.loads(blob)
        members = arrays["members"]
        if members.shape != (header["N"], header["D"]):
            raise ShapeError("ensemble header does not match payload")
        return cls(members), header


@dataclass(frozen=True)
class ObservationModel:
    obs_dim: int
    noise_variance: float
    noise_estimator: str = "exact"

    def __post_init__(self):
        if self.noise_estimator not in ("exact", "sample"):
            raise ValueError(f"noise_estimator must be 'exact' or 'sample', got {self.noise_estimator!r}")
        if int(self.obs_dim) != self.obs_dim or self.obs_dim < 1:
            raise ShapeError(f"obs_dim must be a positive integer, got {self.obs_dim!r}")
        if not (np.isfinite(self.noise_variance) and self.noise_variance > 0):
            raise ValueError(f"noise_variance must be > 0, got {self.noise_variance!r}")


def ensemble_moments(ens, coords=None):
    """Sample mean and (N-1)-normalised covariance over selected coordinates.

    ``coords`` may be a slice, an index array, or None for all coordinates.
    """
    X = ens.members if coords is None else ens.members[:, coords]
    if X.ndim == 1:
        X = X[:, None]
    mean = X.mean(axis=0)
    A = X - mean
    cov = A.T @ A / (X.shape[0] - 1)
    return mean, 0.5 * (cov + cov.T)


def sample_prior(dim, sigma_w, n, rng):
    """N i.i.d. draws from N(0, sigma_w^2 I_dim)."""
    if not (np.isfinite(sigma_w) and sigma_w > 0):
        raise ValueError(f"sigma_w must be > 0, got {sigma_w!r}")
    if n < 2:
        raise ValueError(f"need at least 2 members, got {n}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    return Ensemble(sigma_w * rng.standard_normal((n, dim)))


def _cho_factor_jittered(S):
    """Cholesky of S; on failure add growing diagonal jitter."""
    try:
        return scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    scale = np.trace(S) / S.shape[0]
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    jitter = JITTER_START * scale
    for _ in range(JITTER_RETRIES + 1):
        try:
            return scipy.linalg.cho_factor(S + jitter * np.eye(S.shape[0]), lower=True,
                                           check_finite=False)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    cond = np.linalg.cond(S) if np.all(np.isfinite(S)) else np.inf
    raise NumericalError(
        f"innovation covariance is not positive definite after jitter "
        f"(condition estimate {cond:.3e})",
        condition=float(cond),
    )


def analysis_update(ens, obs, model, rng):
    """One perturbed-observation EnKF analysis step.

    Parameters
    ----------
    ens : Ensemble
        Forecast ensemble, shape (N, D) with D >= ``model.obs_dim``.
    obs : array_like, shape (obs_dim,)
    model : ObservationModel
    rng : numpy.random.Generator
        Perturbations are drawn as one (N, obs_dim) block, i.e. member by
        member in order.

    Returns
    -------
    Ensemble
        Analysis ensemble of the same size.
    """
    obs = np.asarray(obs, dtype=np.float64)
    k = model.obs_dim
    if obs.shape != (k,):
        raise ShapeError(f"observation has shape {obs.shape}, expected ({k},)")
    if not np.all(np.isfinite(obs)):
        raise DataError("observation contains non-finite entries")
    if ens.dim < k:
        raise ShapeError(f"state dimension {ens.dim} is smaller than obs_dim {k}")

    U = ens.members
    n = U.shape[0]
    eps = np.sqrt(model.noise_variance) * rng.standard_normal((n, k))

    A = U - U.mean(axis=0)
    HA = A[:, :k]
    if not np.any(HA):
        # zero spread in the observed block: the gain is exactly zero
        return Ensemble(U)
    if model.noise_estimator == "sample":
        E = eps - eps.mean(axis=0)
        S = (HA.T @ HA + E.T @ E) / (n - 1)
    else:
        S = HA.T @ HA / (n - 1) + model.noise_variance * np.eye(k)
    S = 0.5 * (S + S.T)

    innovations = obs + eps - U[:, :k]          # (N, k)
    factor = _cho_factor_jittered(S)
    solved = scipy.linalg.cho_solve(factor, innovations.T, check_finite=False)  # (k, N)
    PHt_T = HA.T @ A / (n - 1)                  # (k, D), i.e. (Sigma H^T)^T
    updated = U + solved.T @ PHt_T
    if not np.all(np.isfinite(updated)):
        raise NumericalError("analysis produced non-finite members")
    return Ensemble(updated)
