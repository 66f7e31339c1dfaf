"""Full-covariance Gaussian mixture fitted by EM, seeded with K-Means++.

Densities are evaluated in log space through a Cholesky factor of each
covariance; the factor serves both the Mahalanobis solve and the
log-determinant.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .rng import derive_rng

log = logging.getLogger(__name__)

MAGIC = b"GMM1"
LOG_2PI = np.log(2.0 * np.pi)


class SingularCovarianceError(ArithmeticError):
    def __init__(self, component: int, iteration: int | None = None):
        where = f" at EM iteration {iteration}" if iteration is not None else ""
        super().__init__(f"covariance of component {component} is not positive definite{where}")
        self.component = component
        self.iteration = iteration


class DegenerateComponentError(ArithmeticError):
    def __init__(self, component: int, mass: float, iteration: int | None = None):
        where = f" at EM iteration {iteration}" if iteration is not None else ""
        super().__init__(f"component {component} has total responsibility {mass:.3g}{where}")
        self.component = component
        self.mass = mass
        self.iteration = iteration


class GmmFormatError(ValueError):
    pass


@dataclass
class GmmModel:
    phi: np.ndarray  # (k,)
    mu: np.ndarray  # (k, d)
    sigma: np.ndarray  # (k, d, d)

    @property
    def k(self) -> int:
        return self.phi.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    def cholesky(self) -> np.ndarray:
        chol = np.empty_like(self.sigma)
        for j in range(self.k):
            try:
                chol[j] = np.linalg.cholesky(self.sigma[j])
            except np.linalg.LinAlgError:
                raise SingularCovarianceError(j) from None
        return chol


@dataclass
class EmConfig:
    k: int = 15
    epsilon: float = 1e-6
    max_iters: int = 500
    cov_reg: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.cov_reg < 0:
            raise ValueError(f"cov_reg must be non-negative, got {self.cov_reg}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be non-negative, got {self.max_iters}")


def _as_samples(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2:
        raise ValueError(f"samples must be an (n, d) array, got shape {Z.shape}")
    return Z


def component_log_density(m: GmmModel, Z) -> np.ndarray:
    """(n, k) matrix of log(phi_j) + log N(z_i; mu_j, Sigma_j)."""
    Z = _as_samples(Z)
    if Z.shape[1] != m.d:
        raise ValueError(f"sample dim {Z.shape[1]} does not match model dim {m.d}")
    chol = m.cholesky()
    out = np.empty((Z.shape[0], m.k))
    with np.errstate(divide="ignore"):
        log_phi = np.log(m.phi)
    for j in range(m.k):
        diag = np.diag(chol[j])
        if not np.all(diag > 0):
            raise SingularCovarianceError(j)
        sol = solve_triangular(chol[j], (Z - m.mu[j]).T, lower=True, check_finite=False)
        maha = np.sum(sol * sol, axis=0)
        log_det = 2.0 * np.sum(np.log(diag))
        out[:, j] = log_phi[j] - 0.5 * (m.d * LOG_2PI + log_det + maha)
    return out


def e_step(m: GmmModel, Z) -> np.ndarray:
    """Posterior responsibilities, shape (n, k); each row sums to one."""
    lp = component_log_density(m, Z)
    return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))


def sample_log_likelihoods(m: GmmModel, Z) -> np.ndarray:
    return logsumexp(component_log_density(m, Z), axis=1)


def sample_log_likelihood(m: GmmModel, z) -> float:
    """log of the mixture density at a single point ``z``."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    return float(sample_log_likelihoods(m, z)[0])


def total_log_likelihood(m: GmmModel, Z) -> float:
    # np.sum reduces pairwise, so the order of accumulation is fixed
    return float(np.sum(sample_log_likelihoods(m, Z)))


def _symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def m_step(Z, r, cov_reg: float = 1e-6) -> GmmModel:
    Z = _as_samples(Z)
    r = np.asarray(r, dtype=np.float64)
    n, d = Z.shape
    if r.ndim != 2 or r.shape[0] != n:
        raise ValueError(f"responsibilities of shape {r.shape} do not match {n} samples")
    mass = r.sum(axis=0)
    for j, nj in enumerate(mass):
        if nj < 1e-12:
            raise DegenerateComponentError(j, float(nj))
    phi = mass / n
    mu = (r.T @ Z) / mass[:, None]
    sigma = np.empty((r.shape[1], d, d))
    for j in range(r.shape[1]):
        diff = Z - mu[j]
        sigma[j] = (r[:, j, None] * diff).T @ diff / mass[j]
    sigma = _symmetrize(sigma) + cov_reg * np.eye(d)
    return GmmModel(phi, mu, sigma)


def _kmeanspp_seeds(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = Z.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((Z - Z[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a chosen centre
            taken = set(chosen)
            idx = next(i for i in range(n) if i not in taken)
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((Z - Z[idx]) ** 2, axis=1))
    return Z[chosen].copy()


def _sq_dist(Z: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.sum((Z[:, None, :] - C[None, :, :]) ** 2, axis=2)


def kmeans(Z, k: int, seed: int = 0, max_iters: int = 100):
    """K-Means++ seeding followed by Lloyd iterations.

    Returns ``(centroids, labels)``. A cluster that empties is reseeded with the
    point farthest from its own centroid (lowest index on ties).
    """
    Z = _as_samples(Z)
    n = Z.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    rng = derive_rng(seed, "gmm/kmeans++")
    C = _kmeanspp_seeds(Z, k, rng)
    labels = _repair_empty(Z, C, np.argmin(_sq_dist(Z, C), axis=1), k)
    for _ in range(max_iters):
        for j in range(k):
            members = labels == j
            if members.any():
                C[j] = Z[members].mean(axis=0)
        new = np.argmin(_sq_dist(Z, C), axis=1)
        new = _repair_empty(Z, C, new, k)
        if np.array_equal(new, labels):
            break
        labels = new
    return C, labels


def _repair_empty(Z, C, labels, k):
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        own = np.sum((Z - C[labels]) ** 2, axis=1)
        # only steal from clusters that keep at least one member
        own[counts[labels] <= 1] = -1.0
        far = int(np.argmax(own))
        counts[labels[far]] -= 1
        labels[far] = j
        counts[j] = 1
        C[j] = Z[far]
    return labels


def model_from_partition(Z, labels, k: int, cov_reg: float = 1e-6) -> GmmModel:
    """Blob weights, means and biased covariances of a hard partition."""
    Z = _as_samples(Z)
    n, d = Z.shape
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("every cluster needs at least one member")
    phi = counts / n
    mu = np.zeros((k, d))
    sigma = np.zeros((k, d, d))
    for j in range(k):
        zj = Z[labels == j]
        mu[j] = zj.mean(axis=0)
        diff = zj - mu[j]
        sigma[j] = diff.T @ diff / counts[j]
    return GmmModel(phi, mu, _symmetrize(sigma) + cov_reg * np.eye(d))


def kmeanspp_init(Z, k: int, seed: int = 0, cov_reg: float = 1e-6) -> GmmModel:
    Z = _as_samples(Z)
    _, labels = kmeans(Z, k, seed)
    return model_from_partition(Z, labels, k, cov_reg)


def fit(Z, cfg: EmConfig):
    """EM from a K-Means++ start.

    Stops once an iteration raises the total log-likelihood by less than
    ``cfg.epsilon`` (a decrease also stops it) or after ``cfg.max_iters``
    iterations. Returns ``(model, history)`` with the total log-likelihood of
    the initial model followed by one entry per iteration.
    """
    Z = _as_samples(Z)
    if Z.shape[0] < cfg.k:
        raise ValueError(f"need at least k={cfg.k} samples, got {Z.shape[0]}")
    model = kmeanspp_init(Z, cfg.k, cfg.seed, cfg.cov_reg)
    # one density evaluation per iteration serves both the stopping test and
    # the next E-step
    lp = component_log_density(model, Z)
    ll = logsumexp(lp, axis=1)
    current = float(np.sum(ll))
    history = [current]
    for it in range(1, cfg.max_iters + 1):
        try:
            model = m_step(Z, np.exp(lp - ll[:, None]), cfg.cov_reg)
            lp = component_log_density(model, Z)
        except SingularCovarianceError as exc:
            raise SingularCovarianceError(exc.component, it) from None
        except DegenerateComponentError as exc:
            raise DegenerateComponentError(exc.component, exc.mass, it) from None
        ll = logsumexp(lp, axis=1)
        updated = float(np.sum(ll))
        history.append(updated)
        log.debug("EM iteration %d: L=%.10g", it, updated)
        if updated - current < cfg.epsilon:
            break
        current = updated
    return model, history


def save_gmm(m: GmmModel, path) -> None:
    parts = [
        MAGIC,
        struct.pack("<II", m.k, m.d),
        np.ascontiguousarray(m.phi, dtype="<f8").tobytes(),
        np.ascontiguousarray(m.mu, dtype="<f8").tobytes(),
        np.ascontiguousarray(m.sigma, dtype="<f8").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_gmm(path) -> GmmModel:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise GmmFormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise GmmFormatError(f"{path}: truncated header")
    k, d = struct.unpack_from("<II", buf, 4)
    expected = 12 + 8 * (k + k * d + k * d * d)
    if len(buf) != expected:
        raise GmmFormatError(f"{path}: expected {expected} bytes for k={k}, d={d}, got {len(buf)}")
    vals = np.frombuffer(buf, dtype="<f8", offset=12).astype(np.float64)
    phi = vals[:k]
    mu = vals[k:k + k * d].reshape(k, d)
    sigma = vals[k + k * d:].reshape(k, d, d)
    return GmmModel(phi.copy(), mu.copy(), sigma.copy())
