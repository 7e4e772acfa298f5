"""
engines/quality_oracle.py — QLIP Lab
Quality scoring of generated samples against reference data.

Two scorers share one interface and one normalisation:
  gmm      log-likelihood under a Gaussian mixture fitted by EM (default)
  realism  k-NN realism score: max over reference points of r_k(φ) / ‖x − φ‖,
           with r_k the distance from φ to its k-th nearest reference neighbour

The raw score is mapped to [0, 1] with the 1st / 99th percentiles of the
reference set's own raw scores, then clamped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from engines.rng import stream
from errors import ContractViolation, NumericFailure

logger = logging.getLogger(__name__)

SCORERS = ("gmm", "realism")
NORMALISATION_PERCENTILES = (1.0, 99.0)
EM_MAX_ITER = 200
EM_TOL = 1e-9
EM_MAX_RETRIES = 3
COV_REG = 1e-6
REALISM_K = 3


@dataclass
class QualityOracle:
    kind: str
    lo: float
    hi: float
    weights: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    covariances: Optional[np.ndarray] = None
    reference: Optional[np.ndarray] = None
    radii: Optional[np.ndarray] = None
    n_iter: int = 0
    _chol: list = field(default_factory=list, repr=False, compare=False)

    def raw_score(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == "gmm":
            if not self._chol:
                self._chol = [cholesky(c, lower=True) for c in self.covariances]
            return logsumexp(_component_log_prob(x, self.weights, self.means, self._chol), axis=1)
        return np.log(_realism(x, self.reference, self.radii))

    def to_records(self) -> dict:
        records = {
            "oracle/kind": np.array(SCORERS.index(self.kind), dtype=np.int32),
            "oracle/bounds": np.array([self.lo, self.hi], dtype=np.float64),
        }
        if self.kind == "gmm":
            records["oracle/weights"] = self.weights
            records["oracle/means"] = self.means
            records["oracle/covariances"] = self.covariances
        else:
            records["oracle/reference"] = self.reference
            records["oracle/radii"] = self.radii
        return records

    @classmethod
    def from_records(cls, records: dict) -> "QualityOracle":
        kind = SCORERS[int(records["oracle/kind"])]
        lo, hi = (float(v) for v in records["oracle/bounds"])
        if kind == "gmm":
            return cls(
                kind, lo, hi,
                weights=records["oracle/weights"],
                means=records["oracle/means"],
                covariances=records["oracle/covariances"],
            )
        return cls(kind, lo, hi, reference=records["oracle/reference"], radii=records["oracle/radii"])


# ── GMM ───────────────────────────────────────────────────────────────────────

def _component_log_prob(x, weights, means, chols) -> np.ndarray:
    """(N, K) array of log(w_k · N(x | μ_k, Σ_k))."""
    n, d = x.shape
    out = np.empty((n, len(weights)))
    for k, (mu, lower) in enumerate(zip(means, chols)):
        sol = solve_triangular(lower, (x - mu).T, lower=True)
        out[:, k] = (
            np.log(weights[k])
            - 0.5 * d * np.log(2.0 * np.pi)
            - np.sum(np.log(np.diag(lower)))
            - 0.5 * np.sum(sol ** 2, axis=0)
        )
    return out


class _Degenerate(Exception):
    pass


def _em(x: np.ndarray, n_components: int, rng: np.random.Generator, jitter: float):
    n, d = x.shape
    means = x[rng.choice(n, size=n_components, replace=False)].copy()
    if jitter:
        means += jitter * x.std(axis=0) * rng.standard_normal(means.shape)
    base_cov = np.cov(x, rowvar=False).reshape(d, d) + COV_REG * np.eye(d)
    covs = np.repeat(base_cov[None], n_components, axis=0)
    weights = np.full(n_components, 1.0 / n_components)

    prev = -np.inf
    for it in range(1, EM_MAX_ITER + 1):
        try:
            chols = [cholesky(c, lower=True) for c in covs]
        except LinAlgError as exc:
            raise _Degenerate(f"covariance lost positive definiteness at iteration {it}") from exc
        log_prob = _component_log_prob(x, weights, means, chols)
        log_norm = logsumexp(log_prob, axis=1, keepdims=True)
        mean_ll = float(log_norm.mean())
        resp = np.exp(log_prob - log_norm)

        nk = resp.sum(axis=0)
        if np.any(nk < d + 1):
            raise _Degenerate(f"component collapsed (effective size {nk.min():.3g}) at iteration {it}")
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        for k in range(n_components):
            diff = x - means[k]
            covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k] + COV_REG * np.eye(d)

        if abs(mean_ll - prev) < EM_TOL * max(1.0, abs(mean_ll)):
            return weights, means, covs, it
        prev = mean_ll
    return weights, means, covs, EM_MAX_ITER


def fit_gmm(x, n_components: int, seed: int):
    """EM with seeded initialisation; a degenerate run is restarted with jittered means."""
    x = np.asarray(x, dtype=np.float64)
    for attempt in range(EM_MAX_RETRIES + 1):
        rng = stream(seed, "oracle/gmm-init", attempt)
        try:
            return _em(x, n_components, rng, jitter=0.0 if attempt == 0 else 0.05 * attempt)
        except _Degenerate as exc:
            logger.warning(f"[oracle] EM attempt {attempt + 1} degenerate: {exc}; re-initialising")
    raise NumericFailure(f"GMM fit degenerate after {EM_MAX_RETRIES} retries")


# ── Realism ───────────────────────────────────────────────────────────────────

def _knn_radii(reference: np.ndarray, k: int) -> np.ndarray:
    dist = cdist(reference, reference)
    np.fill_diagonal(dist, np.inf)
    return np.sort(dist, axis=1)[:, k - 1]


def _realism(x: np.ndarray, reference: np.ndarray, radii: np.ndarray, exclude_self: bool = False) -> np.ndarray:
    dist = cdist(x, reference)
    if exclude_self:
        np.fill_diagonal(dist, np.inf)
    dist = np.maximum(dist, 1e-12)
    return np.max(radii[None, :] / dist, axis=1)


# ── Public API ────────────────────────────────────────────────────────────────

def fit_quality_oracle(reference, n_components: int = 8, seed: int = 0, kind: str = "gmm") -> QualityOracle:
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if kind not in SCORERS:
        raise ContractViolation(f"unknown quality scorer '{kind}', expected one of {SCORERS}")
    lo_pct, hi_pct = NORMALISATION_PERCENTILES

    if kind == "gmm":
        if reference.shape[0] < 10 * n_components:
            raise ContractViolation(
                f"GMM oracle needs at least {10 * n_components} reference points, got {reference.shape[0]}"
            )
        weights, means, covs, n_iter = fit_gmm(reference, n_components, seed)
        oracle = QualityOracle("gmm", 0.0, 1.0, weights=weights, means=means, covariances=covs, n_iter=n_iter)
        raw = oracle.raw_score(reference)
        logger.info(f"[oracle] GMM with {n_components} components converged in {n_iter} iterations")
    else:
        if reference.shape[0] <= REALISM_K:
            raise ContractViolation(f"realism scorer needs more than {REALISM_K} reference points")
        radii = _knn_radii(reference, REALISM_K)
        oracle = QualityOracle("realism", 0.0, 1.0, reference=reference, radii=radii)
        raw = np.log(_realism(reference, reference, radii, exclude_self=True))

    oracle.lo = float(np.percentile(raw, lo_pct))
    oracle.hi = float(np.percentile(raw, hi_pct))
    if not oracle.hi > oracle.lo:
        raise NumericFailure(f"quality normalisation bounds collapsed ({oracle.lo}, {oracle.hi})")
    return oracle


def normalise_quality(raw, lo: float, hi: float) -> np.ndarray:
    return np.clip((np.asarray(raw, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def score_quality(oracle: QualityOracle, x) -> np.ndarray:
    """q̄ ∈ [0, 1] per row of x."""
    return normalise_quality(oracle.raw_score(x), oracle.lo, oracle.hi)
