import logging
from typing import Optional, Sequence

import numpy as np

from core.errors import DomainError
from schemas.reports import VarianceReport

logger = logging.getLogger(__name__)

NOISE_MODES = ("gaussian", "uniform")
_CHUNK = 10000


def _check_omega(omega: Sequence[float], K: int) -> np.ndarray:
    w = np.asarray(omega, dtype=np.float64)
    if w.shape != (K,):
        raise DomainError(f"omega has {w.size} weights, expected K={K}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DomainError(f"omega must be finite and non-negative: {w.tolist()}")
    if abs(float(np.sum(w)) - 1.0) > 1e-9:
        raise DomainError(f"omega must sum to 1, sums to {float(np.sum(w))!r}")
    return w


def _noise(rng: np.random.Generator, shape: tuple[int, ...], sigma2: float, mode: str) -> np.ndarray:
    if mode == "gaussian":
        return rng.standard_normal(shape) * np.sqrt(sigma2)
    a = np.sqrt(3.0 * sigma2)   # U(-a, a) has variance a^2 / 3
    return rng.uniform(-a, a, size=shape)


def verify_variance_bound(
    K: int,
    omega: Optional[Sequence[float]],
    sigma2: float,
    n_trials: int = 100000,
    seed: int = 0,
    noise: str = "gaussian",
    dim: int = 8,
) -> VarianceReport:
    """
    Monte Carlo check that a convex combination of K noisy copies of mu is
    unbiased and has per-coordinate variance at most sigma2 * sum(omega^2).
    `omega=None` means uniform weights.
    """
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}")
    if n_trials < 1000:
        raise DomainError(f"n_trials must be >= 1000, got {n_trials}")
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    if noise not in NOISE_MODES:
        raise DomainError(f"unknown noise mode {noise!r}; valid options: {', '.join(NOISE_MODES)}")
    w = np.full(K, 1.0 / K) if omega is None else _check_omega(omega, K)

    rng = np.random.default_rng(seed)
    mu = rng.standard_normal(dim)
    h = np.empty((n_trials, dim))
    for lo in range(0, n_trials, _CHUNK):
        hi = min(lo + _CHUNK, n_trials)
        eps = _noise(rng, (hi - lo, K, dim), sigma2, noise)
        h[lo:hi] = mu + np.einsum("k,nkd->nd", w, eps)

    sum_w2 = float(np.sum(w * w))
    bound = sigma2 * sum_w2
    empirical_var = float(np.mean(np.var(h, axis=0, ddof=1)))
    mean_err = float(np.max(np.abs(h.mean(axis=0) - mu)))
    var_tol = bound * (1.0 + 5.0 / np.sqrt(n_trials))
    mean_tol = 5.0 * np.sqrt(sigma2) * np.sqrt(sum_w2) / np.sqrt(n_trials)

    report = VarianceReport(
        K=K, omega=w.tolist(), sigma2=sigma2, bound=bound,
        empirical_var=empirical_var, empirical_mean_err=mean_err, n_trials=n_trials, noise=noise,
        var_tolerance=var_tol, mean_tolerance=mean_tol,
        var_pass=empirical_var <= var_tol, mean_pass=mean_err <= mean_tol,
    )
    logger.info(f"[ANALYSIS] variance check K={K} sigma2={sigma2} bound={bound:.6g} "
                f"empirical={empirical_var:.6g} passed={report.passed}")
    return report
