"""Two-component 1D Gaussian mixture on QC scores and the rejection threshold.

The lower-mean component models misaligned pairs. Scores at or below the
90th percentile of that component are rejected.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .synth_qc import QcScoreSet

__all__ = [
    "Z90",
    "DegenerateScoresError",
    "GmmFit",
    "fit_gmm2",
    "rejection_threshold",
    "classify_scores",
    "histogram",
]

# 90th percentile of the standard normal
Z90 = 1.2815515655446004

MIN_SCORES = 8
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DegenerateScoresError(ValueError):
    pass


@dataclass(frozen=True)
class GmmFit:
    phi: tuple[float, float]
    mu: tuple[float, float]
    sigma: tuple[float, float]
    log_likelihood: float
    iterations: int
    threshold: float
    converged: bool = True
    sigma_floor: float = 0.0
    ll_history: tuple[float, ...] = ()

    def to_json(self) -> dict:
        d = asdict(self)
        d["phi"] = list(self.phi)
        d["mu"] = list(self.mu)
        d["sigma"] = list(self.sigma)
        del d["ll_history"]
        return d


def _log_joint(x, phi, mu, sigma):
    # shape (2, n): log phi_k + log N(x | mu_k, sigma_k)
    z = (x[None, :] - mu[:, None]) / sigma[:, None]
    return np.log(phi)[:, None] - np.log(sigma)[:, None] - _LOG_SQRT_2PI - 0.5 * z * z


def _loglik_and_resp(x, phi, mu, sigma):
    lj = _log_joint(x, phi, mu, sigma)
    m = lj.max(axis=0)
    lse = m + np.log(np.exp(lj[0] - m) + np.exp(lj[1] - m))
    return float(lse.sum()), np.exp(lj - lse[None, :])


def _as_array(scores) -> np.ndarray:
    if isinstance(scores, QcScoreSet):
        return scores.scores
    return np.asarray(scores, dtype=np.float64).ravel()


def fit_gmm2(scores, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0) -> GmmFit:
    """EM fit of a two-component Gaussian mixture to 1D scores.

    Parameters
    ----------
    scores : QcScoreSet or array-like
        Only successfully scored subjects of a ``QcScoreSet`` are used.
    tol : float
        Stop once the log-likelihood gain of an iteration drops below this.
    max_iter : int
        Hard cap on EM iterations.
    seed : int
        Recorded for provenance. The initialisation (means at the 25th/75th
        percentiles, spread at half the sample std, equal weights) is
        deterministic, so the fit does not depend on it.

    Returns
    -------
    GmmFit
        Components ordered so that ``mu[0] <= mu[1]``.
    """
    x = _as_array(scores)
    n = x.size
    if n < MIN_SCORES:
        raise ValueError(f"need at least {MIN_SCORES} scores, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("scores must be finite")
    sd = float(np.std(x, ddof=1))
    if np.all(x == x[0]) or sd < 1e-12:
        raise DegenerateScoresError("degenerate: zero variance")

    floor = 1e-6 * float(x.max() - x.min())
    mu = np.percentile(x, [25.0, 75.0])
    if mu[0] == mu[1]:
        # most scores identical: split around the mean instead
        mean = float(x.mean())
        mu = np.array([mean - 0.5 * sd, mean + 0.5 * sd])
    sigma = np.full(2, max(0.5 * sd, floor))
    phi = np.array([0.5, 0.5])

    ll, resp = _loglik_and_resp(x, phi, mu, sigma)
    history = [ll]
    converged = False
    it = 0
    while it < max_iter:
        nk = resp.sum(axis=1)
        live = nk > 0
        new_mu = mu.copy()
        new_sigma = sigma.copy()
        new_mu[live] = (resp[live] @ x) / nk[live]
        for k in np.flatnonzero(live):
            d = x - new_mu[k]
            new_sigma[k] = max(math.sqrt(float(resp[k] @ (d * d)) / nk[k]), floor)
        new_phi = np.clip(nk / n, 1e-300, None)
        new_phi /= new_phi.sum()
        mu, sigma, phi = new_mu, new_sigma, new_phi
        it += 1
        new_ll, resp = _loglik_and_resp(x, phi, mu, sigma)
        history.append(new_ll)
        gain = new_ll - ll
        ll = new_ll
        if gain < tol:
            converged = True
            break

    if mu[0] > mu[1]:
        mu, sigma, phi = mu[::-1], sigma[::-1], phi[::-1]
    phi0 = float(phi[0])
    fit = GmmFit(
        phi=(phi0, 1.0 - phi0),
        mu=(float(mu[0]), float(mu[1])),
        sigma=(float(sigma[0]), float(sigma[1])),
        log_likelihood=ll,
        iterations=it,
        threshold=float(mu[0]) + Z90 * float(sigma[0]),
        converged=converged,
        sigma_floor=floor,
        ll_history=tuple(history),
    )
    return fit


def rejection_threshold(fit: GmmFit) -> float:
    """``mu_low + z_0.9 * sigma_low`` of the lower-mean component."""
    k = 0 if fit.mu[0] <= fit.mu[1] else 1
    return fit.mu[k] + Z90 * fit.sigma[k]


def classify_scores(scores, threshold: float) -> list[tuple[str, bool]]:
    """Pass iff score > threshold; ties are rejected. Input order kept."""
    if isinstance(scores, QcScoreSet):
        entries = scores.entries
    else:
        entries = list(scores)
    return [(sid, bool(s > threshold)) for sid, s in entries]


def histogram(scores, bin_width: float = 0.01) -> list[tuple[float, int]]:
    """``(bin_left, count)`` rows with ``ceil(range / bin_width)`` bins.

    Bins are half-open ``[left, left + width)`` except the last, which also
    holds the maximum.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    x = _as_array(scores)
    if x.size == 0:
        return []
    lo = float(x.min())
    n_bins = max(1, math.ceil((float(x.max()) - lo) / bin_width))
    idx = np.clip(np.floor((x - lo) / bin_width).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return [(lo + i * bin_width, int(c)) for i, c in enumerate(counts)]
