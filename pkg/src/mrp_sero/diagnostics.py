"""Rank-normalized split-R-hat and bulk effective sample size.

Follows Vehtari, Gelman, Simpson, Carpenter & Burkner (2021).  Parameters
whose draws have zero within-chain variance are reported as degenerate with
NaN statistics instead of a misleading R-hat of 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

MIN_CHAINS = 2
MIN_DRAWS = 100


@dataclass
class Diagnostics:
    names: list[str]
    rhat: np.ndarray
    ess_bulk: np.ndarray
    degenerate: np.ndarray
    divergences: int
    n_draws: int

    def worst_rhat(self) -> float:
        ok = ~self.degenerate
        return float(np.max(self.rhat[ok])) if ok.any() else float("nan")

    def failures(self, max_rhat=1.05, max_divergence_frac=0.01) -> list[str]:
        """Human-readable reasons the fit should not be trusted (empty if healthy)."""
        out = []
        for name, r, deg in zip(self.names, self.rhat, self.degenerate):
            if deg:
                out.append(f"{name}: degenerate chains (zero variance)")
            elif r > max_rhat:
                out.append(f"{name}: rhat {r:.3f} > {max_rhat}")
        if self.divergences > max_divergence_frac * self.n_draws:
            out.append(f"{self.divergences} divergent transitions (> {max_divergence_frac:.1%} of {self.n_draws})")
        return out

    def to_dict(self) -> dict:
        return {
            "divergences": int(self.divergences),
            "n_draws": int(self.n_draws),
            "parameters": [
                {
                    "name": n,
                    "rhat": None if d else float(r),
                    "ess_bulk": None if d else float(e),
                    "degenerate": bool(d),
                }
                for n, r, e, d in zip(self.names, self.rhat, self.ess_bulk, self.degenerate)
            ],
        }


def _split(x: np.ndarray) -> np.ndarray:
    """(chains, draws) -> (2 * chains, draws // 2), dropping a middle draw if odd."""
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, -n:]], axis=0)


def _z_scale(x: np.ndarray) -> np.ndarray:
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return stats.norm.ppf((r - 0.375) / (x.size + 0.25))


def _rhat(x: np.ndarray) -> float:
    m, n = x.shape
    w = x.var(axis=1, ddof=1).mean()
    b = n * x.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[-1]
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, size)
    ac = np.fft.irfft(f * np.conj(f), size)[..., :n]
    return ac / n


def _ess(x: np.ndarray) -> float:
    """ESS of (chains, draws) using Geyer's initial monotone sequence."""
    m, n = x.shape
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum consecutive pairs while positive, then enforce monotonicity
    t = 0
    pair_sums = []
    while t + 1 < n:
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        pair_sums.append(s)
        t += 2
    pair_sums = np.minimum.accumulate(np.array(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * pair_sums.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def split_rhat(x: np.ndarray) -> float:
    """Rank-normalized split R-hat (max of bulk and folded/tail versions)."""
    x = np.asarray(x, dtype=float)
    s = _split(x)
    if np.any(s.var(axis=1) == 0):
        return float("nan")
    bulk = _rhat(_z_scale(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat(_z_scale(folded)) if np.all(folded.var(axis=1) > 0) else bulk
    return max(bulk, tail)


def ess_bulk(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    s = _split(x)
    if np.any(s.var(axis=1) == 0):
        return float("nan")
    return _ess(_z_scale(s))


def diagnostics(draws) -> Diagnostics:
    """Per-parameter R-hat / bulk ESS for a :class:`~mrp_sero.sampler.Draws`."""
    vals = draws.values
    c, n, d = vals.shape
    if c < MIN_CHAINS or n < MIN_DRAWS:
        raise ValueError(f"diagnostics need >= {MIN_CHAINS} chains of >= {MIN_DRAWS} draws, got {c} x {n}")
    rhat = np.empty(d)
    ess = np.empty(d)
    for j in range(d):
        rhat[j] = split_rhat(vals[:, :, j])
        ess[j] = ess_bulk(vals[:, :, j])
    degenerate = np.isnan(rhat)
    return Diagnostics(list(draws.names), rhat, ess, degenerate, int(draws.divergent.sum()), c * n)
