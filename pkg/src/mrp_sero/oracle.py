"""Brute-force reference computations for checking the model and sampler.

These deliberately avoid the machinery they are meant to check: conjugate
closed forms, dense grids with trapezoid quadrature, and central finite
differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy.integrate import trapezoid

from .domain import PriorStudy

DEFAULT_POINTS = 2001
EDGE_MASS_LIMIT = 0.01


def conjugate_beta_posterior(studies: Sequence[PriorStudy], prior_a: float = 1.0,
                             prior_b: float = 1.0) -> tuple[float, float]:
    """Beta posterior parameters for a probability observed through binomial studies."""
    if not (prior_a > 0 and prior_b > 0):
        raise ValueError("beta prior parameters must be positive")
    pos = sum(s.positives for s in studies)
    neg = sum(s.total - s.positives for s in studies)
    return prior_a + pos, prior_b + neg


def beta_moments(a: float, b: float) -> tuple[float, float]:
    mean = a / (a + b)
    var = a * b / ((a + b) ** 2 * (a + b + 1))
    return mean, float(np.sqrt(var))


@dataclass(frozen=True)
class Grid1D:
    lower: float
    upper: float
    points: int = DEFAULT_POINTS

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)) or self.upper <= self.lower:
            raise ValueError("grid bounds must be finite with lower < upper")
        if self.points < 5:
            raise ValueError("grid needs at least 5 points")

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(self.lower, self.upper, self.points)]


@dataclass(frozen=True)
class Grid2D:
    bounds: tuple[tuple[float, float], tuple[float, float]]
    points: int = DEFAULT_POINTS

    def __post_init__(self):
        for lo, hi in self.bounds:
            Grid1D(lo, hi, self.points)

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, self.points) for lo, hi in self.bounds]


@dataclass(frozen=True)
class GridMoments:
    mean: np.ndarray
    sd: np.ndarray
    log_density: np.ndarray  # on the grid, unnormalized


def _evaluate(logpost: Callable, grid: Union[Grid1D, Grid2D]) -> np.ndarray:
    axes = grid.axes
    if len(axes) == 1:
        return np.array([_scalar(logpost(np.array([t]))) for t in axes[0]])
    a, b = axes
    out = np.empty((a.size, b.size))
    for i, s in enumerate(a):
        for j, t in enumerate(b):
            out[i, j] = _scalar(logpost(np.array([s, t])))
    return out


def _scalar(v) -> float:
    # accept either a log density or a (log density, gradient) pair
    if isinstance(v, tuple):
        v = v[0]
    v = np.asarray(v, dtype=float)
    if v.size != 1:
        raise ValueError(f"log density must be a scalar, got shape {v.shape}")
    v = float(v.reshape(()))
    return -np.inf if np.isnan(v) else v


def _edge_mass(w: np.ndarray, axis: int) -> float:
    w = np.moveaxis(w, axis, 0)
    return float((w[:2].sum() + w[-2:].sum()) / w.sum())


def grid_posterior_moments(logpost: Callable, grid: Union[Grid1D, Grid2D],
                           log_density: np.ndarray | None = None) -> GridMoments:
    """Posterior mean and SD per axis by trapezoid quadrature on ``grid``.

    ``logpost`` maps a parameter vector to a log density (or to a
    ``(log density, gradient)`` pair).  Raises if the density is nowhere
    finite or if more than 1% of the mass lies in the two outermost points at
    either end of an axis, which means the bounds cut off the posterior.
    """
    lp = _evaluate(logpost, grid) if log_density is None else np.asarray(log_density, dtype=float)
    if not np.any(np.isfinite(lp)):
        raise ValueError("log density is -inf everywhere on the grid")
    w = np.exp(lp - np.max(lp[np.isfinite(lp)]))
    w[~np.isfinite(lp)] = 0.0
    axes = grid.axes
    for k in range(len(axes)):
        if _edge_mass(w, k) > EDGE_MASS_LIMIT:
            raise ValueError(f"more than {EDGE_MASS_LIMIT:.0%} of the mass is at the edge of axis {k}; widen the bounds")

    def integrate(f):
        out = f
        for k in reversed(range(len(axes))):
            out = trapezoid(out, axes[k], axis=k)
        return float(out)

    z = integrate(w)
    means, sds = [], []
    for k, ax in enumerate(axes):
        shape = [1] * len(axes)
        shape[k] = ax.size
        t = ax.reshape(shape)
        m = integrate(w * t) / z
        v = integrate(w * (t - m) ** 2) / z
        means.append(m)
        sds.append(np.sqrt(max(v, 0.0)))
    return GridMoments(np.array(means), np.array(sds), lp)


def normalized_weights(grid: Union[Grid1D, Grid2D], log_density: np.ndarray) -> np.ndarray:
    """Trapezoid quadrature weights times density, summing to 1."""
    axes = grid.axes
    w = np.exp(log_density - np.max(log_density[np.isfinite(log_density)]))
    w[~np.isfinite(log_density)] = 0.0
    for k, ax in enumerate(axes):
        tw = np.full(ax.size, ax[1] - ax[0])
        tw[[0, -1]] *= 0.5
        shape = [1] * len(axes)
        shape[k] = ax.size
        w = w * tw.reshape(shape)
    return w / w.sum()


def finite_diff_gradient(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        hi, lo = _scalar(f(x + e)), _scalar(f(x - e))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"non-finite value within h={h} of x along coordinate {i}")
        g[i] = (hi - lo) / (2 * h)
    return g


def relative_error(analytic, numeric) -> np.ndarray:
    """Elementwise |a - n| / max(1, |a|)."""
    a = np.asarray(analytic, dtype=float)
    return np.abs(a - np.asarray(numeric, dtype=float)) / np.maximum(1.0, np.abs(a))
