"""Hamiltonian Monte Carlo with jittered path length, dual-averaging step size
and a diagonal mass matrix estimated during warmup.

Warmup is split into three phases: an initial 15% that only adapts the step
size, a middle 75% made of doubling windows (25, 50, 100, ...) after each of
which the inverse metric is re-estimated from the window's draws, and a final
10% that tunes the step size against the last metric.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0
INIT_RADIUS = 2.0
INIT_TRIES = 100


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    seed: int = 0
    target_accept: float = 0.8
    max_leapfrog_steps: int = 1024
    path_length: float = 2.0
    threads: int = 1

    def __post_init__(self):
        for name in ("chains", "warmup", "draws", "max_leapfrog_steps", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if not self.path_length > 0:
            raise ValueError("path_length must be positive")


@dataclass
class Draws:
    """Post-warmup draws on the constrained scale, shape (chains, draws, dim)."""

    values: np.ndarray
    names: list[str]
    accept_stat: np.ndarray
    divergent: np.ndarray
    n_leapfrog: np.ndarray
    step_size: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inv_metric: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    warmup_divergences: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("draws must be (chains, draws, dim)")
        c, n, d = self.values.shape
        if len(self.names) != d:
            raise ValueError("names do not match draw dimension")
        for arr in (self.accept_stat, self.divergent, self.n_leapfrog):
            if arr.shape != (c, n):
                raise ValueError("per-iteration statistics must be (chains, draws)")

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    @property
    def n_draws(self) -> int:
        return self.values.shape[1]

    @property
    def divergences(self) -> np.ndarray:
        return self.divergent.sum(axis=1)

    def flat(self) -> np.ndarray:
        """All draws pooled across chains, (chains * draws, dim)."""
        return self.values.reshape(-1, self.values.shape[2])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, :, self.names.index(name)]


class _DualAveraging:
    """Step-size adaptation of Hoffman & Gelman with Stan's constants."""

    def __init__(self, eps: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps: float):
        self.mu = math.log(10.0 * eps)
        self.h_bar = 0.0
        self.x_bar = 0.0
        self.m = 0

    def update(self, accept: float) -> float:
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept)
        x = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        mk = m ** (-self.kappa)
        self.x_bar = mk * x + (1.0 - mk) * self.x_bar
        return math.exp(x)

    @property
    def final(self) -> float:
        return math.exp(self.x_bar)


def _windows(warmup: int) -> tuple[int, list[int], int]:
    """Sizes of (initial, [metric windows], final) warmup phases."""
    init = int(0.15 * warmup)
    final = int(0.10 * warmup)
    middle = warmup - init - final
    sizes = []
    size, left = 25, middle
    while left > 0:
        if left < 3 * size:  # next window would not fit: absorb remainder
            sizes.append(left)
            break
        sizes.append(size)
        left -= size
        size *= 2
    return init, sizes, final


class _Chain:
    def __init__(self, f, dim, cfg: SamplerConfig, rng: np.random.Generator, init=None):
        self.f = f
        self.dim = dim
        self.cfg = cfg
        self.rng = rng
        self.inv_metric = np.ones(dim)
        self.x, self.lp, self.g = self._initial(init)

    def _eval(self, x):
        lp, g = self.f(x)
        g = np.asarray(g, dtype=float)
        if g.shape != (self.dim,):
            raise ValueError(f"gradient has shape {g.shape}, expected ({self.dim},)")
        return float(lp), g

    def _initial(self, init):
        for _ in range(INIT_TRIES):
            if init is not None:
                x = np.array(init, dtype=float)
                if x.shape != (self.dim,):
                    raise ValueError(f"initial point has shape {x.shape}, expected ({self.dim},)")
                init = None
            else:
                x = self.rng.uniform(-INIT_RADIUS, INIT_RADIUS, self.dim)
            lp, g = self._eval(x)
            if np.isfinite(lp) and np.all(np.isfinite(g)):
                return x, lp, g
        raise RuntimeError(f"log density not finite at {INIT_TRIES} random initial points")

    def _hamiltonian(self, lp, p):
        return -lp + 0.5 * float(np.dot(p * self.inv_metric, p))

    def _momentum(self):
        return self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)

    def _leapfrog(self, x, p, g, eps, steps):
        p = p + 0.5 * eps * g
        lp = -np.inf
        for i in range(steps):
            x = x + eps * self.inv_metric * p
            lp, g = self._eval(x)
            if not np.isfinite(lp):
                return x, p, -np.inf, g
            if i + 1 < steps:
                p = p + eps * g
        p = p + 0.5 * eps * g
        return x, p, lp, g

    def reasonable_step_size(self, eps=1.0):
        p = self._momentum()
        h0 = self._hamiltonian(self.lp, p)

        def log_ratio(e):
            _, p1, lp1, _ = self._leapfrog(self.x, p, self.g, e, 1)
            if not np.isfinite(lp1):
                return -np.inf
            return h0 - self._hamiltonian(lp1, p1)

        direction = 1.0 if log_ratio(eps) > math.log(0.8) else -1.0
        for _ in range(100):
            lr = log_ratio(eps)
            if direction > 0 and not lr > math.log(0.8):
                break
            if direction < 0 and lr > math.log(0.8):
                break
            eps = eps * 2.0 if direction > 0 else eps / 2.0
        return eps

    def transition(self, eps):
        cfg = self.cfg
        n = max(1, int(round(cfg.path_length / eps)))
        n = min(n, cfg.max_leapfrog_steps)
        lo, hi = max(1, int(math.floor(0.8 * n))), max(1, int(math.ceil(1.2 * n)))
        steps = int(self.rng.integers(lo, hi + 1))
        steps = min(steps, cfg.max_leapfrog_steps)
        p0 = self._momentum()
        h0 = self._hamiltonian(self.lp, p0)
        x1, p1, lp1, g1 = self._leapfrog(self.x, p0, self.g, eps, steps)
        h1 = self._hamiltonian(lp1, p1) if np.isfinite(lp1) else np.inf
        dh = h1 - h0
        divergent = not np.isfinite(dh) or dh > DIVERGENCE_THRESHOLD
        accept = 0.0 if divergent else math.exp(min(0.0, -dh))
        if not divergent and self.rng.uniform() < accept:
            self.x, self.lp, self.g = x1, lp1, g1
        return accept, divergent, steps


def _run_chain(f, dim, cfg: SamplerConfig, seed_seq, init, transform):
    rng = np.random.default_rng(seed_seq)
    ch = _Chain(f, dim, cfg, rng, init)
    eps = ch.reasonable_step_size()
    da = _DualAveraging(eps, cfg.target_accept)
    init_n, windows, final_n = _windows(cfg.warmup)
    warm_div = 0

    def adapt_steps(k, eps):
        nonlocal warm_div
        for _ in range(k):
            a, div, _ = ch.transition(eps)
            warm_div += div
            eps = da.update(a)
        return eps

    eps = adapt_steps(init_n, eps)
    for size in windows:
        buf = np.empty((size, dim))
        for i in range(size):
            a, div, _ = ch.transition(eps)
            warm_div += div
            eps = da.update(a)
            buf[i] = ch.x
        var = buf.var(axis=0, ddof=1) if size > 1 else np.ones(dim)
        ch.inv_metric = (size / (size + 5.0)) * var + 1e-3 * (5.0 / (size + 5.0))
        eps = ch.reasonable_step_size(da.final if da.m else eps)
        da.restart(eps)
    eps = adapt_steps(final_n, eps)
    if da.m:
        eps = da.final

    out = np.empty((cfg.draws, dim))
    acc = np.empty(cfg.draws)
    divs = np.zeros(cfg.draws, dtype=bool)
    nlf = np.empty(cfg.draws, dtype=np.int64)
    for i in range(cfg.draws):
        acc[i], divs[i], nlf[i] = ch.transition(eps)
        out[i] = ch.x
    if transform is not None:
        out = transform(out)
    return out, acc, divs, nlf, eps, ch.inv_metric.copy(), warm_div


def run(
    logpost_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    dim: int,
    cfg: SamplerConfig,
    transform: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    names: Optional[Sequence[str]] = None,
    init: Optional[np.ndarray] = None,
) -> Draws:
    """Sample from the density whose log and gradient ``logpost_grad`` returns.

    ``transform`` maps an (n, dim) block of unconstrained draws to the scale
    stored in the result.  Chains get independent streams spawned from
    ``cfg.seed``, so output is reproducible regardless of ``cfg.threads``.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    names = list(names) if names is not None else [f"x[{i}]" for i in range(dim)]
    if len(names) != dim:
        raise ValueError(f"{len(names)} names for dimension {dim}")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    jobs = [(logpost_grad, dim, cfg, s, init, transform) for s in seeds]
    if cfg.threads > 1 and cfg.chains > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            results = list(ex.map(lambda a: _run_chain(*a), jobs))
    else:
        results = [_run_chain(*a) for a in jobs]
    draws = Draws(
        values=np.stack([r[0] for r in results]),
        names=names,
        accept_stat=np.stack([r[1] for r in results]),
        divergent=np.stack([r[2] for r in results]),
        n_leapfrog=np.stack([r[3] for r in results]),
        step_size=np.array([r[4] for r in results]),
        inv_metric=np.stack([r[5] for r in results]),
        warmup_divergences=np.array([r[6] for r in results], dtype=np.int64),
    )
    if draws.divergent.any():
        log.warning("%d divergent transitions after warmup", int(draws.divergent.sum()))
    return draws
