"""Minimal CMA-ES (rank-1 + rank-mu update, cumulative step-size adaptation).

State objects are immutable; ``ask`` draws from a caller-owned generator
and ``tell`` returns a new state. Optional box bounds are enforced by
clipping samples, and the update uses the clipped points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class CMAError(Exception):
    pass


def default_population(n: int) -> int:
    return 4 + int(math.floor(3 * math.log(n)))


@dataclass(frozen=True)
class Strategy:
    """Constants of one CMA-ES configuration (depend only on n and lambda)."""

    n: int
    lam: int
    mu: int
    weights: np.ndarray
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    chi_n: float

    @classmethod
    def make(cls, n: int, lam: int | None = None) -> "Strategy":
        lam = default_population(n) if lam is None else int(lam)
        if lam < 2:
            raise CMAError("population size must be >= 2")
        mu = lam // 2
        w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        w = w / w.sum()
        mueff = 1.0 / float(np.sum(w**2))
        cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        cs = (mueff + 2) / (n + mueff + 5)
        c1 = 2 / ((n + 1.3) ** 2 + mueff)
        cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
        chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        w.setflags(write=False)
        return cls(n, lam, mu, w, mueff, cc, cs, c1, cmu, damps, chi_n)


@dataclass(frozen=True, eq=False)
class OptimizerState:
    mean: np.ndarray
    covariance: np.ndarray
    sigma: float
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int
    strategy: Strategy
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    eig_basis: np.ndarray | None = None
    eig_scale: np.ndarray | None = None

    @property
    def population_size(self) -> int:
        return self.strategy.lam

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.covariance).min())


def _decompose(C: np.ndarray, floor: float = 1e-10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetrize, floor eigenvalues and return (C, B, D) with C = B diag(D^2) B^T."""
    C = (C + C.T) / 2
    vals, B = np.linalg.eigh(C)
    if not np.all(np.isfinite(vals)):
        raise CMAError("covariance is not finite")
    top = max(float(vals.max()), floor)
    vals = np.maximum(vals, top * 1e-14 + floor)
    C = (B * vals) @ B.T
    return (C + C.T) / 2, B, np.sqrt(vals)


def cma_init(mean0, sigma0: float, lam: int | None = None, lower=None, upper=None) -> OptimizerState:
    mean0 = np.asarray(mean0, dtype=float).copy()
    n = mean0.size
    if not sigma0 > 0:
        raise CMAError("sigma0 must be positive")
    if lower is not None:
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.any(mean0 < lower) or np.any(mean0 > upper):
            raise CMAError("initial mean outside bounds")
    strat = Strategy.make(n, lam)
    return OptimizerState(
        mean0, np.eye(n), float(sigma0), np.zeros(n), np.zeros(n), 0, strat, lower, upper, np.eye(n), np.ones(n)
    )


def cma_ask(state: OptimizerState, rng: np.random.Generator) -> np.ndarray:
    """lambda x n samples from N(mean, sigma^2 C), clipped into bounds."""
    n, lam = state.strategy.n, state.strategy.lam
    B, D = state.eig_basis, state.eig_scale
    if not np.all(np.isfinite(D)) or np.any(D <= 0):
        raise CMAError("degenerate covariance")
    z = rng.standard_normal((lam, n))
    x = state.mean + state.sigma * (z * D) @ B.T
    if state.lower is not None:
        x = np.clip(x, state.lower, state.upper)
    return x


def cma_tell(state: OptimizerState, xs, costs) -> OptimizerState:
    s = state.strategy
    xs = np.asarray(xs, dtype=float)
    costs = np.asarray(costs, dtype=float)
    if xs.shape != (s.lam, s.n) or costs.shape != (s.lam,):
        raise CMAError(f"expected {s.lam} seeds and costs")
    if np.any(np.isnan(costs)):
        raise CMAError("NaN cost")
    order = np.argsort(costs, kind="stable")
    sel = xs[order[: s.mu]]
    old = state.mean
    mean = s.weights @ sel
    y = (sel - old) / state.sigma
    yw = (mean - old) / state.sigma

    B, D = state.eig_basis, state.eig_scale
    inv_sqrt = (B / D) @ B.T
    ps = (1 - s.cs) * state.p_sigma + math.sqrt(s.cs * (2 - s.cs) * s.mueff) * (inv_sqrt @ yw)
    gen = state.generation + 1
    norm_ps = float(np.linalg.norm(ps))
    hsig = norm_ps / math.sqrt(1 - (1 - s.cs) ** (2 * gen)) / s.chi_n < 1.4 + 2 / (s.n + 1)
    pc = (1 - s.cc) * state.p_c + (math.sqrt(s.cc * (2 - s.cc) * s.mueff) * yw if hsig else 0.0)

    C = state.covariance
    c1a = s.c1 * (1 - (0.0 if hsig else s.cc * (2 - s.cc)))
    rank_mu = (y.T * s.weights) @ y
    C = (1 - c1a - s.cmu) * C + s.c1 * np.outer(pc, pc) + s.cmu * rank_mu
    C, B, D = _decompose(C)

    sigma = state.sigma * math.exp(min(1.0, (s.cs / s.damps) * (norm_ps / s.chi_n - 1)))
    if not math.isfinite(sigma) or sigma <= 0:
        raise CMAError("step size collapsed")
    return replace(
        state, mean=mean, covariance=C, sigma=sigma, p_sigma=ps, p_c=np.asarray(pc, dtype=float),
        generation=gen, eig_basis=B, eig_scale=D,
    )


def minimize(f, x0, sigma0: float, rng: np.random.Generator, max_generations: int = 1000, target: float = -np.inf, lam=None):
    """Plain unconstrained loop, mainly for benchmarks. Returns (best_x, best_f, state, generations)."""
    state = cma_init(x0, sigma0, lam)
    best_x, best_f = np.asarray(x0, dtype=float), float(f(x0))
    for g in range(1, max_generations + 1):
        xs = cma_ask(state, rng)
        fs = np.array([f(x) for x in xs])
        i = int(np.argmin(fs))
        if fs[i] < best_f:
            best_x, best_f = xs[i].copy(), float(fs[i])
        state = cma_tell(state, xs, fs)
        if best_f < target:
            return best_x, best_f, state, g
    return best_x, best_f, state, max_generations
