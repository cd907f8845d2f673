"""Averaged controllability Gramians, minimum-energy steering and densities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .ensemble import EnsembleSpec, averaged_flow, phi_lags
from .errors import ControllabilityError, InvalidInputError

__all__ = [
    "GramianTable",
    "ControllabilityReport",
    "gramian",
    "gramian_table",
    "check_avg_controllability",
    "DeterministicSteer",
    "deterministic_steer",
    "transport_cost",
    "density_brownian",
    "density_gramian",
    "DEFAULT_THRESHOLD",
]

DEFAULT_THRESHOLD = 1e-10
DEFAULT_TIME_NODES = 129
POINTS_PER_PANEL = 4


def _composite_gl(a: float, b: float, n_panels: int, points: int = POINTS_PER_PANEL):
    """Nodes and weights of a composite Gauss-Legendre rule on [a, b]."""
    x, w = np.polynomial.legendre.leggauss(points)
    edges = np.linspace(a, b, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _outer_integral(ens: EnsembleSpec, lags, weights) -> np.ndarray:
    P = phi_lags(ens, lags)
    return np.einsum("l,lik,ljk->ij", weights, P, P)


def gramian(ens: EnsembleSpec, t: float, s: float = 0.0,
            n_time_nodes: int = DEFAULT_TIME_NODES,
            points_per_panel: int = POINTS_PER_PANEL) -> np.ndarray:
    """Averaged controllability Gramian ``G_{t,s}``.

    Integrates ``Phi(t, tau) Phi(t, tau)^T`` over ``tau`` in ``[s, t]`` with a
    composite Gauss-Legendre rule. ``n_time_nodes`` equally spaced
    breakpoints delimit ``n_time_nodes - 1`` panels.
    """
    if not (0.0 <= s <= t):
        raise InvalidInputError(f"gramian requires 0 <= s <= t, got s={s}, t={t}")
    if n_time_nodes < 2:
        raise InvalidInputError("n_time_nodes must be at least 2")
    d = ens.state_dim
    if t == s:
        return np.zeros((d, d))
    # Phi(t, tau) depends only on the lag t - tau
    lags, w = _composite_gl(0.0, t - s, int(n_time_nodes) - 1, points_per_panel)
    G = _outer_integral(ens, lags, w)
    return 0.5 * (G + G.T)


@dataclass(frozen=True, eq=False)
class GramianTable:
    """``Phi(t_f, t_i)`` and ``G_{t_f, t_i}`` on the uniform grid ``t_i = i t_f / k``."""

    t_f: float
    grid: np.ndarray
    phi_at: np.ndarray    # (k+1, d, m)
    gram_at: np.ndarray   # (k+1, d, d)
    cond: float

    @property
    def k(self) -> int:
        return self.grid.size - 1

    @property
    def dt(self) -> float:
        return self.t_f / self.k

    def min_eigenvalues(self) -> np.ndarray:
        """Smallest eigenvalue of ``G_{t_f, t_i}`` at every grid time."""
        return np.linalg.eigvalsh(self.gram_at)[:, 0]


def gramian_table(ens: EnsembleSpec, t_f: float, k: int,
                  points_per_panel: int = POINTS_PER_PANEL,
                  min_panels: int = 64) -> GramianTable:
    """Tabulate ``Phi`` and the tail Gramians on a uniform grid.

    Each grid step is covered by at least one quadrature panel (more when
    ``k < min_panels``) and the tail Gramians are reverse cumulative sums
    of the per-step integrals, so additivity holds by construction.
    """
    if t_f <= 0:
        raise InvalidInputError("t_f must be positive")
    if int(k) != k or k < 1:
        raise InvalidInputError("k must be a positive integer")
    k = int(k)
    dt = t_f / k
    grid = np.arange(k + 1) * dt
    grid[-1] = t_f
    lags_grid = (k - np.arange(k + 1)) * dt
    phi_at = phi_lags(ens, lags_grid)

    sub = max(1, math.ceil(min_panels / k))
    lags, w = _composite_gl(0.0, t_f, k * sub, points_per_panel)
    P = phi_lags(ens, lags)
    contrib = np.einsum("l,lik,ljk->lij", w, P, P)
    # panels run over increasing lag; grid step i covers lags [t_f - t_{i+1}, t_f - t_i]
    per_step = contrib.reshape(k, sub * points_per_panel, *contrib.shape[1:]).sum(axis=1)
    per_step = per_step[::-1]
    d = ens.state_dim
    gram_at = np.zeros((k + 1, d, d))
    gram_at[:k] = np.cumsum(per_step[::-1], axis=0)[::-1]
    gram_at = 0.5 * (gram_at + np.swapaxes(gram_at, 1, 2))
    ev = np.linalg.eigvalsh(gram_at[0])
    cond = float(ev[-1] / ev[0]) if ev[0] > 0 else math.inf
    return GramianTable(float(t_f), grid, phi_at, gram_at, cond)


@dataclass(frozen=True)
class ControllabilityReport:
    invertible: bool
    cond: float
    min_eigenvalue: float
    max_eigenvalue: float
    threshold: float

    def to_dict(self) -> dict:
        return {
            "invertible": self.invertible,
            "cond": self.cond if math.isfinite(self.cond) else None,
            "min_eig": self.min_eigenvalue,
            "max_eig": self.max_eigenvalue,
            "threshold": self.threshold,
        }


def _report(G: np.ndarray, threshold: float) -> ControllabilityReport:
    ev = np.linalg.eigvalsh(G)
    lo, hi = float(ev[0]), float(ev[-1])
    invertible = hi > 0 and lo > threshold * hi
    cond = hi / lo if lo > 0 else math.inf
    return ControllabilityReport(bool(invertible), float(cond), lo, hi, float(threshold))


def check_avg_controllability(ens: EnsembleSpec, t_f: float,
                              threshold: float = DEFAULT_THRESHOLD,
                              n_time_nodes: int = DEFAULT_TIME_NODES) -> ControllabilityReport:
    """Certify averaged controllability through the eigenvalues of ``G_{t_f,0}``.

    The Gramian counts as invertible when its smallest eigenvalue exceeds
    ``threshold`` times its largest.
    """
    if t_f <= 0:
        raise InvalidInputError("t_f must be positive")
    return _report(gramian(ens, t_f, 0.0, n_time_nodes), threshold)


def factor_gramian(G: np.ndarray, threshold: float = DEFAULT_THRESHOLD, time=None):
    """Cholesky factor of a Gramian, raising ``ControllabilityError`` if singular."""
    report = _report(G, threshold)
    if not report.invertible:
        where = "" if time is None else f" at t={time:g}"
        raise ControllabilityError(
            f"averaged Gramian is singular{where} "
            f"(min eig {report.min_eigenvalue:.3e}, max eig {report.max_eigenvalue:.3e})",
            report=report, time=time)
    return cho_factor(G, lower=True)


def _displacement(ens: EnsembleSpec, x0, xf, t_f: float) -> np.ndarray:
    d = ens.state_dim
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    xf = np.asarray(xf, dtype=float).reshape(-1)
    if x0.size != d or xf.size != d:
        raise InvalidInputError(f"endpoints must be {d}-vectors")
    if not np.any(x0):
        return xf.copy()
    return xf - averaged_flow(ens, t_f) @ x0


class DeterministicSteer:
    """Minimum-energy parameter-independent control steering the average.

    Calling the object with a time (or array of times) in ``[0, t_f]``
    returns ``Phi(t_f, t)^T G_{t_f,0}^{-1} (x_f - E(t_f) x_0)`` where
    ``E(t)`` is the averaged flow.
    """

    def __init__(self, ens: EnsembleSpec, x0, xf, t_f: float,
                 n_time_nodes: int = DEFAULT_TIME_NODES,
                 threshold: float = DEFAULT_THRESHOLD):
        if t_f <= 0:
            raise InvalidInputError("t_f must be positive")
        self.ens = ens
        self.t_f = float(t_f)
        self.x0 = np.asarray(x0, dtype=float).reshape(-1)
        self.xf = np.asarray(xf, dtype=float).reshape(-1)
        self.displacement = _displacement(ens, self.x0, self.xf, t_f)
        self.gram = gramian(ens, t_f, 0.0, n_time_nodes)
        self.report = _report(self.gram, threshold)
        if not self.report.invertible:
            raise ControllabilityError("ensemble is not averaged controllable on this horizon",
                                       report=self.report, time=0.0)
        self.costate = cho_solve(factor_gramian(self.gram, threshold), self.displacement)

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0) or np.any(t_arr > self.t_f):
            raise InvalidInputError("steering control is defined on [0, t_f] only")
        P = phi_lags(self.ens, self.t_f - t_arr.reshape(-1))
        u = np.einsum("lik,i->lk", P, self.costate)
        return u[0] if t_arr.ndim == 0 else u

    def energy(self) -> float:
        """Exact control energy ``1/2 y^T G^{-1} y``."""
        return 0.5 * float(self.displacement @ self.costate)

    def start(self, prob, n_paths: int):
        k = prob.steps_k
        u = self(np.arange(k) * (prob.t_f / k))

        def step(i, x, dw_prev):
            return np.broadcast_to(u[i], (n_paths, u.shape[1]))

        return step


def deterministic_steer(ens: EnsembleSpec, x0, xf, t_f: float, **kwargs) -> DeterministicSteer:
    """Build the minimum-energy averaged steering control."""
    return DeterministicSteer(ens, x0, xf, t_f, **kwargs)


def transport_cost(ens: EnsembleSpec, x0, xf, t_f: float,
                   n_time_nodes: int = DEFAULT_TIME_NODES,
                   threshold: float = DEFAULT_THRESHOLD) -> float:
    """Gramian-weighted squared distance ``1/2 ||x_f - E(t_f) x_0||^2_{G^{-1}}``."""
    y = _displacement(ens, x0, xf, t_f)
    G = gramian(ens, t_f, 0.0, n_time_nodes)
    c = factor_gramian(G, threshold, time=0.0)
    return 0.5 * float(y @ cho_solve(c, y))


def density_brownian(s: float, x, t: float, y, dims: int | None = None) -> float:
    """Brownian transition density from ``(s, x)`` to ``(t, y)``."""
    if not s < t:
        raise InvalidInputError("density requires s < t")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d = x.size if dims is None else int(dims)
    if x.size != d or y.size != d:
        raise InvalidInputError(f"points must be {d}-vectors")
    tau = t - s
    r2 = float(np.sum((x - y) ** 2))
    return (2.0 * math.pi * tau) ** (-d / 2) * math.exp(-r2 / (2.0 * tau))


def density_gramian(ens: EnsembleSpec, eps: float, s: float, x, t: float, y,
                    normalization: str = "gaussian",
                    n_time_nodes: int = DEFAULT_TIME_NODES,
                    threshold: float = DEFAULT_THRESHOLD) -> float:
    """Transition density of the averaged diffusion with covariance ``eps G_{t,s}``.

    ``normalization="gaussian"`` uses the prefactor
    ``(2 pi eps)^{-d/2} det(G)^{-1/2}``, which integrates to one in any
    dimension. ``"power"`` uses ``det(G)^{-d/2}`` instead; the two agree
    for scalar states.
    """
    if not s < t:
        raise InvalidInputError("density requires s < t")
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    if normalization not in ("gaussian", "power"):
        raise InvalidInputError(f"unknown normalization {normalization!r}")
    d = ens.state_dim
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.size != d or y.size != d:
        raise InvalidInputError(f"points must be {d}-vectors")
    G = gramian(ens, t, s, n_time_nodes)
    c = factor_gramian(G, threshold, time=s)
    r = y - averaged_flow(ens, t - s) @ x
    quad = float(r @ cho_solve(c, r))
    logdet = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    power = 0.5 if normalization == "gaussian" else d / 2
    return math.exp(-0.5 * d * math.log(2.0 * math.pi * eps) - power * logdet
                    - quad / (2.0 * eps))
