"""Bridge controllers for the averaged ensemble.

Three controllers are provided:

* :func:`synthesize_discrete`: optimal control of the penalized
  discrete-time problem, used as the production controller.
* :func:`continuous_gains` and :func:`continuous_feedforward`: left-endpoint
  Ito discretization of the continuous-time feedforward law.
* :class:`MarkovBridge`: state feedback of the classical Brownian bridge,
  valid only when the ensemble is a single Brownian motion.

Feedforward controllers act on the history of Wiener increments, never on
the state. Their noise gains factor as ``K[i][j] = L_i R_j`` with
``L_i = Phi(t_f, t_i)^T``, so controls are evaluated by accumulating
``z_i = sum_{j<i} R_j dW_j`` in a single pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .ensemble import EnsembleSpec, averaged_flow, is_brownian, phi_lags
from .errors import InvalidInputError
from .gramian import DEFAULT_THRESHOLD, GramianTable, factor_gramian, gramian_table

__all__ = [
    "BridgeProblem",
    "ControllerGains",
    "synthesize_discrete",
    "continuous_gains",
    "continuous_feedforward",
    "markov_bridge_control",
    "MarkovBridge",
    "ZeroControl",
]


@dataclass(frozen=True, eq=False)
class BridgeProblem:
    """Endpoints, horizon, noise level, terminal penalty and step count."""

    x0: np.ndarray
    xf: np.ndarray
    t_f: float = 1.0
    eps: float = 1.0
    penalty_a: float = 1e6
    steps_k: int = 256

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float)).reshape(-1)
        xf = np.atleast_1d(np.asarray(self.xf, dtype=float)).reshape(-1)
        if x0.shape != xf.shape:
            raise InvalidInputError("x0 and xf must have the same dimension")
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(xf))):
            raise InvalidInputError("endpoints must be finite")
        if not (self.t_f > 0 and math.isfinite(self.t_f)):
            raise InvalidInputError("t_f must be positive and finite")
        if not (self.eps >= 0 and math.isfinite(self.eps)):
            raise InvalidInputError("eps must be nonnegative and finite")
        if not (self.penalty_a > 0 and math.isfinite(self.penalty_a)):
            raise InvalidInputError("penalty_a must be positive and finite")
        if int(self.steps_k) != self.steps_k or self.steps_k < 1:
            raise InvalidInputError("steps_k must be a positive integer")
        x0.setflags(write=False)
        xf.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "xf", xf)
        object.__setattr__(self, "t_f", float(self.t_f))
        object.__setattr__(self, "eps", float(self.eps))
        object.__setattr__(self, "penalty_a", float(self.penalty_a))
        object.__setattr__(self, "steps_k", int(self.steps_k))

    @property
    def dt(self) -> float:
        return self.t_f / self.steps_k

    @property
    def grid(self) -> np.ndarray:
        g = np.arange(self.steps_k + 1) * self.dt
        g[-1] = self.t_f
        return g

    def check_against(self, ens: EnsembleSpec) -> None:
        if self.x0.size != ens.state_dim:
            raise InvalidInputError(
                f"endpoints are {self.x0.size}-vectors but the ensemble state has "
                f"dimension {ens.state_dim}")

    def replace(self, **changes) -> "BridgeProblem":
        fields = dict(x0=self.x0, xf=self.xf, t_f=self.t_f, eps=self.eps,
                      penalty_a=self.penalty_a, steps_k=self.steps_k)
        fields.update(changes)
        return BridgeProblem(**fields)


def _target(ens: EnsembleSpec, prob: BridgeProblem) -> np.ndarray:
    """Target with the free response of ``x0`` removed."""
    if not np.any(prob.x0):
        return np.array(prob.xf)
    return prob.xf - averaged_flow(ens, prob.t_f) @ prob.x0


def _phi_grid(ens: EnsembleSpec, prob: BridgeProblem) -> np.ndarray:
    k = prob.steps_k
    return phi_lags(ens, (k - np.arange(k)) * prob.dt)


@dataclass(frozen=True, eq=False)
class ControllerGains:
    """Causal feedforward controller ``u_i = v_i - sqrt(eps) sum_{j<i} K[i][j] dW_j``.

    ``K[i][j] = out_factors[i] @ in_factors[j]``; no gain exists for ``j >= i``.
    """

    grid: np.ndarray
    out_factors: np.ndarray   # (k, m, d)
    in_factors: np.ndarray    # (k, d, m)
    open_loop: np.ndarray     # (k, m)
    eps: float
    kind: str = "discrete"
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.open_loop.shape[0]

    @property
    def t_f(self) -> float:
        return float(self.grid[-1])

    @property
    def n_gain_blocks(self) -> int:
        return self.k * (self.k - 1) // 2

    def noise_gain(self, i: int, j: int) -> np.ndarray:
        if not (0 <= j < i < self.k):
            raise InvalidInputError(f"no noise gain for (i={i}, j={j}); need 0 <= j < i < k")
        return self.out_factors[i] @ self.in_factors[j]

    def noise_gains(self) -> np.ndarray:
        """Dense gain array of shape (k, k, m, m), zero for ``j >= i``."""
        K = np.einsum("iad,jdb->ijab", self.out_factors, self.in_factors)
        mask = np.tril(np.ones((self.k, self.k), dtype=bool), -1)
        K[~mask] = 0.0
        return K

    def controls(self, increments) -> np.ndarray:
        """Control sequences for a batch of increment arrays ``(P, k, m)``."""
        dW = np.asarray(increments, dtype=float)
        single = dW.ndim == 2
        if single:
            dW = dW[None]
        if dW.shape[1] != self.k:
            raise InvalidInputError(f"expected {self.k} increments, got {dW.shape[1]}")
        contrib = np.einsum("jdm,pjm->pjd", self.in_factors, dW)
        z = np.cumsum(contrib, axis=1)
        z = np.concatenate([np.zeros_like(z[:, :1]), z[:, :-1]], axis=1)
        u = self.open_loop[None] - math.sqrt(self.eps) * np.einsum(
            "imd,pid->pim", self.out_factors, z)
        return u[0] if single else u

    def start(self, prob: BridgeProblem, n_paths: int):
        if prob.steps_k != self.k or not math.isclose(prob.t_f, self.t_f):
            raise InvalidInputError("controller gains were built for a different grid")
        d = self.in_factors.shape[1]
        z = np.zeros((n_paths, d))
        scale = math.sqrt(self.eps)

        def step(i, x, dw_prev):
            if i > 0:
                z[...] += dw_prev @ self.in_factors[i - 1].T
            return self.open_loop[i][None, :] - scale * z @ self.out_factors[i].T

        return step

    def summary(self) -> dict:
        """Per-step norms and conditioning, suitable for JSON output."""
        K = self.noise_gains()
        row_norms = np.sqrt(np.einsum("ijab,ijab->i", K, K))
        return {
            "kind": self.kind,
            "k": self.k,
            "t_f": self.t_f,
            "eps": self.eps,
            "grid": self.grid.tolist(),
            "n_open_loop": self.k,
            "n_gain_blocks": self.n_gain_blocks,
            "open_loop": self.open_loop.tolist(),
            "open_loop_norms": np.linalg.norm(self.open_loop, axis=1).tolist(),
            "gain_row_norms": row_norms.tolist(),
            **self.meta,
        }


def synthesize_discrete(ens: EnsembleSpec, prob: BridgeProblem,
                        convention: str = "optimal") -> ControllerGains:
    """Optimal causal control of the penalized discrete-time bridge problem.

    With ``M_j = sum_{alpha >= j} Phi_alpha Phi_alpha^T dt + I / (2a)``
    (``Phi_alpha = Phi(t_f, t_alpha)``), the open-loop term is
    ``v_i = Phi_i^T M_0^{-1} (x_f - E(t_f) x_0)`` and the noise gains are

    * ``convention="optimal"``: ``K[i][j] = Phi_i^T M_{j+1}^{-1} Phi_j``,
      the exact minimizer when ``u_i`` may depend on ``dW_0 .. dW_{i-1}``;
    * ``convention="truncated"``: ``K[i][j] = Phi_i^T M_j^{-1} Phi_j``, the
      anticipative full-information law with its ``j = i`` term dropped.

    Both share the same ``a -> inf, k -> inf`` limit.
    """
    if convention not in ("optimal", "truncated"):
        raise InvalidInputError(f"unknown convention {convention!r}")
    prob.check_against(ens)
    k, dt = prob.steps_k, prob.dt
    d, m = ens.state_dim, ens.input_dim
    P = _phi_grid(ens, prob)                                  # (k, d, m)
    S = np.einsum("aik,ajk->aij", P, P) * dt
    M = np.empty((k + 1, d, d))
    M[k] = np.eye(d) / (2.0 * prob.penalty_a)
    # reverse-cumulative sweep: M_j = M_{j+1} + Phi_j Phi_j^T dt
    for j in range(k - 1, -1, -1):
        M[j] = M[j + 1] + S[j]
    shift = 1 if convention == "optimal" else 0
    R = np.empty((k, d, m))
    for j in range(k):
        R[j] = cho_solve(cho_factor(M[j + shift], lower=True), P[j])
    lam = cho_solve(cho_factor(M[0], lower=True), _target(ens, prob))
    v = np.einsum("aik,i->ak", P, lam)
    ev0 = np.linalg.eigvalsh(M[0])
    meta = {"penalty_a": prob.penalty_a, "convention": convention,
            "cond_M0": float(ev0[-1] / ev0[0])}
    return ControllerGains(prob.grid, np.swapaxes(P, 1, 2).copy(), R, v, prob.eps,
                           kind="discrete", meta=meta)


def continuous_gains(ens: EnsembleSpec, prob: BridgeProblem,
                     table: GramianTable | None = None,
                     threshold: float = DEFAULT_THRESHOLD) -> ControllerGains:
    """Left-endpoint discretization of the continuous-time feedforward law.

    ``K[i][j] = Phi(t_f, t_i)^T G_{t_f, t_j}^{-1} Phi(t_f, t_j)`` and
    ``v_i = Phi(t_f, t_i)^T G_{t_f, 0}^{-1} (x_f - E(t_f) x_0)``. Only the
    Gramians at ``t_0 .. t_{k-2}`` are needed; the first singular one raises
    :class:`ControllabilityError` naming its time.
    """
    prob.check_against(ens)
    k = prob.steps_k
    if table is None:
        table = gramian_table(ens, prob.t_f, k)
    elif table.k != k or not math.isclose(table.t_f, prob.t_f):
        raise InvalidInputError("Gramian table grid does not match the problem")
    d, m = ens.state_dim, ens.input_dim
    P = table.phi_at[:k]
    R = np.zeros((k, d, m))
    for j in range(k - 1):
        c = factor_gramian(table.gram_at[j], threshold, time=float(table.grid[j]))
        R[j] = cho_solve(c, P[j])
    c0 = factor_gramian(table.gram_at[0], threshold, time=0.0)
    lam = cho_solve(c0, _target(ens, prob))
    v = np.einsum("aik,i->ak", P, lam)
    meta = {"cond_G0": table.cond, "min_eig_profile": table.min_eigenvalues()[:k].tolist()}
    return ControllerGains(table.grid.copy(), np.swapaxes(P, 1, 2).copy(), R, v, prob.eps,
                           kind="continuous", meta=meta)


def continuous_feedforward(ens: EnsembleSpec, prob: BridgeProblem, noise, t_index: int,
                           gains: ControllerGains | None = None) -> np.ndarray:
    """Continuous feedforward control at grid time ``t_index`` for one noise path.

    ``noise`` is a :class:`~ensemble_bridge.sim.NoisePath` or an array of
    increments of shape ``(k, m)``. Pass precomputed ``gains`` when
    evaluating many times.
    """
    k = prob.steps_k
    if not (0 <= t_index < k):
        raise InvalidInputError(f"t_index must lie in [0, {k})")
    dW = np.asarray(getattr(noise, "increments", noise), dtype=float)
    if dW.shape != (k, ens.input_dim):
        raise InvalidInputError(f"noise increments must have shape ({k}, {ens.input_dim})")
    if gains is None:
        gains = continuous_gains(ens, prob)
    z = np.einsum("jdm,jm->d", gains.in_factors[:t_index], dW[:t_index])
    return gains.open_loop[t_index] - math.sqrt(prob.eps) * gains.out_factors[t_index] @ z


def markov_bridge_control(x, t: float, t_f: float, target=None):
    """Brownian-bridge feedback ``-(x - target) / (t_f - t)`` (target defaults to 0)."""
    if not t < t_f:
        raise InvalidInputError("Markov bridge control is undefined for t >= t_f")
    x = np.asarray(x, dtype=float)
    if target is not None:
        x = x - np.asarray(target, dtype=float)
    return -x / (t_f - t)


class MarkovBridge:
    """Closed-loop Brownian-bridge controller ``u = (x_f - x) / (t_f - t)``.

    Only meaningful when every ensemble member is ``dX = u dt + sqrt(eps) dW``.
    """

    def __init__(self, ens: EnsembleSpec | None = None):
        if ens is not None and not is_brownian(ens):
            raise InvalidInputError("the Markov bridge controller requires the Brownian family")

    def start(self, prob: BridgeProblem, n_paths: int):
        grid = prob.grid

        def step(i, x, dw_prev):
            return markov_bridge_control(x, grid[i], prob.t_f, prob.xf)

        return step


class ZeroControl:
    """Uncontrolled ensemble."""

    def __init__(self, input_dim: int):
        self.input_dim = int(input_dim)

    def start(self, prob: BridgeProblem, n_paths: int):
        u = np.zeros((n_paths, self.input_dim))

        def step(i, x, dw_prev):
            return u

        return step
