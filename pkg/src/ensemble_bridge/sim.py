"""Wiener paths, Euler-Maruyama simulation and Monte Carlo studies.

Every ensemble member is driven by the *same* Wiener path; only the system
matrices differ across parameter nodes. Controllers are objects exposing
``start(prob, n_paths)``, which returns a stepping function
``step(i, x_avg, dw_prev) -> u`` called once per grid step with the current
averaged state ``(n_paths, d)`` and the increment completed on the previous
step (``None`` at ``i = 0``). The stepping function never sees future
increments.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bridge import BridgeProblem, continuous_gains, synthesize_discrete
from .ensemble import EnsembleSpec, averaged_flow, phi_lags
from .errors import DivergenceError, InvalidInputError

__all__ = [
    "NoisePath",
    "make_noise",
    "noise_batch",
    "SimulationRecord",
    "simulate_ensemble",
    "simulate_average",
    "evaluate_cost",
    "EndpointStats",
    "verify_endpoint",
    "endpoint_stats",
    "run_paths",
    "ConvergenceCell",
    "ConvergenceReport",
    "convergence_study",
]


def _generator(seed: int) -> np.random.Generator:
    # Philox is counter based; distinct seeds give non-overlapping streams
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Wiener increments ``dW_i = W(t_{i+1}) - W(t_i)`` on a uniform grid."""

    seed: int
    k: int
    dt: float
    increments: np.ndarray  # (k, m)

    @property
    def m(self) -> int:
        return self.increments.shape[1]

    def wiener(self) -> np.ndarray:
        """Cumulative path ``W(t_0) = 0, ..., W(t_k)``, shape (k+1, m)."""
        W = np.zeros((self.k + 1, self.m))
        np.cumsum(self.increments, axis=0, out=W[1:])
        return W

    def coarsen(self, k: int) -> "NoisePath":
        """Same Brownian path observed on a grid of ``k`` steps."""
        if k < 1 or self.k % k:
            raise InvalidInputError(f"cannot coarsen {self.k} steps to {k}")
        r = self.k // k
        inc = self.increments.reshape(k, r, self.m).sum(axis=1)
        return NoisePath(self.seed, k, self.dt * r, inc)


def make_noise(seed: int, k: int, t_f: float, m: int = 1) -> NoisePath:
    """Draw ``k`` increments distributed as ``Normal(0, dt I_m)``."""
    if k < 1 or m < 1:
        raise InvalidInputError("k and m must be positive")
    dt = t_f / k
    inc = _generator(seed).standard_normal((k, m)) * math.sqrt(dt)
    inc.setflags(write=False)
    return NoisePath(int(seed), int(k), dt, inc)


def noise_batch(base_seed: int, n_paths: int, k: int, t_f: float, m: int = 1) -> np.ndarray:
    """Increments for paths seeded ``base_seed + p``, shape (n_paths, k, m)."""
    return np.stack([make_noise(base_seed + p, k, t_f, m).increments for p in range(n_paths)])


@dataclass(frozen=True, eq=False)
class SimulationRecord:
    t: np.ndarray
    averaged_state: np.ndarray            # (k+1, d)
    control: np.ndarray                   # (k, m)
    increments: np.ndarray                # (k, m)
    realized_cost: float
    penalized_cost: float
    endpoint_error: float
    per_node_states: np.ndarray | None = None  # (k+1, n_nodes, d)
    seed: int | None = None


def _check(ens: EnsembleSpec, prob: BridgeProblem, dW: np.ndarray) -> None:
    prob.check_against(ens)
    if dW.shape[1] != prob.steps_k or dW.shape[-1] != ens.input_dim:
        raise InvalidInputError(
            f"noise has shape {dW.shape}; expected (paths, {prob.steps_k}, ..., {ens.input_dim})")


def _costs(prob: BridgeProblem, u: np.ndarray, x_end: np.ndarray):
    running = 0.5 * np.einsum("pim,pim->p", u, u) * prob.dt
    miss = x_end - prob.xf
    penalized = running + prob.penalty_a * np.einsum("pd,pd->p", miss, miss)
    return running, penalized


def _euler_batch(ens: EnsembleSpec, prob: BridgeProblem, controller, dW: np.ndarray,
                 keep_nodes: bool = False):
    """Euler-Maruyama for all nodes and paths at once.

    ``dW`` has shape (P, k, m) for the shared path, or (P, k, n_nodes, m)
    to feed each node its own increments.
    """
    _check(ens, prob, dW)
    P, k = dW.shape[:2]
    per_node_noise = dW.ndim == 4
    dt, sq = prob.dt, math.sqrt(prob.eps)
    A, B, w = ens.A, ens.B, ens.weights
    X = np.broadcast_to(prob.x0, (P, ens.n_nodes, ens.state_dim)).copy()
    xs = np.empty((k + 1, P, ens.state_dim))
    us = np.empty((k, P, ens.input_dim))
    nodes = np.empty((k + 1, P) + X.shape[1:]) if keep_nodes else None
    xs[0] = np.einsum("n,pnd->pd", w, X)
    if keep_nodes:
        nodes[0] = X
    step = controller.start(prob, P)
    for i in range(k):
        u = np.asarray(step(i, xs[i], dW[:, i - 1] if i else None), dtype=float)
        us[i] = u
        if per_node_noise:
            forcing = np.einsum("nde,pne->pnd", B, u[:, None, :] * dt + sq * dW[:, i])
        else:
            forcing = np.einsum("nde,pe->pnd", B, u * dt + sq * dW[:, i])
        X = X + np.einsum("nde,pne->pnd", A, X) * dt + forcing
        if not np.all(np.isfinite(X)):
            raise DivergenceError(f"state became non-finite at step {i + 1}", step=i + 1)
        xs[i + 1] = np.einsum("n,pnd->pd", w, X)
        if keep_nodes:
            nodes[i + 1] = X
    return xs, us, nodes


def _average_batch(ens: EnsembleSpec, prob: BridgeProblem, controller, dW: np.ndarray):
    """Direct evaluation of ``x(t_i) = E(t_i) x0 + sum_{j<i} Phi(t_i, t_j)(u_j dt + sqrt(eps) dW_j)``."""
    _check(ens, prob, dW)
    P, k = dW.shape[:2]
    dt, sq = prob.dt, math.sqrt(prob.eps)
    lags = np.arange(k + 1) * dt
    Phi = phi_lags(ens, lags)                      # Phi[l] = Phi(t_i, t_{i-l})
    free = averaged_flow(ens, lags) @ prob.x0      # (k+1, d)
    xs = np.empty((k + 1, P, ens.state_dim))
    us = np.empty((k, P, ens.input_dim))
    f = np.empty((P, k, ens.input_dim))
    step = controller.start(prob, P)
    for i in range(k + 1):
        acc = np.einsum("jdm,pjm->pd", Phi[i:0:-1], f[:, :i]) if i else 0.0
        xs[i] = free[i] + acc
        if not np.all(np.isfinite(xs[i])):
            raise DivergenceError(f"state became non-finite at step {i}", step=i)
        if i == k:
            break
        u = np.asarray(step(i, xs[i], dW[:, i - 1] if i else None), dtype=float)
        us[i] = u
        f[:, i] = u * dt + sq * dW[:, i]
    return xs, us


def _record(prob, xs, us, dW, nodes=None, seed=None) -> SimulationRecord:
    running, penalized = _costs(prob, us[None], xs[-1][None])
    return SimulationRecord(
        t=prob.grid,
        averaged_state=xs,
        control=us,
        increments=np.array(dW),
        realized_cost=float(running[0]),
        penalized_cost=float(penalized[0]),
        endpoint_error=float(np.linalg.norm(xs[-1] - prob.xf)),
        per_node_states=nodes,
        seed=seed,
    )


def _increments(noise) -> tuple[np.ndarray, int | None]:
    if isinstance(noise, NoisePath):
        return noise.increments, noise.seed
    return np.asarray(noise, dtype=float), None


def simulate_ensemble(ens: EnsembleSpec, prob: BridgeProblem, controller, noise) -> SimulationRecord:
    """Euler-Maruyama simulation of every node under one shared noise path.

    ``X_{i+1} = X_i + (A_n X_i + B_n u_i) dt + sqrt(eps) B_n dW_i`` with
    ``X_0 = x0``; the control is evaluated at the left end of each step.
    """
    dW, seed = _increments(noise)
    xs, us, nodes = _euler_batch(ens, prob, controller, dW[None], keep_nodes=True)
    return _record(prob, xs[:, 0], us[:, 0], dW, nodes[:, 0], seed)


def simulate_average(ens: EnsembleSpec, prob: BridgeProblem, controller, noise) -> SimulationRecord:
    """Averaged state from its impulse-response representation (no per-node states)."""
    dW, seed = _increments(noise)
    xs, us = _average_batch(ens, prob, controller, dW[None])
    return _record(prob, xs[:, 0], us[:, 0], dW, None, seed)


def evaluate_cost(record: SimulationRecord, prob: BridgeProblem) -> tuple[float, float]:
    """Running cost ``1/2 sum |u_i|^2 dt`` and penalized cost ``running + a |x_k - x_f|^2``."""
    u = np.asarray(record.control)
    running = 0.5 * float(np.sum(u * u)) * prob.dt
    miss = np.asarray(record.averaged_state[-1]) - prob.xf
    return running, running + prob.penalty_a * float(miss @ miss)


def _mean_se(values) -> tuple[float, float]:
    """Order-independent mean and standard error (exactly rounded sums)."""
    values = [float(v) for v in np.ravel(values)]
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1) if n > 1 else 0.0
    return mean, math.sqrt(var / n)


@dataclass(frozen=True, eq=False)
class EndpointStats:
    n_paths: int
    quantiles: dict           # {0.5: .., 0.9: .., 0.99: ..} of endpoint error
    mean_endpoint: np.ndarray
    mean_endpoint_se: np.ndarray
    mean_cost: float
    mean_cost_se: float
    mean_penalized: float
    mean_penalized_se: float
    errors: np.ndarray = field(repr=False)
    endpoints: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "endpoint_error_quantiles": {f"q{int(round(q * 100))}": v
                                         for q, v in self.quantiles.items()},
            "mean_endpoint": self.mean_endpoint.tolist(),
            "mean_endpoint_se": self.mean_endpoint_se.tolist(),
            "mean_cost": self.mean_cost,
            "mean_cost_se": self.mean_cost_se,
            "mean_penalized_cost": self.mean_penalized,
            "mean_penalized_cost_se": self.mean_penalized_se,
        }


def _chunks(n: int, size: int):
    return [(s, min(n, s + size)) for s in range(0, n, size)]


def run_paths(ens: EnsembleSpec, prob: BridgeProblem, controller, n_paths: int,
              base_seed: int = 0, method: str = "ensemble", threads: int = 1,
              chunk_size: int = 1000):
    """Simulate paths seeded ``base_seed + p``; returns (states, controls, increments).

    Arrays are ordered by path index regardless of ``threads``. States have
    shape (n_paths, k+1, d).
    """
    if method not in ("ensemble", "average"):
        raise InvalidInputError(f"unknown simulation method {method!r}")
    k, m = prob.steps_k, ens.input_dim

    def work(bounds):
        lo, hi = bounds
        dW = noise_batch(base_seed + lo, hi - lo, k, prob.t_f, m)
        if method == "ensemble":
            xs, us, _ = _euler_batch(ens, prob, controller, dW)
        else:
            xs, us = _average_batch(ens, prob, controller, dW)
        return np.swapaxes(xs, 0, 1), np.swapaxes(us, 0, 1), dW

    parts = _chunks(n_paths, chunk_size)
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, parts))
    else:
        results = [work(b) for b in parts]
    return tuple(np.concatenate(r, axis=0) for r in zip(*results))


def endpoint_stats(prob: BridgeProblem, states: np.ndarray, controls: np.ndarray) -> EndpointStats:
    """Summarize simulated paths; ``states`` is (P, k+1, d), ``controls`` (P, k, m)."""
    ends = states[:, -1]
    errors = np.linalg.norm(ends - prob.xf, axis=1)
    running, penalized = _costs(prob, controls, ends)
    qs = (0.5, 0.9, 0.99)
    quant = {q: float(v) for q, v in zip(qs, np.quantile(errors, qs))}
    mean_se = [_mean_se(ends[:, c]) for c in range(ends.shape[1])]
    mc, mc_se = _mean_se(running)
    mp, mp_se = _mean_se(penalized)
    return EndpointStats(
        n_paths=len(errors),
        quantiles=quant,
        mean_endpoint=np.array([a for a, _ in mean_se]),
        mean_endpoint_se=np.array([b for _, b in mean_se]),
        mean_cost=mc, mean_cost_se=mc_se,
        mean_penalized=mp, mean_penalized_se=mp_se,
        errors=errors, endpoints=ends,
    )


def verify_endpoint(ens: EnsembleSpec, prob: BridgeProblem, controller, n_paths: int,
                    base_seed: int = 0, method: str = "ensemble",
                    threads: int = 1) -> EndpointStats:
    """Monte Carlo statistics of the terminal miss ``|x(t_f) - x_f|``.

    Path ``p`` is driven by the noise seeded ``base_seed + p``.
    """
    if n_paths < 2:
        raise InvalidInputError("n_paths must be at least 2")
    xs, us, _ = run_paths(ens, prob, controller, n_paths, base_seed, method, threads)
    return endpoint_stats(prob, xs, us)


@dataclass(frozen=True)
class ConvergenceCell:
    penalty_a: float
    k: int
    mean: float
    std: float
    stderr: float
    n_paths: int


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    cells: list
    k_ref: int
    window: float
    samples: np.ndarray = field(repr=False)  # (len(a_list), len(k_list), n_paths)

    def table(self) -> np.ndarray:
        """Mean errors indexed ``[a_index, k_index]``."""
        return self.samples.mean(axis=2)

    def to_dict(self) -> dict:
        return {
            "k_ref": self.k_ref,
            "excluded_window": self.window,
            "cells": [vars(c) for c in self.cells],
        }


def _increasing(values, label):
    values = list(values)
    if not values:
        raise InvalidInputError(f"{label} must be non-empty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise InvalidInputError(f"{label} must be strictly increasing")
    return values


def convergence_study(ens: EnsembleSpec, prob: BridgeProblem, a_list, k_list, n_paths: int,
                      base_seed: int = 0, window_steps: int = 10,
                      threads: int = 1) -> ConvergenceReport:
    """Distance of the discrete controller to the continuous feedforward law.

    For each ``(a, k)`` estimates ``E sum_i |u_{a,k}(t_i) - u*(t_i)|^2 dt`` on
    the finest grid ``k_ref = max(k_list)``, using piecewise-constant
    interpolation of the coarse controls and the same Brownian paths for
    every cell. Grid times within ``window_steps * dt_ref`` of ``t_f`` are
    excluded. Every ``k`` must divide ``k_ref``.
    """
    a_list = _increasing(a_list, "a_list")
    k_list = _increasing([int(k) for k in k_list], "k_list")
    if n_paths < 2:
        raise InvalidInputError("n_paths must be at least 2")
    k_ref = k_list[-1]
    bad = [k for k in k_list if k_ref % k]
    if bad:
        raise InvalidInputError(f"k values {bad} do not divide the finest grid {k_ref}")
    ref_prob = prob.replace(steps_k=k_ref)
    ref = continuous_gains(ens, ref_prob)
    m = ens.input_dim
    dt_ref = prob.t_f / k_ref
    mask = (k_ref - np.arange(k_ref)) >= window_steps

    gains = {(a, k): synthesize_discrete(ens, prob.replace(penalty_a=a, steps_k=k))
             for a in a_list for k in k_list}

    def work(bounds):
        lo, hi = bounds
        dW = noise_batch(base_seed + lo, hi - lo, k_ref, prob.t_f, m)
        u_ref = ref.controls(dW)
        out = np.empty((len(a_list), len(k_list), hi - lo))
        for ia, a in enumerate(a_list):
            for ik, k in enumerate(k_list):
                r = k_ref // k
                dWc = dW.reshape(hi - lo, k, r, m).sum(axis=2)
                u = np.repeat(gains[(a, k)].controls(dWc), r, axis=1)
                diff = (u - u_ref)[:, mask]
                out[ia, ik] = np.einsum("pim,pim->p", diff, diff) * dt_ref
        return out

    parts = _chunks(n_paths, 500)
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, parts))
    else:
        results = [work(b) for b in parts]
    samples = np.concatenate(results, axis=2)
    cells = []
    for ia, a in enumerate(a_list):
        for ik, k in enumerate(k_list):
            mean, se = _mean_se(samples[ia, ik])
            cells.append(ConvergenceCell(float(a), int(k), mean, se * math.sqrt(n_paths),
                                         se, int(n_paths)))
    return ConvergenceReport(cells, k_ref, window_steps * dt_ref, samples)
