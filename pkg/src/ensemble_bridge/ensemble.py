"""Parameterized linear ensembles and their averaged impulse response.

An ensemble is stored as a quadrature of the parameter measure: each node
carries a parameter value ``theta``, a nonnegative weight and the system
matrices ``A(theta)`` (d x d) and ``B(theta)`` (d x m). Every averaged
quantity in the package is a weighted sum over these nodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.linalg import expm

from .errors import InvalidInputError

__all__ = [
    "EnsembleSpec",
    "MatrixFamilySample",
    "mat_exp",
    "build_uniform_ensemble",
    "gauss_legendre_unit",
    "phi",
    "phi_lags",
    "averaged_flow",
    "FAMILIES",
    "make_family",
    "is_brownian",
    "ensemble_from_dict",
    "load_ensemble",
]

DEFAULT_NODES = 16


def mat_exp(A, t=1.0):
    """Matrix exponential ``exp(A * t)``.

    Uses Pade scaling-and-squaring (``scipy.linalg.expm``). ``A`` may carry
    leading batch dimensions.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise InvalidInputError(f"mat_exp needs square matrices, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError("mat_exp: matrix has non-finite entries")
    t = float(t)
    if not np.isfinite(t):
        raise InvalidInputError("mat_exp: time must be finite")
    return expm(A * t)


def _expm_grid(A, lags):
    """exp(A_n * s) for every lag s and node n, shape (L, n, d, d)."""
    lags = np.asarray(lags, dtype=float).reshape(-1)
    if lags.size == 0:
        return np.zeros((0,) + A.shape)
    return expm(A[None, :, :, :] * lags[:, None, None, None])


@dataclass(frozen=True)
class MatrixFamilySample:
    """One sample ``Phi(t_f, tau)`` of the averaged impulse response."""

    t: float
    value: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.value)):
            raise InvalidInputError("MatrixFamilySample value must be finite")


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    """Quadrature discretization of a parameterized family of linear systems.

    Attributes
    ----------
    thetas : ndarray, shape (n,)
        Strictly increasing parameter nodes.
    weights : ndarray, shape (n,)
        Nonnegative weights summing to one.
    A : ndarray, shape (n, d, d)
    B : ndarray, shape (n, d, m)
    name : str
        Free-form label (family name for built-ins).
    """

    thetas: np.ndarray
    weights: np.ndarray
    A: np.ndarray
    B: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        thetas = np.atleast_1d(np.asarray(self.thetas, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        n = thetas.size
        if n < 1:
            raise InvalidInputError("ensemble needs at least one node")
        if weights.shape != (n,):
            raise InvalidInputError("weights must have one entry per node")
        if A.ndim != 3 or A.shape[0] != n or A.shape[1] != A.shape[2]:
            raise InvalidInputError(f"A must have shape (n, d, d); got {A.shape}")
        if B.ndim != 3 or B.shape[0] != n or B.shape[1] != A.shape[1]:
            raise InvalidInputError(f"B must have shape (n, d, m); got {B.shape}")
        if B.shape[2] < 1:
            raise InvalidInputError("input dimension must be positive")
        for label, arr in (("thetas", thetas), ("weights", weights), ("A", A), ("B", B)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{label} has non-finite entries")
        if np.any(weights < 0):
            raise InvalidInputError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"weights sum to {weights.sum()!r}, expected 1")
        if n > 1 and np.any(np.diff(thetas) <= 0):
            raise InvalidInputError("node thetas must be strictly increasing")
        for arr in (thetas, weights, A, B):
            arr.setflags(write=False)
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def input_dim(self) -> int:
        return self.B.shape[2]

    @property
    def n_nodes(self) -> int:
        return self.thetas.size

    @property
    def nodes(self):
        """List of ``(theta, weight, A, B)`` tuples."""
        return [(float(th), float(w), a, b)
                for th, w, a, b in zip(self.thetas, self.weights, self.A, self.B)]

    def mean_B(self) -> np.ndarray:
        return np.einsum("n,nij->ij", self.weights, self.B)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "nodes": [
                {"theta": th, "weight": w, "A": a.tolist(), "B": b.tolist()}
                for th, w, a, b in self.nodes
            ],
        }


def gauss_legendre_unit(n: int):
    """Gauss-Legendre nodes and weights mapped to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def build_uniform_ensemble(family: Callable, n_nodes: int = DEFAULT_NODES,
                           name: str = "custom") -> EnsembleSpec:
    """Discretize ``theta ~ Uniform[0, 1]`` with Gauss-Legendre nodes.

    ``family(theta)`` must return the pair ``(A, B)``.
    """
    if int(n_nodes) != n_nodes or n_nodes < 1:
        raise InvalidInputError(f"n_nodes must be a positive integer, got {n_nodes!r}")
    thetas, weights = gauss_legendre_unit(int(n_nodes))
    # exact renormalization keeps the weight-sum invariant at machine precision
    weights = weights / weights.sum()
    As, Bs = [], []
    for th in thetas:
        a, b = family(float(th))
        As.append(np.atleast_2d(np.asarray(a, dtype=float)))
        b = np.asarray(b, dtype=float)
        Bs.append(b.reshape(-1, 1) if b.ndim == 1 else np.atleast_2d(b))
    return EnsembleSpec(thetas, weights, np.stack(As), np.stack(Bs), name=name)


def averaged_flow(ens: EnsembleSpec, t):
    """Weighted average of the node flows, ``sum_n w_n exp(A_n t)``.

    Scalar ``t`` gives a (d, d) matrix; an array of times gives (L, d, d).
    """
    t_arr = np.asarray(t, dtype=float)
    E = _expm_grid(ens.A, t_arr.reshape(-1))
    out = np.einsum("n,lnij->lij", ens.weights, E)
    return out[0] if t_arr.ndim == 0 else out


def phi_lags(ens: EnsembleSpec, lags) -> np.ndarray:
    """Averaged impulse response for each lag ``s = t_f - tau``, shape (L, d, m)."""
    lags = np.asarray(lags, dtype=float).reshape(-1)
    E = _expm_grid(ens.A, lags)
    return np.einsum("n,lnij,njk->lik", ens.weights, E, ens.B)


def phi(ens: EnsembleSpec, t_f: float, tau: float) -> np.ndarray:
    """Averaged impulse response ``sum_n w_n exp(A_n (t_f - tau)) B_n``."""
    if not (0.0 <= tau <= t_f):
        raise InvalidInputError(f"phi requires 0 <= tau <= t_f, got tau={tau}, t_f={t_f}")
    return phi_lags(ens, [t_f - tau])[0]


# ---------------------------------------------------------------------------
# built-in families

def _brownian(dim: int = 1):
    dim = int(dim)
    return lambda th: (np.zeros((dim, dim)), np.eye(dim))


def _scalar_theta_drift(scale: float = 1.0, offset: float = 0.0):
    return lambda th: ([[offset + scale * th]], [[1.0]])


def _shifted_drift(dim: int = 1, drift: float = -1.0, spread: float = 1.0):
    dim = int(dim)
    return lambda th: ((drift + spread * (th - 0.5)) * np.eye(dim), np.eye(dim))


def _oscillator(omega: float = 2.0, spread: float = 0.5, damping: float = 0.1):
    def fam(th):
        w = omega * (1.0 + spread * th)
        return [[0.0, w], [-w, -damping]], [[0.0], [1.0]]
    return fam


_A0 = np.array([[-0.5, 1.0, 0.0], [0.0, -0.2, 1.0], [0.0, 0.0, -0.1]])
_A1 = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
_B0 = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
_B1 = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.0]])


def _coupled_3x2(spread: float = 1.0):
    # _A0 and _A1 do not commute, so exp(A(theta) t) is not a product of exponentials
    return lambda th: (_A0 + spread * th * _A1, _B0 + th * _B1)


def _rank_deficient():
    return lambda th: (np.zeros((2, 2)), [[1.0], [0.0]])


FAMILIES: dict[str, Callable] = {
    "brownian": _brownian,
    "scalar_theta_drift": _scalar_theta_drift,
    "shifted_drift": _shifted_drift,
    "oscillator": _oscillator,
    "coupled_3x2": _coupled_3x2,
    "rank_deficient": _rank_deficient,
}


def make_family(name: str, n_nodes: int = DEFAULT_NODES, **params) -> EnsembleSpec:
    """Build a named built-in family on Gauss-Legendre nodes."""
    try:
        factory = FAMILIES[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown family {name!r}; known: {', '.join(sorted(FAMILIES))}") from None
    try:
        fam = factory(**params)
    except TypeError as exc:
        raise InvalidInputError(f"bad parameters for family {name!r}: {exc}") from None
    return build_uniform_ensemble(fam, n_nodes, name=name)


def is_brownian(ens: EnsembleSpec) -> bool:
    """True when every node has ``A = 0`` and ``B = I``."""
    d, m = ens.state_dim, ens.input_dim
    return d == m and not np.any(ens.A) and np.array_equal(
        ens.B, np.broadcast_to(np.eye(d), ens.B.shape))


def _as_matrix(value, rows: int | None, cols: int | None, label: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 1 and rows and cols and arr.size == rows * cols:
        return arr.reshape(rows, cols)  # row-major flat array
    if arr.ndim == 0 and (rows, cols) in ((1, 1), (None, None)):
        return arr.reshape(1, 1)
    raise InvalidInputError(f"{label}: cannot interpret value of shape {arr.shape} as a matrix")


def ensemble_from_dict(doc: Mapping, base_dir: str | Path | None = None) -> EnsembleSpec:
    """Build an ensemble from its JSON description.

    Accepted forms::

        {"nodes": [{"theta": .., "weight": .., "A": [[..]], "B": [[..]]}, ...]}
        {"family": "scalar_theta_drift", "params": {...}, "n_nodes": 16}
        {"file": "path/to/ensemble.json"}

    Matrices are nested row lists, or flat row-major lists when
    ``state_dim`` / ``input_dim`` are given alongside ``nodes``.
    """
    if not isinstance(doc, Mapping):
        raise InvalidInputError("ensemble: expected a JSON object")
    sources = [key for key in ("nodes", "family", "file") if key in doc]
    if len(sources) != 1:
        raise InvalidInputError(
            "ensemble: exactly one of 'nodes', 'family' or 'file' must be given")
    if "file" in doc:
        path = Path(doc["file"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return load_ensemble(path)
    if "family" in doc:
        n_nodes = doc.get("n_nodes", DEFAULT_NODES)
        params = doc.get("params", {})
        if not isinstance(params, Mapping):
            raise InvalidInputError("ensemble.params: expected a JSON object")
        return make_family(str(doc["family"]), n_nodes, **params)

    nodes = doc["nodes"]
    if not isinstance(nodes, list) or not nodes:
        raise InvalidInputError("ensemble.nodes: expected a non-empty list")
    d = doc.get("state_dim")
    m = doc.get("input_dim")
    thetas, weights, As, Bs = [], [], [], []
    for idx, node in enumerate(nodes):
        try:
            thetas.append(float(node["theta"]))
            weights.append(float(node["weight"]))
            As.append(_as_matrix(node["A"], d, d, f"ensemble.nodes[{idx}].A"))
            Bs.append(_as_matrix(node["B"], d, m, f"ensemble.nodes[{idx}].B"))
        except KeyError as exc:
            raise InvalidInputError(f"ensemble.nodes[{idx}]: missing field {exc}") from None
    shapes = {(a.shape, b.shape) for a, b in zip(As, Bs)}
    if len(shapes) != 1:
        raise InvalidInputError("ensemble.nodes: all A and B must share their shapes")
    return EnsembleSpec(np.array(thetas), np.array(weights), np.stack(As), np.stack(Bs),
                        name=str(doc.get("name", "custom")))


def load_ensemble(path: str | Path) -> EnsembleSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise InvalidInputError(f"cannot read ensemble file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return ensemble_from_dict(doc, base_dir=path.parent)
