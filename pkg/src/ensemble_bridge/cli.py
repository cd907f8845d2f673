"""Command-line front end.

Usage::

    ensemble-bridge check      --config run.json
    ensemble-bridge synthesize --config run.json --out out/ [--dump-gains]
    ensemble-bridge simulate   --config run.json --out out/ --paths 100 --seed 7
    ensemble-bridge study      --config run.json --out out/

Exit codes: 0 success, 1 input error, 2 singular averaged Gramian,
3 numerical divergence.

Config (JSON)::

    {
      "ensemble": {"family": "brownian", "params": {"dim": 1}, "n_nodes": 16},
      "problem": {"x0": [0], "xf": [0], "t_f": 1.0, "eps": 1.0,
                  "penalty_a": 1e6, "steps_k": 256},
      "controller": "discrete",
      "simulation": {"n_paths": 1, "base_seed": 0, "method": "ensemble"},
      "study": {"a_list": [1e2, 1e6], "k_list": [64, 512],
                "n_paths": 1000, "base_seed": 0},
      "output_dir": "out"
    }

``ensemble`` may instead hold ``{"nodes": [...]}`` or ``{"file": "ens.json"}``;
a top-level ``"ensemble_file"`` is also accepted. Only ``problem.t_f`` is
required; other fields default to the values shown (``x0``/``xf`` default
to zero vectors).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bridge import BridgeProblem, MarkovBridge, ZeroControl, continuous_gains, synthesize_discrete
from .ensemble import EnsembleSpec, ensemble_from_dict, is_brownian, load_ensemble
from .errors import ControllabilityError, DivergenceError, InvalidInputError
from .gramian import DEFAULT_THRESHOLD, check_avg_controllability, deterministic_steer
from .sim import convergence_study, endpoint_stats, run_paths

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_DIVERGED = 0, 1, 2, 3
CONTROLLERS = ("discrete", "continuous", "markov", "deterministic", "none")


@dataclass
class RunConfig:
    ensemble: EnsembleSpec
    problem: BridgeProblem
    controller: str = "discrete"
    convention: str = "optimal"
    threshold: float = DEFAULT_THRESHOLD
    n_paths: int = 1
    base_seed: int = 0
    method: str = "ensemble"
    study: dict = field(default_factory=dict)
    output_dir: str = "out"


def _get(block: dict, key: str, where: str, default=None, required=False):
    if key not in block:
        if required:
            raise InvalidInputError(f"{where}.{key}: required field missing")
        return default
    return block[key]


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidInputError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _vector(value, d: int, where: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float)) if value is not None else np.zeros(d)
    if arr.ndim != 1 or arr.size != d:
        raise InvalidInputError(f"{where}: expected a {d}-vector")
    return arr


def parse_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a decoded JSON config and build the run objects."""
    if not isinstance(doc, dict):
        raise InvalidInputError("config: expected a JSON object")
    has_inline, has_file = "ensemble" in doc, "ensemble_file" in doc
    if has_inline == has_file:
        raise InvalidInputError("config: give exactly one of 'ensemble' or 'ensemble_file'")
    if has_file:
        path = Path(doc["ensemble_file"])
        ens = load_ensemble(path if base_dir is None or path.is_absolute() else base_dir / path)
    else:
        ens = ensemble_from_dict(doc["ensemble"], base_dir)

    pb = _get(doc, "problem", "config", required=True)
    if not isinstance(pb, dict):
        raise InvalidInputError("problem: expected a JSON object")
    d = ens.state_dim
    steps = _get(pb, "steps_k", "problem", 256)
    if isinstance(steps, bool) or not isinstance(steps, int):
        raise InvalidInputError(f"problem.steps_k: expected an integer, got {steps!r}")
    prob = BridgeProblem(
        x0=_vector(_get(pb, "x0", "problem"), d, "problem.x0"),
        xf=_vector(_get(pb, "xf", "problem"), d, "problem.xf"),
        t_f=_number(_get(pb, "t_f", "problem", required=True), "problem.t_f"),
        eps=_number(_get(pb, "eps", "problem", 1.0), "problem.eps"),
        penalty_a=_number(_get(pb, "penalty_a", "problem", 1e6), "problem.penalty_a"),
        steps_k=steps,
    )

    controller = _get(doc, "controller", "config", "discrete")
    if controller not in CONTROLLERS:
        raise InvalidInputError(
            f"controller: must be one of {', '.join(CONTROLLERS)}, got {controller!r}")
    if controller == "markov" and not is_brownian(ens):
        raise InvalidInputError("controller: 'markov' is only valid for the Brownian family")

    sim = _get(doc, "simulation", "config", {})
    study = _get(doc, "study", "config", {})
    if not isinstance(sim, dict) or not isinstance(study, dict):
        raise InvalidInputError("simulation/study: expected JSON objects")
    return RunConfig(
        ensemble=ens,
        problem=prob,
        controller=controller,
        convention=str(_get(doc, "convention", "config", "optimal")),
        threshold=_number(_get(doc, "threshold", "config", DEFAULT_THRESHOLD), "threshold"),
        n_paths=int(_get(sim, "n_paths", "simulation", 1)),
        base_seed=int(_get(sim, "base_seed", "simulation", 0)),
        method=str(_get(sim, "method", "simulation", "ensemble")),
        study=study,
        output_dir=str(_get(doc, "output_dir", "config", "out")),
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(
            f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(doc, base_dir=path.parent)


# ---------------------------------------------------------------------------
# output helpers

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def _fmt(x) -> str:
    return repr(float(x) + 0.0)  # normalizes -0.0


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def trajectories_csv(prob: BridgeProblem, states, controls, increments,
                     path_ids, long_format: bool = True) -> str:
    """Averaged-process trajectories as CSV text.

    Columns are ``path_id,t,x_1..x_d,u_1..u_m,w_1..w_m`` (``path_id`` only in
    long format); ``u`` is blank on the terminal row.
    """
    d, m = states.shape[2], controls.shape[2]
    header = (["path_id"] if long_format else []) + ["t"] + [f"x_{i + 1}" for i in range(d)] \
        + [f"u_{i + 1}" for i in range(m)] + [f"w_{i + 1}" for i in range(m)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    grid = prob.grid
    k = prob.steps_k
    for p, pid in enumerate(path_ids):
        W = np.zeros((k + 1, m))
        np.cumsum(increments[p], axis=0, out=W[1:])
        for i in range(k + 1):
            u = [_fmt(v) for v in controls[p, i]] if i < k else [""] * m
            row = ([str(pid)] if long_format else []) + [_fmt(grid[i])] \
                + [_fmt(v) for v in states[p, i]] + u + [_fmt(v) for v in W[i]]
            writer.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands

def _require_controllable(cfg: RunConfig) -> dict:
    report = check_avg_controllability(cfg.ensemble, cfg.problem.t_f, cfg.threshold)
    if not report.invertible:
        raise ControllabilityError("ensemble is not averaged controllable", report=report)
    return report.to_dict()


def build_controller(cfg: RunConfig):
    ens, prob = cfg.ensemble, cfg.problem
    if cfg.controller == "none":
        return ZeroControl(ens.input_dim)
    if cfg.controller == "markov":
        return MarkovBridge(ens)
    _require_controllable(cfg)
    if cfg.controller == "discrete":
        return synthesize_discrete(ens, prob, cfg.convention)
    if cfg.controller == "continuous":
        return continuous_gains(ens, prob, threshold=cfg.threshold)
    return deterministic_steer(ens, prob.x0, prob.xf, prob.t_f, threshold=cfg.threshold)


def cmd_check(cfg: RunConfig, args) -> int:
    report = check_avg_controllability(cfg.ensemble, cfg.problem.t_f, cfg.threshold)
    text = dumps(report.to_dict())
    sys.stdout.write(text)
    if args.out:
        _write(Path(args.out) / "check.json", text)
    return EXIT_OK if report.invertible else EXIT_INFEASIBLE


def cmd_synthesize(cfg: RunConfig, args) -> int:
    report = _require_controllable(cfg)
    gains = synthesize_discrete(cfg.ensemble, cfg.problem, cfg.convention)
    out = Path(args.out or cfg.output_dir)
    meta = gains.summary()
    meta["controllability"] = report
    _write(out / "gains.json", dumps(meta))
    if args.dump_gains:
        K = gains.noise_gains()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["i", "j", "row", "col", "value"])
        m = K.shape[2]
        for i in range(gains.k):
            for j in range(i):
                for r in range(m):
                    for c in range(m):
                        writer.writerow([i, j, r, c, _fmt(K[i, j, r, c])])
        _write(out / "gains.csv", buf.getvalue())
    sys.stdout.write(dumps({"gains": str(out / "gains.json"), "k": gains.k,
                            "n_gain_blocks": gains.n_gain_blocks}))
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    n_paths = args.paths if args.paths is not None else cfg.n_paths
    seed = args.seed if args.seed is not None else cfg.base_seed
    if n_paths < 1:
        raise InvalidInputError("simulation.n_paths: must be at least 1")
    controller = build_controller(cfg)
    states, controls, dW = run_paths(cfg.ensemble, cfg.problem, controller, n_paths,
                                     seed, cfg.method, args.threads)
    out = Path(args.out or cfg.output_dir)
    ids = list(range(n_paths))
    if args.per_path:
        for p in ids:
            _write(out / f"path_{p:05d}.csv",
                   trajectories_csv(cfg.problem, states[p:p + 1], controls[p:p + 1],
                                    dW[p:p + 1], [p], long_format=False))
    else:
        _write(out / "trajectories.csv",
               trajectories_csv(cfg.problem, states, controls, dW, ids))
    stats = endpoint_stats(cfg.problem, states, controls)
    summary = {"controller": cfg.controller, "method": cfg.method, "base_seed": seed,
               "steps_k": cfg.problem.steps_k, **stats.to_dict(),
               "endpoint_error": float(np.max(stats.errors))}
    text = dumps(summary)
    _write(out / "summary.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_study(cfg: RunConfig, args) -> int:
    st = cfg.study
    a_list = st.get("a_list", [])
    k_list = st.get("k_list", [])
    if not isinstance(a_list, list) or not a_list:
        raise InvalidInputError("study.a_list: must be a non-empty list")
    if not isinstance(k_list, list) or not k_list:
        raise InvalidInputError("study.k_list: must be a non-empty list")
    n_paths = args.paths if args.paths is not None else int(st.get("n_paths", 1000))
    seed = args.seed if args.seed is not None else int(st.get("base_seed", 0))
    _require_controllable(cfg)
    report = convergence_study(cfg.ensemble, cfg.problem, a_list, k_list, n_paths,
                               base_seed=seed, threads=args.threads)
    out = Path(args.out or cfg.output_dir)
    text = dumps(report.to_dict())
    _write(out / "study.json", text)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["penalty_a", "k", "mean", "std", "stderr", "n_paths"])
    for c in report.cells:
        writer.writerow([_fmt(c.penalty_a), c.k, _fmt(c.mean), _fmt(c.std), _fmt(c.stderr),
                         c.n_paths])
    _write(out / "study.csv", buf.getvalue())
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"check": cmd_check, "synthesize": cmd_synthesize,
            "simulate": cmd_simulate, "study": cmd_study}


def _threads(value) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("ENSEMBLE_BRIDGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidInputError(f"ENSEMBLE_BRIDGE_THREADS: not an integer: {env!r}") from None
    return 1


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors (exit 1), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ensemble-bridge",
                     description="Stochastic bridges for averaged ensembles.")
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (JSON)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="base seed (overrides config)")
    common.add_argument("--paths", type=int, help="number of paths (overrides config)")
    common.add_argument("--threads", type=int, help="worker threads "
                        "(default: $ENSEMBLE_BRIDGE_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("check", parents=[common], help="averaged controllability report")
    syn = sub.add_parser("synthesize", parents=[common], help="discrete bridge gains")
    syn.add_argument("--dump-gains", action="store_true", help="also write gains.csv")
    sim = sub.add_parser("simulate", parents=[common], help="simulate controlled paths")
    sim.add_argument("--per-path", action="store_true", help="one CSV file per path")
    sub.add_parser("study", parents=[common], help="double-limit convergence study")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    try:
        args.threads = _threads(args.threads)
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ControllabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.report is not None:
            sys.stdout.write(dumps(exc.report.to_dict()))
        return EXIT_INFEASIBLE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
