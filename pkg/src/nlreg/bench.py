"""Experiment harness: paired-seed evaluation of solvers over a fixed test set.

Every solver in a spec sees bit-identical (A, x*, eps, y) tuples; classical
solvers run per sample (parallel map with deterministic ordering, worker count
capped by NLREG_THREADS), learned solvers evaluate batched per layer. Results
are emitted as tidy CSV (experiment, solver, t, nmse_db) plus a final-NMSE
summary.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import classical, datagen
from .core import format_metric
from .funcs import get_function
from .nlista.model import forward_batch, load_checkpoint

# Reserved generation seed for the fixed 1000-sample test sets.
RESERVED_TEST_SEED = 1000003

LEARNED_IDS = ("nlista", "lista")


@dataclass(frozen=True)
class ExperimentSpec:
    """One benchmark setting: data distribution, solvers, and sizes."""

    name: str
    f_id: str
    solvers: tuple
    snr_db: Optional[float] = None
    cond_number: Optional[float] = None
    T: int = 16
    test_size: int = 1000
    m: int = 250
    n: int = 500
    nonzero_prob: float = 0.1
    seed: int = RESERVED_TEST_SEED
    lambda_overrides: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)  # solver id -> path or [paths]

    def __post_init__(self):
        for sid in self.solvers:
            if sid not in classical.SOLVERS and sid not in LEARNED_IDS:
                raise ValueError(f"unknown solver id {sid!r}")

    def generation_config(self) -> datagen.GenerationConfig:
        return datagen.GenerationConfig(
            m=self.m, n=self.n, nonzero_prob=self.nonzero_prob,
            snr_db=self.snr_db, cond_number=self.cond_number,
            seed=self.seed, batch=self.test_size)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    nmse: dict            # solver id -> (T+1,) array of NMSE dB per iteration

    def final(self) -> dict:
        return {sid: float(curve[-1]) for sid, curve in self.nmse.items()}


def _max_workers() -> int:
    env = os.environ.get("NLREG_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _classical_curve(sid, instances, f, config) -> np.ndarray:
    solve = classical.SOLVERS[sid]

    def one(problem):
        trace = solve(problem, f, config)
        diff = trace.iterates - problem.x_star[None, :]
        return np.sum(diff * diff, axis=1), float(problem.x_star @ problem.x_star)

    workers = _max_workers()
    if workers > 1 and len(instances) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, instances))
    else:
        results = [one(p) for p in instances]
    err_sq = np.sum([r[0] for r in results], axis=0)
    truth_sq = float(np.sum([r[1] for r in results]))
    return _ratio_to_db(err_sq / truth_sq)


def _ratio_to_db(ratios: np.ndarray) -> np.ndarray:
    out = np.full(len(ratios), float("-inf"))
    pos = ratios > 0
    out[pos] = 10.0 * np.log10(ratios[pos])
    return out


def _learned_curve(sid, spec, instances, chunk=200) -> np.ndarray:
    entry = spec.checkpoints.get(sid)
    if not entry:
        raise FileNotFoundError(_missing_checkpoint_msg(sid, spec, "<none configured>"))
    paths = [entry] if isinstance(entry, (str, Path)) else list(entry)
    A = instances[0].A
    Y = np.stack([p.y for p in instances], axis=1)
    Xs = np.stack([p.x_star for p in instances], axis=1)
    truth_sq = float(np.sum(Xs * Xs))
    ratio_acc = np.zeros(spec.T + 1)
    for path in paths:
        if not Path(path).exists():
            raise FileNotFoundError(_missing_checkpoint_msg(sid, spec, path))
        model = load_checkpoint(path)
        if model.T < spec.T:
            raise ValueError(f"checkpoint {path} has {model.T} layers, spec needs {spec.T}")
        if model.A.shape != A.shape or not np.array_equal(model.A, A):
            raise ValueError(
                f"checkpoint {path} was trained on a different dictionary than "
                f"spec {spec.name!r} (seed {spec.seed}, {spec.m}x{spec.n})")
        err_sq = np.zeros(spec.T + 1)
        for lo in range(0, Y.shape[1], chunk):
            _, tape = forward_batch(model, Y[:, lo:lo + chunk],
                                    n_layers=spec.T, keep_layer_outputs=True)
            for t, xt in enumerate(tape.xs):
                d = xt - Xs[:, lo:lo + chunk]
                err_sq[t] += float(np.sum(d * d))
        ratio_acc += err_sq / truth_sq
    return _ratio_to_db(ratio_acc / len(paths))


def _missing_checkpoint_msg(sid, spec, path) -> str:
    train_flags = f"--f '{spec.f_id}' --layers {spec.T} --m {spec.m} --n {spec.n} --seed {spec.seed}"
    if spec.snr_db is not None:
        train_flags += f" --snr-db {spec.snr_db:g}"
    if spec.cond_number is not None:
        train_flags += f" --cond {spec.cond_number:g}"
    if sid == "lista":
        train_flags += " --update-f identity"
    return (f"checkpoint for solver {sid!r} not found ({path}); train one with: "
            f"nlreg train {train_flags} --out <dir>")


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Evaluate every solver of the spec on the shared fixed test set."""
    if not spec.solvers:
        raise ValueError("spec lists no solvers")
    instances = datagen.generate_batch(spec.generation_config(), get_function(spec.f_id))
    nmse = {}
    for sid in spec.solvers:
        if sid in classical.SOLVERS:
            lam = spec.lambda_overrides.get(sid)
            if lam is None:
                lam = classical.default_lambda(sid, spec.f_id)
            if lam is None:
                raise ValueError(
                    f"no default lambda for ({sid}, {spec.f_id}); set lambda_overrides")
            config = classical.ClassicalConfig(lam=lam, T=spec.T)
            nmse[sid] = _classical_curve(sid, instances, get_function(spec.f_id), config)
        else:
            nmse[sid] = _learned_curve(sid, spec, instances)
    return ExperimentResult(spec=spec, nmse=nmse)


def results_csv_rows(result: ExperimentResult):
    rows = [("experiment", "solver", "t", "nmse_db")]
    for sid in result.spec.solvers:
        for t, v in enumerate(result.nmse[sid]):
            rows.append((result.spec.name, sid, str(t), format_metric(float(v))))
    return rows


def summary_csv_rows(result: ExperimentResult):
    rows = [("experiment", "solver", "final_nmse_db")]
    for sid in result.spec.solvers:
        rows.append((result.spec.name, sid, format_metric(float(result.nmse[sid][-1]))))
    return rows


def emit_plot_data(result: ExperimentResult, style: str):
    """Plot-ready tidy rows: per-iteration curves or a final-NMSE bar."""
    if not result.nmse:
        raise ValueError("empty results: nothing to plot")
    if style == "per_iteration_curves":
        rows = [("solver", "t", "nmse_db")]
        for sid in result.spec.solvers:
            for t, v in enumerate(result.nmse[sid]):
                rows.append((sid, str(t), format_metric(float(v))))
        return rows
    if style == "final_bar":
        rows = [("solver", "final_nmse_db")]
        for sid in result.spec.solvers:
            rows.append((sid, format_metric(float(result.nmse[sid][-1]))))
        return rows
    raise ValueError(f"unknown plot style {style!r}")


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        for row in rows:
            fh.write(",".join(row) + "\n")


_ALL_SOLVERS = ("sparsa", "fista", "fpca", "stela", "lista", "nlista")


def canonical_specs(name: str) -> list[ExperimentSpec]:
    """Shipped one-command experiment definitions (fig2a/fig2b/fig2c/table1)."""
    if name == "fig2a":
        return [ExperimentSpec(name="fig2a", f_id="2x+cos(x)", solvers=_ALL_SOLVERS)]
    if name == "fig2b":
        return [ExperimentSpec(name="fig2b", f_id="2x+cos(x)", solvers=_ALL_SOLVERS,
                               snr_db=30.0)]
    if name == "fig2c":
        return [ExperimentSpec(name="fig2c", f_id="2x+cos(x)", solvers=_ALL_SOLVERS,
                               cond_number=50.0)]
    if name == "table1":
        return [ExperimentSpec(name=f"table1-{fid}", f_id=fid, solvers=_ALL_SOLVERS)
                for fid in ("10x+cos(2x)", "10x+cos(3x)", "10x+cos(4x)")]
    raise KeyError(f"unknown canonical spec {name!r}; have fig2a, fig2b, fig2c, table1")


def with_overrides(spec: ExperimentSpec, **kwargs) -> ExperimentSpec:
    return replace(spec, **{k: v for k, v in kwargs.items() if v is not None})
