"""Baseline iterative shrinkage-thresholding solvers.

All four share the spectral step-size routine (``bb_step``) and, except for
the pure line-search variant, the nonmonotone acceptance test

    phi(x_new) <= max_{max(t-M,0) <= j <= t} phi(x_j) - xi*(alpha/2)*||x_new - x_t||^2

with phi(x) = L(x) + lam*||x||_1. Every solver starts from x = 0 and records
the accepted iterate after each of T outer iterations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import (NonlinearScalarFunction, ProblemInstance, SolverTrace,
                   format_metric, loss, loss_gradient, nmse_db, objective,
                   soft_threshold)

SOLVER_IDS = ("sparsa", "fista", "fpca", "stela")

# Regularization weights from the experiment protocol, per (solver, function).
# FISTA is only specified for 2x+cos(x); the 10x+cos(kx) entries reuse the
# SpaRSA values and can be overridden (see README).
DEFAULT_LAMBDA = {
    "sparsa": {"2x+cos(x)": 0.5, "10x+cos(2x)": 11.0, "10x+cos(3x)": 12.0, "10x+cos(4x)": 12.0},
    "fista": {"2x+cos(x)": 0.4, "10x+cos(2x)": 11.0, "10x+cos(3x)": 12.0, "10x+cos(4x)": 12.0},
    "fpca": {"2x+cos(x)": 0.5, "10x+cos(2x)": 8.0, "10x+cos(3x)": 9.0, "10x+cos(4x)": 10.0},
    "stela": {"2x+cos(x)": 0.5, "10x+cos(2x)": 11.0, "10x+cos(3x)": 13.0, "10x+cos(4x)": 14.0},
}


def default_lambda(solver_id: str, f_id: str):
    """Table value or None when the pair has no published default."""
    return DEFAULT_LAMBDA.get(solver_id, {}).get(f_id)


@dataclass
class ClassicalConfig:
    """Hyperparameters shared by the classical solvers.

    bb_variant selects the spectral curvature estimate: "bb1" (default) is
    the classical (d.g)/(d.d) Rayleigh quotient, which reproduces the
    published solver accuracy; "first" ((d.g)/(g.g)) and "second"
    ((g.g)/(d.g)) are the two quotients as printed in the source algorithm —
    the first is dimensionally a step size rather than a curvature and makes
    every solver markedly worse (see README).
    """

    lam: float
    eta_factor: float = 2.0      # line-search multiplier, > 1
    xi: float = 1e-5             # sufficient-decrease constant
    M: int = 0                   # nonmonotone memory
    T: int = 16                  # outer iterations
    fpca_gamma0: float = 1e-2    # continuation trigger radius
    stela_beta: float = 0.5      # step-size backtracking factor
    bb_variant: str = "bb1"
    # True: FISTA's backtracking recomputes from the momentum point z (keeps
    # acceleration; several dB better at 16 iterations). False follows the
    # source algorithm's printed body, which restarts from x^(t).
    fista_linesearch_at_z: bool = True
    stall_cap: int = 10 ** 6

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.eta_factor <= 1:
            raise ValueError("eta_factor must exceed 1")
        if self.xi <= 0 or self.M < 0 or self.T < 1:
            raise ValueError("invalid xi/M/T")
        if not 0.0 < self.stela_beta < 1.0:
            raise ValueError("stela_beta must lie in (0, 1)")
        if self.bb_variant not in ("bb1", "first", "second"):
            raise ValueError(f"unknown bb_variant {self.bb_variant!r}")


def bb_step(t: int, x_t, x_prev, grad_t, grad_prev, variant: str = "bb1") -> float:
    """Barzilai-Borwein spectral curvature estimate alpha.

    t == 0 returns 1. Otherwise with d = x_t - x_prev and g = grad_t -
    grad_prev: "bb1" returns (d.g)/(d.d) (the classical curvature Rayleigh
    quotient); "first" returns (d.g)/(g.g) and "second" (g.g)/(d.g) as
    printed in the source algorithm. Nonpositive or non-finite quotients fall
    back to 1 (the line search then enforces sufficient decrease).
    """
    if t == 0:
        return 1.0
    d = np.asarray(x_t, dtype=float) - np.asarray(x_prev, dtype=float)
    g = np.asarray(grad_t, dtype=float) - np.asarray(grad_prev, dtype=float)
    dg = float(d @ g)
    if variant == "bb1":
        num, den = dg, float(d @ d)
    elif variant == "first":
        num, den = dg, float(g @ g)
    else:
        num, den = float(g @ g), dg
    if den == 0.0:
        return 1.0
    alpha = num / den
    if not np.isfinite(alpha) or alpha <= 0.0:
        return 1.0
    return alpha


def _accept_bound(phis, t, M, xi, alpha, step_sq):
    window = phis[max(t - M, 0): t + 1]
    dec = 0.0 if step_sq == 0.0 else xi * (alpha / 2.0) * step_sq
    return max(window) - dec


def _sparsa_engine(problem, f, config, *, continuation: bool, solver_id: str) -> SolverTrace:
    n = problem.n
    x = np.zeros(n)
    lam = config.lam
    gamma_cont = config.fpca_gamma0
    phis = [objective(x, problem, f, lam)]
    grad = loss_gradient(x, problem, f)
    x_prev = grad_prev = None
    iterates = [x.copy()]
    wall, alphas, lams, stalled = [], [], [], []
    for t in range(config.T):
        t0 = time.perf_counter()
        alpha = bb_step(t, x, x_prev, grad, grad_prev, config.bb_variant)
        doublings = 0
        while True:
            cand = soft_threshold(x - grad / alpha, lam / alpha)
            step_sq = float(np.sum((cand - x) ** 2))
            phi_c = objective(cand, problem, f, lam)
            # the negated comparison also rejects NaN objectives
            if phi_c <= _accept_bound(phis, t, config.M, config.xi, alpha, step_sq):
                break
            alpha *= config.eta_factor
            doublings += 1
            if doublings > config.stall_cap:
                cand, phi_c = x.copy(), phis[-1]
                stalled.append(t)
                break
        x_prev, grad_prev = x, grad
        x = cand
        phis.append(phi_c)
        grad = loss_gradient(x, problem, f)
        alphas.append(alpha)
        if continuation:
            lams.append(lam)
            if float(np.linalg.norm(x - x_prev)) < gamma_cont:
                lam *= 0.5
                gamma_cont *= 0.5
        iterates.append(x.copy())
        wall.append(time.perf_counter() - t0)
    hp = {"lam": config.lam, "eta_factor": config.eta_factor, "xi": config.xi,
          "M": config.M, "T": config.T, "bb_variant": config.bb_variant,
          "alphas": alphas, "stalled": stalled}
    if continuation:
        hp["lambdas"] = lams
        hp["fpca_gamma0"] = config.fpca_gamma0
    return SolverTrace(np.array(iterates), np.array(wall), solver_id, hp)


def sparsa_solve(problem: ProblemInstance, f: NonlinearScalarFunction,
                 config: ClassicalConfig) -> SolverTrace:
    """SpaRSA: BB step, proximal update, nonmonotone backtracking on alpha."""
    return _sparsa_engine(problem, f, config, continuation=False, solver_id="sparsa")


def fpca_solve(problem: ProblemInstance, f: NonlinearScalarFunction,
               config: ClassicalConfig) -> SolverTrace:
    """Fixed-point continuation: SpaRSA inner step; after acceptance, when
    ||x_new - x_t|| < gamma both lam and gamma are halved."""
    return _sparsa_engine(problem, f, config, continuation=True, solver_id="fpca")


def fista_solve(problem: ProblemInstance, f: NonlinearScalarFunction,
                config: ClassicalConfig) -> SolverTrace:
    """FISTA with BB curvature and the nonmonotone acceptance test.

    The first candidate of iteration t steps from the momentum point z^(t+1).
    By default rejected candidates also recompute from z (keeping the
    acceleration); ``fista_linesearch_at_z=False`` follows the source
    algorithm's printed while-body, which restarts from x^(t) and measurably
    degrades the 16-iteration accuracy.
    """
    n = problem.n
    x = np.zeros(n)
    z = x.copy()           # z^(1) = x^(0)
    k = 1.0                # k^(0)
    lam = config.lam
    phis = [objective(x, problem, f, lam)]
    grad_x = loss_gradient(x, problem, f)
    x_prev = grad_prev = None
    iterates = [x.copy()]
    wall, alphas, ks, stalled = [], [], [k], []
    for t in range(config.T):
        t0 = time.perf_counter()
        alpha = bb_step(t, x, x_prev, grad_x, grad_prev, config.bb_variant)
        grad_z = loss_gradient(z, problem, f)
        base, base_grad = z, grad_z
        first_try = True
        doublings = 0
        while True:
            cand = soft_threshold(base - base_grad / alpha, lam / alpha)
            step_sq = float(np.sum((cand - x) ** 2))
            phi_c = objective(cand, problem, f, lam)
            if phi_c <= _accept_bound(phis, t, config.M, config.xi, alpha, step_sq):
                break
            alpha *= config.eta_factor
            doublings += 1
            if first_try and not config.fista_linesearch_at_z:
                base, base_grad = x, grad_x
                first_try = False
            if doublings > config.stall_cap:
                cand, phi_c = x.copy(), phis[-1]
                stalled.append(t)
                break
        k_next = (1.0 + np.sqrt(1.0 + 4.0 * k * k)) / 2.0
        z = cand + ((k - 1.0) / k_next) * (cand - x)
        x_prev, grad_prev = x, grad_x
        x = cand
        phis.append(phi_c)
        grad_x = loss_gradient(x, problem, f)
        k = k_next
        alphas.append(alpha)
        ks.append(k)
        iterates.append(x.copy())
        wall.append(time.perf_counter() - t0)
    hp = {"lam": lam, "eta_factor": config.eta_factor, "xi": config.xi,
          "M": config.M, "T": config.T, "bb_variant": config.bb_variant,
          "alphas": alphas, "momentum_k": ks, "stalled": stalled,
          "linesearch_at_z": config.fista_linesearch_at_z}
    return SolverTrace(np.array(iterates), np.array(wall), "fista", hp)


def stela_solve(problem: ProblemInstance, f: NonlinearScalarFunction,
                config: ClassicalConfig) -> SolverTrace:
    """Soft-thresholding direction plus exact-descent backtracking on the step
    length; gamma resets to 1 every iteration."""
    n = problem.n
    x = np.zeros(n)
    lam = config.lam
    l1_x = 0.0
    L_x = loss(x, problem, f)
    phis = [L_x + lam * l1_x]
    grad = loss_gradient(x, problem, f)
    x_prev = grad_prev = None
    iterates = [x.copy()]
    wall, alphas, gammas, stalled = [], [], [], []
    for t in range(config.T):
        t0 = time.perf_counter()
        alpha = bb_step(t, x, x_prev, grad, grad_prev, config.bb_variant)
        x_dir = soft_threshold(x - grad / alpha, lam / alpha)
        d = x_dir - x
        l1_dir = float(np.abs(x_dir).sum())
        descent = float(grad @ d) + lam * (l1_dir - l1_x)
        gamma = 1.0
        halvings = 0
        while True:
            lhs = loss(x + gamma * d, problem, f) + lam * ((1.0 - gamma) * l1_x + gamma * l1_dir)
            rhs = phis[-1] + config.xi * gamma * descent
            if lhs <= rhs:
                break
            gamma *= config.stela_beta
            halvings += 1
            if halvings > config.stall_cap:
                gamma = 0.0
                stalled.append(t)
                break
        x_prev, grad_prev = x, grad
        x = x + gamma * d
        l1_x = float(np.abs(x).sum())
        L_x = loss(x, problem, f)
        phis.append(L_x + lam * l1_x)
        grad = loss_gradient(x, problem, f)
        alphas.append(alpha)
        gammas.append(gamma)
        iterates.append(x.copy())
        wall.append(time.perf_counter() - t0)
    hp = {"lam": lam, "eta_factor": config.eta_factor, "xi": config.xi,
          "M": config.M, "T": config.T, "bb_variant": config.bb_variant,
          "stela_beta": config.stela_beta, "alphas": alphas, "gammas": gammas,
          "stalled": stalled}
    return SolverTrace(np.array(iterates), np.array(wall), "stela", hp)


SOLVERS = {
    "sparsa": sparsa_solve,
    "fista": fista_solve,
    "fpca": fpca_solve,
    "stela": stela_solve,
}


def replay_acceptance(trace: SolverTrace, problem: ProblemInstance,
                      f: NonlinearScalarFunction, rtol: float = 1e-9) -> bool:
    """Audit a sparsa/fista/fpca trace: every accepted iterate must satisfy the
    recorded nonmonotone acceptance inequality when recomputed from scratch."""
    if trace.solver_id not in ("sparsa", "fista", "fpca"):
        raise ValueError(f"no nonmonotone audit for solver {trace.solver_id!r}")
    hp = trace.hyperparams
    alphas = hp["alphas"]
    lams = hp.get("lambdas") or [hp["lam"]] * trace.T
    xi, M = hp["xi"], hp["M"]
    stalled = set(hp.get("stalled", ()))
    phis = [objective(trace.iterates[0], problem, f, lams[0])]
    for t in range(trace.T):
        x_t, x_new = trace.iterates[t], trace.iterates[t + 1]
        phi_new = objective(x_new, problem, f, lams[t])
        if t not in stalled:
            step_sq = float(np.sum((x_new - x_t) ** 2))
            bound = _accept_bound(phis, t, M, xi, alphas[t], step_sq)
            if not phi_new <= bound + rtol * max(1.0, abs(bound)):
                return False
        phis.append(phi_new)
    return True


def trace_csv_rows(trace: SolverTrace, problem: ProblemInstance,
                   f: NonlinearScalarFunction, include_timings: bool = False):
    """Rows (t, nmse_db, loss, wall_ms) for one trace; loss is the composite
    objective with the lambda active at each step. Timing defaults to zero so
    that rerun outputs are byte-identical (enable with include_timings)."""
    hp = trace.hyperparams
    lams = hp.get("lambdas") or [hp.get("lam", 0.0)] * trace.T
    truth_sq = float(problem.x_star @ problem.x_star)
    rows = [("t", "nmse_db", "loss", "wall_ms")]
    for t in range(trace.T + 1):
        lam_t = lams[min(t, trace.T - 1)] if lams else 0.0
        if truth_sq == 0.0:
            nm_str = "nan"  # NMSE undefined for a zero ground truth
        else:
            nm_str = format_metric(nmse_db(trace.iterates[t][None, :],
                                           problem.x_star[None, :]))
        phi = objective(trace.iterates[t], problem, f, lam_t)
        ms = trace.wall_times[t - 1] * 1e3 if (include_timings and t > 0) else 0.0
        rows.append((str(t), nm_str, format_metric(phi), format_metric(ms)))
    return rows


def write_trace_csv(path, trace, problem, f, include_timings: bool = False) -> None:
    rows = trace_csv_rows(trace, problem, f, include_timings)
    with open(path, "w", newline="") as fh:
        for row in rows:
            fh.write(",".join(row) + "\n")
