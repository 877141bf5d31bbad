"""Acceptance check for learned update proposals and the accelerated loop.

Each iteration computes the deterministic trust-region step, lets the
iteration's learned operator refine it, and keeps the refined iterate only
when it does not degrade the local model and its agreement ratio clears the
acceptance threshold. Otherwise the deterministic step is used unchanged,
so a useless or adversarial operator reproduces the plain solver exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .forward import ImagePair
from .solver import (
    IterationRecord,
    Problem,
    SolverConfig,
    Trajectory,
    decay_alpha,
    initial_state,
    lm_step,
    model_value,
    replace_state,
)

__all__ = [
    "BranchDecision",
    "check_and_select",
    "accelerated_solve",
    "run_iterations",
    "decay_alpha",
]


@dataclass
class BranchDecision:
    """Outcome of one safeguard evaluation."""

    chosen: str  # "accelerated" | "fallback"
    rho_tilde: float
    m_tilde: float
    m_lm: float
    reason: str
    k: int = -1


def check_and_select(u, s_lm, u_tilde, state, problem, cfg=None, _pre=None):
    """Pick the accelerated iterate when it is provably no worse than the step.

    The accelerated proposal is projected onto the feasible set first; it is
    accepted iff its model value does not exceed the deterministic step's and
    its agreement ratio clears the threshold. Returns the next iterate and a
    :class:`BranchDecision` explaining the choice.
    """
    cfg = cfg or SolverConfig()
    alphas = state.alphas
    if _pre is None:
        f0, resid, lin_fwd = problem.objective(u, alphas)
        lin = problem.linearize(lin_fwd, alphas)
        m_lm = model_value(s_lm, resid, lin)
    else:
        f0, resid, lin, m_lm = _pre
    u_fallback = problem.constraints.project_stack(u + s_lm)

    if not np.all(np.isfinite(u_tilde)):
        decision = BranchDecision("fallback", math.nan, math.nan, m_lm,
                                  "accelerated output not finite")
        return u_fallback, decision

    u_acc = u_tilde
    if not problem.constraints.is_feasible(u_acc, tol=0.0):
        u_acc = problem.constraints.project_stack(u_acc)
    s_tilde = u_acc - u
    m_tilde = model_value(s_tilde, resid, lin)
    threshold = state.kappa

    if m_tilde > m_lm:
        decision = BranchDecision("fallback", math.nan, m_tilde, m_lm,
                                  "model value above deterministic step")
        return u_fallback, decision
    m_dec = f0 - m_tilde
    if m_dec <= 0.0:
        decision = BranchDecision("fallback", math.nan, m_tilde, m_lm,
                                  "no model decrease for accelerated step")
        return u_fallback, decision
    f_acc, _, _ = problem.objective(u_acc, alphas)
    rho_tilde = (f0 - f_acc) / m_dec
    if rho_tilde <= threshold:
        decision = BranchDecision("fallback", rho_tilde, m_tilde, m_lm,
                                  "agreement ratio below threshold")
        return u_fallback, decision
    decision = BranchDecision("accelerated", rho_tilde, m_tilde, m_lm, "accepted")
    return u_acc, decision


def _apply_network(store, u, s, problem):
    from .accelerator import apply_accelerator

    pair = ImagePair(u[0], u[1], problem.bounds)
    out = apply_accelerator(store, pair, s)
    return out.stack()


def run_iterations(u0, problem, iterations, cfg, networks=None, truth=None):
    """Shared outer loop for the plain and the accelerated solver.

    ``networks`` is an iteration-indexed list of weight stores (entries may
    be missing or None, which falls back to the deterministic step for that
    iteration). The deterministic step is computed identically whether or
    not accelerators are present, so a rejecting accelerator reproduces the
    plain trajectory bit for bit.
    """
    stack0 = u0.stack() if isinstance(u0, ImagePair) else np.array(u0, dtype=float)
    if not problem.constraints.is_feasible(stack0, tol=1e-12):
        raise InvalidInputError("initial guess is infeasible")

    alphas0 = decay_alpha(0, problem.reg)
    state = initial_state(problem, stack0, cfg, alphas0)
    iterates = [stack0.copy()]
    records: list[IterationRecord] = []
    decisions: list[BranchDecision] = []
    mask = problem.constraints.mask
    consecutive_stalls = 0
    stalled = False

    for k in range(iterations):
        alphas = decay_alpha(k, problem.reg)
        state = replace_state(state, alphas=alphas, k=k)
        u_k = state.u.copy()

        f0, resid, lin_fwd = problem.objective(u_k, alphas)
        lin = problem.linearize(lin_fwd, alphas)
        prop, state = lm_step(state, problem, cfg, _pre=(f0, resid, lin))

        branch = "lm"
        f_next = prop.f_next
        rho_val = prop.rho
        if prop.stalled:
            branch = "stalled"
            consecutive_stalls += 1
        else:
            consecutive_stalls = 0
            store = None
            if networks is not None and k < len(networks):
                store = networks[k]
            if networks is not None and store is None:
                branch = "lm-missing-net"
            if store is not None:
                u_tilde = _apply_network(store, u_k, prop.step, problem)
                u_next, decision = check_and_select(
                    u_k, prop.step, u_tilde, state, problem, cfg,
                    _pre=(f0, resid, lin, prop.m_s),
                )
                decision.k = k
                decisions.append(decision)
                branch = decision.chosen
                if decision.chosen == "accelerated":
                    state = replace_state(state, u=u_next)
                    f_next, _, _ = problem.objective(u_next, alphas)
                    rho_val = decision.rho_tilde

        rel_l, rel_m = _rel_errors(state.u, truth, mask)
        records.append(
            IterationRecord(
                k=k, f=prop.f, rho=rho_val, beta=state.beta, delta=state.delta,
                alpha1=alphas[0], alpha2=alphas[1],
                rel_err_lambda=rel_l, rel_err_mu=rel_m, branch=branch,
                f_next=f_next, m0=prop.m0, m_s=prop.m_s,
                model_decrease=prop.model_decrease,
                accepted=prop.accepted, stalled=prop.stalled,
            )
        )
        iterates.append(state.u.copy())
        if consecutive_stalls >= cfg_max_stalls(cfg):
            stalled = True
            break

    traj = Trajectory(iterates=iterates, records=records, stalled=stalled)
    traj.decisions = decisions
    return traj


def cfg_max_stalls(cfg: SolverConfig) -> int:
    return getattr(cfg, "max_consecutive_stalls", 1)


def _rel_errors(u, truth, mask):
    if truth is None:
        return (math.nan, math.nan)
    from .io_cli.metrics import compute_metrics

    m = compute_metrics(u, truth, mask)
    return (m.rel_err_lambda, m.rel_err_mu)


def accelerated_solve(
    u0: ImagePair,
    networks: list,
    problem: Problem,
    iterations: int,
    cfg: SolverConfig = SolverConfig(),
    truth: ImagePair | None = None,
) -> Trajectory:
    """Deterministic steps refined by per-iteration learned operators.

    ``networks`` must be ordered by iteration; a missing entry degrades that
    iteration to the plain step. Every fallback is recorded together with
    the condition that failed.
    """
    if networks is None:
        networks = []
    return run_iterations(u0, problem, iterations, cfg, networks=networks, truth=truth)
