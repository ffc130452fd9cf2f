"""Linear-quadratic specialization: dual control formula and the damped
fixed-point solver for the coupled forward-backward optimality system.

The dual formula closes the minimum condition H_u = 0 in the unconstrained
LQ case:

    u = -1/2 N^{-1} (C* p + F* q),

with C* = C^T gram_h and F* = F^T gram_h the H-adjoints restricted to the
Euclidean control space.  The solver iterates forward simulation, adjoint
solve, and a damped control update until the control stops moving; no
Riccati decoupling is used anywhere in the solve path (Riccati solutions
appear only as independent test oracles).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import control as control_mod
from .backward import AdjointPair, RegressionBasis, solve_linear_adjoint
from .coeffs import LQCoeffs, lq_to_control_coeffs, validate_lq
from .errors import NonConvergenceError, ValidationError
from .forward import ControlProcess, ForwardProblem, ParticleEnsemble, simulate
from .triple import DiscreteTriple, OperatorProcess, TimeGrid

__all__ = ["LQProblem", "LQSolution", "dual_control", "solve_fixed_point", "verify_coercivity"]


@dataclass(frozen=True)
class LQProblem:
    """Validated bundle of an LQ instance on a particle ensemble."""

    triple: DiscreteTriple
    operator: OperatorProcess
    coeffs: LQCoeffs
    initial: np.ndarray
    grid: TimeGrid
    n_paths: int
    seed: int

    def __post_init__(self):
        rep = validate_lq(self.coeffs)
        if not rep.passed:
            raise ValidationError("LQProblem: " + "; ".join(rep.messages))
        self.operator.validate(self.triple)
        x0 = np.asarray(self.initial, dtype=float).reshape(-1)
        if x0.shape[0] != self.triple.dim:
            raise ValidationError("LQProblem: initial vector dimension mismatch")
        object.__setattr__(self, "initial", x0)

    def control_problem(self, projection=None):
        """View the LQ instance through the generic control interface."""
        coeffs = lq_to_control_coeffs(self.coeffs, self.grid)
        fwd = ForwardProblem(
            triple=self.triple,
            operator=self.operator,
            initial=self.initial,
            control_coeffs=coeffs,
        )
        return control_mod.ControlProblem(
            forward=fwd,
            grid=self.grid,
            n_paths=self.n_paths,
            seed=self.seed,
            projection=projection,
        )


@dataclass
class LQSolution:
    control: ControlProcess
    ensemble: ParticleEnsemble
    adjoint: AdjointPair
    iterations: int
    change_norm: float
    cost: float
    change_history: tuple = ()


def dual_control(p, q, lq, tri, k):
    """u = -1/2 N^{-1}(C* p + F* q) at node k; p, q may be batched (M, n)."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    c = lq.at("C", k)
    f = lq.at("F", k)
    nmat = lq.at("N", k)
    rhs = (p @ tri.gram_h) @ c + (q @ tri.gram_h) @ f
    return -0.5 * np.linalg.solve(nmat, rhs.T).T


def _control_change(grid, a, b, deterministic):
    dt = grid.dt
    diff = a - b
    if deterministic:
        return float(np.sqrt(dt * np.sum(diff**2)))
    return float(np.sqrt(dt * np.sum(diff**2) / diff.shape[0]))


class _AndersonMixer:
    """Anderson (type-II) extrapolation over recent fixed-point residuals.

    Under common random numbers the dual-formula map u -> T(u) is affine,
    so this is GMRES on (I - T) and converges even where plain damped
    iteration amplifies the regression-noise modes of the map.
    """

    def __init__(self, memory=5, damping=1.0):
        self.memory = memory
        self.damping = damping
        self.us = []
        self.rs = []

    def push(self, u_flat, r_flat):
        self.us.append(u_flat)
        self.rs.append(r_flat)
        if len(self.us) > self.memory:
            self.us.pop(0)
            self.rs.pop(0)

    def next_iterate(self):
        k = len(self.rs)
        if k == 1:
            return self.us[0] + self.damping * self.rs[0]
        r_new = self.rs[-1]
        dr = np.stack([self.rs[-1] - r for r in self.rs[:-1]], axis=1)
        gamma, *_ = np.linalg.lstsq(dr, r_new, rcond=None)
        du = np.stack([self.us[-1] - u for u in self.us[:-1]], axis=1)
        u_mix = self.us[-1] - du @ gamma
        r_mix = r_new - dr @ gamma
        return u_mix + self.damping * r_mix


def solve_fixed_point(prob, damping=0.5, tol=1e-8, max_iter=200, deterministic=False,
                      init=None, basis=None, accelerate=True, anderson_memory=6):
    """Damped fixed-point iteration on the coupled optimality system.

    Each pass simulates the state under the current control, solves the
    adjoint, and moves the control toward the dual formula
    u <- (1 - damping) u + damping * dual(p, q), with optional Anderson
    extrapolation over the residual history (``accelerate``), which keeps
    the iteration convergent when per-path regression noise pushes the
    plain map's gain past one.  Deterministic mode restricts the control
    to per-node vectors using the particle average of the dual formula.
    Convergence is the ensemble-L2-in-time norm of the control update;
    for the plain damped iteration ``change_norm / damping`` bounds the
    remaining distance to the fixed point.
    """
    if not 0.0 < damping <= 1.0:
        raise ValidationError("solve_fixed_point: damping must lie in (0, 1]")
    lqc = prob.coeffs
    cp = prob.control_problem()
    m = lqc.m
    steps = prob.grid.steps

    if init is not None:
        u = init
        if u.deterministic != deterministic:
            raise ValidationError("solve_fixed_point: init control mode mismatch")
    elif deterministic:
        u = ControlProcess(np.zeros((steps, m)), True)
    else:
        u = ControlProcess(np.zeros((prob.n_paths, steps, m)), False)

    mixer = _AndersonMixer(anderson_memory, damping) if accelerate else None
    history = []

    for it in range(1, max_iter + 1):
        ens = cp.simulate_under(u)
        adj = solve_linear_adjoint(prob.triple, prob.operator, cp.coeffs, ens, u, basis=basis)
        target = np.empty((prob.n_paths, steps, m))
        for k in range(steps):
            target[:, k, :] = dual_control(adj.p[:, k, :], adj.q[:, k, :], lqc, prob.triple, k)
        if deterministic:
            target = target.mean(axis=0)

        # True fixed-point residual of the undamped dual-formula map.
        residual = _control_change(prob.grid, target, u.values, deterministic)
        history.append(residual)
        if residual <= tol:
            j = control_mod.cost(cp, u, ens)
            return LQSolution(
                control=u, ensemble=ens, adjoint=adj, iterations=it,
                change_norm=residual, cost=j, change_history=tuple(history),
            )

        if mixer is not None:
            mixer.push(u.values.reshape(-1), (target - u.values).reshape(-1))
            new_values = mixer.next_iterate().reshape(u.values.shape)
        else:
            new_values = (1.0 - damping) * u.values + damping * target
        if not np.all(np.isfinite(new_values)):
            raise NonConvergenceError(
                f"solve_fixed_point: iteration diverged at pass {it} "
                "(consider a smaller damping factor)",
                history=history,
            )
        u = u.replace_values(new_values)

    raise NonConvergenceError(
        f"solve_fixed_point: fixed-point residual {history[-1]:.3e} above {tol:.1e} "
        f"after {max_iter} iterations (consider a smaller damping factor)",
        history=history,
    )


@dataclass(frozen=True)
class CoercivityReportLQ:
    passed: bool
    min_ratio: float
    floor: float
    ratios: tuple


def verify_coercivity(prob, samples=50, seed=99, scale=1.0, mc_slack=0.05):
    """Sampled check of J(u) >= k E int ||u||^2 dt over random controls."""
    cp = prob.control_problem()
    rng = np.random.default_rng(seed)
    steps = prob.grid.steps
    dt = prob.grid.dt
    m = prob.coeffs.m
    ratios = []
    for _ in range(samples):
        vals = scale * rng.standard_normal((steps, m))
        u = ControlProcess(vals, True)
        ens = cp.simulate_under(u)
        j = control_mod.cost(cp, u, ens)
        energy = dt * float(np.sum(vals**2))
        if energy <= 0:
            continue
        ratios.append(j / energy)
    min_ratio = float(min(ratios))
    floor = prob.coeffs.k_min * (1.0 - mc_slack)
    return CoercivityReportLQ(
        passed=min_ratio >= floor,
        min_ratio=min_ratio,
        floor=floor,
        ratios=tuple(ratios),
    )
