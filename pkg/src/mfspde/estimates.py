"""Empirical certification of the energy and continuous-dependence
estimates by perturbation-scaling experiments.

Each study solves a base and a perturbed system on *identical* Brownian
increments (shared seed), measures both sides of the target estimate over
a geometric delta ladder, and fits the log-log slope of the left side.
For linear dynamics the error system is exactly homogeneous in delta, so
the fitted slope is 2 up to rounding, and the ratio K^ = max LHS/RHS is
the empirical stand-in for the Gronwall constant whose exact value the
theory does not provide.
"""

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .backward import BackwardProblem, solve_backward
from .coeffs import BackwardDriver, MeanFieldDiffusion, MeanFieldDrift
from .errors import ValidationError
from .forward import ForwardProblem, brownian_increments, simulate

__all__ = [
    "ScalingStudy",
    "forward_dependence_study",
    "forward_apriori_study",
    "backward_dependence_study",
]


@dataclass(frozen=True)
class ScalingStudy:
    deltas: tuple
    lhs: tuple
    rhs: tuple
    slope: float
    slope_residual: float
    k_hat: float
    ratios: tuple

    def stable_ratio(self, band=0.2):
        """True when LHS <= K^ RHS holds with one constant across the ladder."""
        finite = [r for r in self.ratios if np.isfinite(r) and r > 0]
        if not finite:
            return True
        return (max(finite) - min(finite)) <= band * max(finite)


def _check_ladder(deltas):
    deltas = tuple(float(d) for d in deltas)
    if len(deltas) < 2:
        raise ValidationError("scaling study: need at least two ladder points")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValidationError("scaling study: delta ladder must be strictly decreasing")
    if any(d <= 0 for d in deltas):
        raise ValidationError("scaling study: deltas must be positive")
    return deltas


def _fit(deltas, lhs):
    mask = [l > 0 for l in lhs]
    if sum(mask) < 2:
        return np.nan, np.inf
    xs = np.log([d for d, m in zip(deltas, mask) if m])
    ys = np.log([l for l, m in zip(lhs, mask) if m])
    coef, res = np.polyfit(xs, ys, 1, full=True)[:2]
    resid = float(res[0]) if len(res) else 0.0
    return float(coef[0]), resid


def _forward_energy(tri, grid, paths, ref_paths):
    diff = paths - ref_paths
    sup_h = float(np.mean(np.max(tri.h_norm(diff) ** 2, axis=1)))
    int_v = float(np.mean(np.sum(tri.v_norm(diff[:, :-1, :]) ** 2, axis=1))) * grid.dt
    return sup_h + int_v


def forward_dependence_study(problem, perturbation, deltas, grid, n_paths, seed):
    """Continuous dependence of the forward solution on drift/diffusion.

    ``perturbation(delta)`` returns a ForwardProblem sharing the base
    problem's operator and initial value whose coefficients are the
    delta-perturbed ones.  LHS is the energy of X - X_base; RHS integrates
    the coefficient differences along the *base* trajectory.
    """
    deltas = _check_ladder(deltas)
    tri = problem.triple
    dt = grid.dt
    base = simulate(problem, grid, n_paths, seed)
    xbar = base.paths.mean(axis=0)

    lhs_list, rhs_list, ratios = [], [], []
    for delta in deltas:
        pert = perturbation(delta)
        sol = simulate(pert, grid, n_paths, seed, dw=base.dw)
        lhs = _forward_energy(tri, grid, sol.paths, base.paths)

        rhs = 0.0
        for k in range(grid.steps):
            t = k * dt
            states = base.paths[:, k, :]
            xp = np.broadcast_to(xbar[k], states.shape)
            db = pert.drift.eval(t, xp, states) - problem.drift.eval(t, xp, states)
            dg = pert.diffusion.eval(t, xp, states) - problem.diffusion.eval(t, xp, states)
            rhs += dt * float(np.mean(tri.h_norm(db) ** 2 + tri.h_norm(dg) ** 2))
        if rhs <= 0.0:
            raise ValidationError("forward_dependence_study: degenerate perturbation (RHS = 0)")
        lhs_list.append(lhs)
        rhs_list.append(rhs)
        ratios.append(lhs / rhs)

    slope, resid = _fit(deltas, lhs_list)
    return ScalingStudy(
        deltas=deltas, lhs=tuple(lhs_list), rhs=tuple(rhs_list),
        slope=slope, slope_residual=resid,
        k_hat=float(max(ratios)), ratios=tuple(ratios),
    )


def forward_apriori_study(problem, scales, grid, n_paths, seed):
    """Energy growth under joint scaling of the initial value and the
    inhomogeneous parts b(., 0, 0), g(., 0, 0).

    ``scales`` is a decreasing ladder of multipliers s; each run solves the
    problem with initial s x0 and coefficients b + (s - 1) b(., 0, 0)
    (ditto g), so the zero-state inhomogeneity scales by s while the
    Lipschitz structure is untouched.  LHS is the solution energy, RHS the
    homogeneous data energy of the estimate.
    """
    scales = _check_ladder(scales)
    tri = problem.triple
    dt = grid.dt
    zero = np.zeros((1, tri.dim))

    lhs_list, rhs_list, ratios = [], [], []
    for s in scales:
        def shifted(fn):
            def eval_(t, xp, x, _fn=fn, _s=s):
                base0 = _fn(t, zero, zero)
                return _fn(t, xp, x) + (_s - 1.0) * base0
            return eval_

        pert = replace(
            problem,
            initial=s * problem.initial,
            drift=MeanFieldDrift(shifted(problem.drift.eval), problem.drift.lipschitz),
            diffusion=MeanFieldDiffusion(
                shifted(problem.diffusion.eval), problem.diffusion.lipschitz
            ),
        )
        sol = simulate(pert, grid, n_paths, seed)
        lhs = _forward_energy(tri, grid, sol.paths, np.zeros_like(sol.paths))

        rhs = float(tri.h_norm(s * problem.initial) ** 2)
        for k in range(grid.steps):
            t = k * dt
            b0 = s * problem.drift.eval(t, zero, zero)
            g0 = s * problem.diffusion.eval(t, zero, zero)
            rhs += dt * float(tri.h_norm(b0)[0] ** 2 + tri.h_norm(g0)[0] ** 2)
        lhs_list.append(lhs)
        rhs_list.append(rhs)
        ratios.append(lhs / rhs if rhs > 0 else np.inf)

    slope, resid = _fit(scales, lhs_list)
    return ScalingStudy(
        deltas=scales, lhs=tuple(lhs_list), rhs=tuple(rhs_list),
        slope=slope, slope_residual=resid,
        k_hat=float(max(r for r in ratios if np.isfinite(r))), ratios=tuple(ratios),
    )


def backward_dependence_study(problem, perturbation, deltas, ens, basis,
                              picard_tol=1e-11, max_picard=80):
    """Continuous dependence of (Y, Z) on the driver and terminal data.

    ``perturbation(delta)`` returns a BackwardProblem with perturbed
    (f, xi); base and perturbed solves share the ensemble and the
    regression basis, so for linear drivers the differences are exactly
    homogeneous in delta.  LHS adds the E int ||Z - Z_base||_H^2 term; RHS
    measures the data perturbation along the base solution.
    """
    deltas = _check_ladder(deltas)
    tri = problem.triple
    grid = ens.grid
    dt = grid.dt
    base = solve_backward(problem, ens, basis, picard_tol=picard_tol, max_picard=max_picard)
    ybar = base.p.mean(axis=0)
    zbar = base.q.mean(axis=0)

    lhs_list, rhs_list, ratios = [], [], []
    for delta in deltas:
        pert = perturbation(delta)
        sol = solve_backward(pert, ens, basis, picard_tol=picard_tol, max_picard=max_picard)
        dy = sol.p - base.p
        dz = sol.q - base.q
        sup_h = float(np.mean(np.max(tri.h_norm(dy) ** 2, axis=1)))
        int_v = float(np.mean(np.sum(tri.v_norm(dy[:, :-1, :]) ** 2, axis=1))) * dt
        int_z = float(np.mean(np.sum(tri.h_norm(dz) ** 2, axis=1))) * dt
        lhs = sup_h + int_v + int_z

        dxi = pert.terminal_values(ens) - problem.terminal_values(ens)
        rhs = float(np.mean(tri.h_norm(dxi) ** 2))
        for k in range(grid.steps):
            t = k * dt
            args = (
                np.broadcast_to(ybar[k], base.p[:, k, :].shape),
                np.broadcast_to(zbar[k], base.q[:, k, :].shape),
                base.p[:, k, :],
                base.q[:, k, :],
            )
            df = pert.driver.eval(t, *args) - problem.driver.eval(t, *args)
            rhs += dt * float(np.mean(tri.h_norm(df) ** 2))
        if rhs <= 0.0:
            raise ValidationError("backward_dependence_study: degenerate perturbation (RHS = 0)")
        lhs_list.append(lhs)
        rhs_list.append(rhs)
        ratios.append(lhs / rhs)

    slope, resid = _fit(deltas, lhs_list)
    return ScalingStudy(
        deltas=deltas, lhs=tuple(lhs_list), rhs=tuple(rhs_list),
        slope=slope, slope_residual=resid,
        k_hat=float(max(ratios)), ratios=tuple(ratios),
    )
