"""Backward solvers: regression-based schemes for the mean-field backward
equation and the linear adjoint equation of the control problem.

Two solvers live here with deliberately different discretizations.

``solve_backward`` handles the general (possibly nonlinear) equation

    dY = [A Y + E'f(t, Y', Z', Y, Z)] dt + Z dW,   Y(T) = xi,

by backward Euler with least-squares conditional expectations and an outer
Picard iteration in which the mean-field arguments (Y', Z') are frozen at
the previous iterate's ensemble averages.  The Z-estimator regresses the
*martingale difference* (Y_{k+1} minus its fitted conditional mean) times
dW/dt; subtracting the fitted mean leaves the estimand unchanged and
removes the dominant O(1/dt) variance term, which is what makes the
martingale-representation test accurate at desk-scale path counts.

``solve_linear_adjoint`` solves the adjoint equation

    dp = -[-A* p + Hx(t) + E[Hx'(t)]] dt + q dW,
    p(T) = Phi_x + E[Phi_x'],

by transporting the exact reverse-mode derivative of the discrete forward
scheme: the implicit A*-solve mirrors the forward (I + dt A) solve, and
the Hamiltonian-gradient driver is accumulated against the transported
value (with the pathwise dW factor standing in for the q-slot).  The
stored, adapted pair (p, q) consists of per-node regressions of that
transport.  This staggering makes the chain rule exact for the discrete
dynamics, so adjoint directional derivatives of the sampled cost agree
with finite differences to regression accuracy rather than O(dt), and for
linear-quadratic data with the affine basis the ensemble-mean gradient is
exact to rounding.

Gradients of the scalar costs arrive Euclidean (see coeffs); drivers and
terminal values are converted to their H-Riesz representatives here, so p
and q are the metric-consistent objects that enter (., .)_H pairings.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .coeffs import BackwardDriver, ControlCoeffs
from .errors import NonConvergenceError, SolverError, ValidationError
from .triple import DiscreteTriple, OperatorProcess, TimeGrid, adjoint_in_H

__all__ = [
    "RegressionBasis",
    "BackwardProblem",
    "AdjointPair",
    "solve_backward",
    "solve_linear_adjoint",
    "bspde_apriori_check",
]


@dataclass(frozen=True)
class RegressionBasis:
    """Per-coordinate monomial basis {1, X_i, X_i^2, ...} up to ``degree``.

    Ridge regularization is applied to the non-constant columns only; the
    intercept stays unpenalized so fitted values preserve ensemble means
    exactly, a property the gradient machinery relies on.
    """

    degree: int = 1
    ridge: float = 1e-10

    def __post_init__(self):
        if self.degree < 0:
            raise ValidationError("RegressionBasis: degree must be >= 0")
        if self.ridge < 0:
            raise ValidationError("RegressionBasis: ridge must be >= 0")

    def design(self, states):
        states = np.asarray(states, dtype=float)
        m, n = states.shape
        cols = [np.ones((m, 1))]
        power = np.ones_like(states)
        for _ in range(self.degree):
            power = power * states
            cols.append(power)
        return np.concatenate(cols, axis=1)

    def fit(self, states, targets, node=None):
        """Fitted values of the cross-sectional least-squares regression.

        ``targets`` is (M, p); returns (M, p).  Raises SolverError naming
        the node when ridge is zero and the design is rank deficient.
        """
        d = self.design(states)
        targets = np.asarray(targets, dtype=float)
        gram = d.T @ d
        if self.ridge > 0.0:
            reg = self.ridge * np.eye(gram.shape[0])
            reg[0, 0] = 0.0
            gram = gram + reg
        elif np.linalg.matrix_rank(gram) < gram.shape[0]:
            where = f" at node {node}" if node is not None else ""
            raise SolverError(f"regression design is rank deficient{where}")
        try:
            beta = np.linalg.solve(gram, d.T @ targets)
        except np.linalg.LinAlgError as exc:
            where = f" at node {node}" if node is not None else ""
            raise SolverError(f"regression normal equations singular{where}") from exc
        return d @ beta


@dataclass(frozen=True)
class BackwardProblem:
    """Data of the backward equation: operator, driver, terminal functional.

    ``terminal`` maps a ParticleEnsemble to the (M, n) terminal values; use
    the helpers below for the common constant / state-function cases.
    """

    triple: DiscreteTriple
    operator: OperatorProcess
    driver: BackwardDriver
    terminal: Callable

    def terminal_values(self, ens):
        xi = np.asarray(self.terminal(ens), dtype=float)
        if xi.shape != (ens.n_paths, self.triple.dim):
            raise ValidationError(
                f"BackwardProblem: terminal values have shape {xi.shape}, "
                f"expected {(ens.n_paths, self.triple.dim)}"
            )
        if not np.all(np.isfinite(xi)):
            raise ValidationError("BackwardProblem: non-finite terminal values")
        return xi


def constant_terminal(value):
    value = np.atleast_1d(np.asarray(value, dtype=float))

    def term(ens):
        return np.broadcast_to(value, (ens.n_paths, value.shape[0])).copy()

    return term


def terminal_of_state(fn):
    """Terminal xi = fn(X(T)) with fn batched over paths."""

    def term(ens):
        return np.asarray(fn(ens.paths[:, -1, :]), dtype=float)

    return term


def zero_driver(lipschitz=0.0):
    return BackwardDriver(lambda t, yp, zp, y, z: np.zeros_like(y), lipschitz)


@dataclass
class AdjointPair:
    """Adapted solution pair plus the raw transported values.

    ``p`` has shape (M, steps + 1, n) and matches the terminal functional
    path-wise at the last node.  ``q`` is (M, steps, n).  ``p_pre`` stores,
    for each step k, the transported value after the implicit A*-solve and
    before the node-k driver increment; gradient formulas pair step-k
    Jacobians with it (solve_linear_adjoint only, else None).
    """

    p: np.ndarray
    q: np.ndarray
    picard_iterations: int
    picard_residual: float
    residual_history: tuple = ()
    p_pre: Optional[np.ndarray] = None


def _ensemble_l2(tri, values):
    """sqrt(mean_i ||v_i||_H^2) for (M, n) values."""
    return float(np.sqrt(np.mean(tri.h_norm(values) ** 2)))


def solve_backward(problem, ens, basis, picard_tol=1e-10, max_picard=50):
    """Picard / backward-Euler / regression solver for the general equation.

    The first iterate starts from Y == terminal values and Z == 0, so
    driver-free problems converge in a single sweep.  Residuals are the
    sup-over-nodes ensemble-L2 changes of (Y, Z) between sweeps.
    """
    if picard_tol <= 0:
        raise ValidationError("solve_backward: picard_tol must be positive")
    tri = problem.triple
    n = tri.dim
    grid = ens.grid
    steps = grid.steps
    dt = grid.dt
    n_paths = ens.n_paths
    if problem.operator.dim != n:
        raise ValidationError("solve_backward: operator dimension mismatch")
    if ens.dim != n:
        raise ValidationError("solve_backward: ensemble dimension mismatch")

    xi = problem.terminal_values(ens)
    eye = np.eye(n)

    y = np.broadcast_to(xi[:, None, :], (n_paths, steps + 1, n)).copy()
    z = np.zeros((n_paths, steps, n))
    history = []

    for it in range(1, max_picard + 1):
        y_bar = y.mean(axis=0)   # (steps + 1, n) frozen mean-field args
        z_bar = z.mean(axis=0)   # (steps, n)
        y_new = np.empty_like(y)
        z_new = np.empty_like(z)
        y_new[:, steps, :] = xi

        for k in range(steps - 1, -1, -1):
            t = k * dt
            states = ens.paths[:, k, :]
            y_next = y_new[:, k + 1, :]
            fitted = basis.fit(states, y_next, node=k)
            mart = (y_next - fitted) * (ens.dw[:, k, None] / dt)
            z_new[:, k, :] = basis.fit(states, mart, node=k)
            drv = problem.driver.eval(
                t,
                np.broadcast_to(y_bar[k], states.shape),
                np.broadcast_to(z_bar[k], states.shape),
                y[:, k, :],
                z_new[:, k, :],
            )
            rhs = fitted - dt * drv
            lhs = eye + dt * problem.operator.at(k)
            try:
                y_new[:, k, :] = np.linalg.solve(lhs, rhs.T).T
            except np.linalg.LinAlgError as exc:
                raise SolverError(f"solve_backward: singular (I + dt A) at node {k}") from exc

        dy = max(
            _ensemble_l2(tri, y_new[:, k, :] - y[:, k, :]) for k in range(steps + 1)
        )
        dz = max(
            _ensemble_l2(tri, z_new[:, k, :] - z[:, k, :]) for k in range(steps)
        ) if steps else 0.0
        resid = max(dy, dz)
        history.append(resid)
        y, z = y_new, z_new
        if resid <= picard_tol:
            return AdjointPair(
                p=y, q=z, picard_iterations=it, picard_residual=resid,
                residual_history=tuple(history),
            )

    raise NonConvergenceError(
        f"solve_backward: Picard iteration did not reach {picard_tol:.1e} "
        f"in {max_picard} sweeps (last residual {history[-1]:.3e})",
        history=history,
    )


def _apply_adjoint_jacobian(gram_h, jac, vec):
    """H-adjoint Jacobian action gram_h^{-1} J^T gram_h vec, batched.

    ``jac`` is (n_out, n_in) or (M, n_out, n_in); ``vec`` is (M, n_out).
    Returns (M, n_in).
    """
    jac = np.asarray(jac, dtype=float)
    gv = vec @ gram_h.T
    if jac.ndim == 2:
        out = gv @ jac
    else:
        out = np.einsum("bij,bi->bj", jac, gv)
    return np.linalg.solve(gram_h, out.T).T


def solve_linear_adjoint(tri, operator, coeffs, ens, control, basis=None):
    """Adjoint pair for a controlled ensemble via exact reverse-mode transport.

    ``coeffs`` is a ControlCoeffs bundle (build LQ ones with
    lq_to_control_coeffs, for which an affine regression basis is forced,
    the exact representation class of linear dynamics).  ``control`` is the
    process the ensemble was simulated under.
    """
    if basis is None or basis.degree != 1:
        basis = RegressionBasis(degree=1, ridge=basis.ridge if basis else 1e-10)
    gram_h = tri.gram_h
    n = tri.dim
    grid = ens.grid
    steps = grid.steps
    dt = grid.dt
    n_paths = ens.n_paths
    xbar_t = ens.paths.mean(axis=0)

    # Terminal: H-representative of the Euclidean gradient of the terminal cost.
    x_term = ens.paths[:, steps, :]
    xbar_b = np.broadcast_to(xbar_t[steps], x_term.shape)
    grad = np.asarray(coeffs.phi_x(x_term, xbar_b), dtype=float)
    grad = grad + np.asarray(coeffs.phi_xp(x_term, xbar_b), dtype=float).mean(axis=0)
    lam = np.linalg.solve(gram_h, grad.T).T

    p = np.empty((n_paths, steps + 1, n))
    q = np.empty((n_paths, steps, n))
    p_pre = np.empty((n_paths, steps, n))
    p[:, steps, :] = lam
    eye = np.eye(n)

    for k in range(steps - 1, -1, -1):
        t = k * dt
        states = ens.paths[:, k, :]
        xbar_b = np.broadcast_to(xbar_t[k], states.shape)
        u = control.at(k, n_paths)
        a_star = adjoint_in_H(operator.at(k), tri)
        try:
            pi = np.linalg.solve(eye + dt * a_star, lam.T).T
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"solve_linear_adjoint: singular (I + dt A*) at node {k}") from exc

        p_pre[:, k, :] = pi
        fitted = basis.fit(states, pi, node=k)
        p[:, k, :] = fitted
        # Martingale-difference estimator with its ensemble mean restored:
        # regressing (pi - fitted) dW/dt removes the dominant variance term,
        # and adding back the mean of the dropped part keeps the particle
        # average of q exactly equal to that of pi dW/dt, which the exact
        # discrete gradient identity requires.
        scaled = ens.dw[:, k, None] / dt
        q[:, k, :] = basis.fit(states, (pi - fitted) * scaled, node=k) + np.mean(
            fitted * scaled, axis=0
        )

        hx_pi = _apply_adjoint_jacobian(gram_h, coeffs.h_x(t, states, xbar_b, u), pi)
        gx_pi = _apply_adjoint_jacobian(gram_h, coeffs.g_x(t, states, xbar_b, u), pi)
        lx = np.linalg.solve(gram_h, np.asarray(coeffs.l_x(t, states, xbar_b, u)).T).T
        own = pi + dt * (hx_pi + lx) + ens.dw[:, k, None] * gx_pi

        hxp_pi = _apply_adjoint_jacobian(gram_h, coeffs.h_xp(t, states, xbar_b, u), pi)
        gxp_pi = _apply_adjoint_jacobian(gram_h, coeffs.g_xp(t, states, xbar_b, u), pi)
        lxp = np.linalg.solve(gram_h, np.asarray(coeffs.l_xp(t, states, xbar_b, u)).T).T
        mean_field = (dt * (hxp_pi + lxp) + ens.dw[:, k, None] * gxp_pi).mean(axis=0)

        lam = own + mean_field
        if not np.all(np.isfinite(lam)):
            raise SolverError(f"solve_linear_adjoint: non-finite transport at node {k}")

    return AdjointPair(
        p=p, q=q, picard_iterations=1, picard_residual=0.0,
        residual_history=(0.0,), p_pre=p_pre,
    )


@dataclass(frozen=True)
class AprioriReport:
    lhs: float
    rhs: float
    ratio: float
    terms: dict


def bspde_apriori_check(pair, problem, ens):
    """Empirical two-sided data of the a priori energy estimate.

    LHS = E[sup_k ||Y||_H^2] + E int ||Y||_V^2 + E int ||Z||_H^2,
    RHS = E ||xi||_H^2 + E int ||f(t,0,0,0,0)||_H^2; reports the ratio.
    """
    tri = problem.triple
    grid = ens.grid
    dt = grid.dt
    y, z = pair.p, pair.q
    sup_h = float(np.mean(np.max(tri.h_norm(y) ** 2, axis=1)))
    int_v = float(np.mean(np.sum(tri.v_norm(y[:, :-1, :]) ** 2, axis=1))) * dt
    int_z = float(np.mean(np.sum(tri.h_norm(z) ** 2, axis=1))) * dt
    lhs = sup_h + int_v + int_z

    xi = problem.terminal_values(ens)
    rhs = float(np.mean(tri.h_norm(xi) ** 2))
    zero = np.zeros((1, tri.dim))
    f0 = 0.0
    for k in range(grid.steps):
        val = problem.driver.eval(k * dt, zero, zero, zero, zero)
        f0 += float(tri.h_norm(val)[0] ** 2) * dt
    rhs += f0
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0.0 else np.inf)
    return AprioriReport(
        lhs=lhs, rhs=rhs, ratio=ratio,
        terms={"sup_h": sup_h, "int_v": int_v, "int_z": int_z, "xi": rhs - f0, "f0": f0},
    )
