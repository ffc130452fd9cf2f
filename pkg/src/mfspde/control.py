"""Cost evaluation, Hamiltonian machinery, adjoint gradients, and the
projected-gradient optimizer for the general control problem.

The sampled cost uses common random numbers: the Brownian increments are a
function of the problem seed only, so J is a smooth deterministic function
of the control array.  That is what makes line searches, finite-difference
oracles, and the acceptance-grade gradient checks meaningful.

Hamiltonian:  H(t, x, x', u, p, q) = (h, p)_H + (g, q)_H + l.
``hamiltonian_gradients`` returns plain Euclidean gradients of that scalar
(matching central differences); the adjoint solver internally converts to
H-representatives where the metric requires it.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .backward import RegressionBasis, solve_linear_adjoint
from .coeffs import ControlCoeffs
from .errors import ValidationError
from .forward import ControlProcess, ForwardProblem, simulate
from .triple import TimeGrid

__all__ = [
    "ControlProblem",
    "OptimizationReport",
    "cost",
    "hamiltonian",
    "hamiltonian_gradients",
    "variational_gradient",
    "directional_value",
    "fd_directional_derivative",
    "optimize",
    "check_sufficiency",
    "hamiltonian_system_residual",
]


def identity_projection(u):
    return u


@dataclass(frozen=True)
class ControlProblem:
    """Controlled forward dynamics plus admissible-set structure.

    ``projection`` maps (batch, m) arrays onto the closed convex admissible
    set; identity means unconstrained.  ``control_sampler(rng, count)``
    draws admissible probe points for the sufficiency checks (defaults to
    projected Gaussians).
    """

    forward: ForwardProblem
    grid: TimeGrid
    n_paths: int
    seed: int
    projection: Optional[Callable] = None
    control_sampler: Optional[Callable] = None

    def __post_init__(self):
        if self.forward.control_coeffs is None:
            raise ValidationError("ControlProblem: forward problem lacks controlled coefficients")
        proj = self.projection or identity_projection
        rng = np.random.default_rng(12345)
        probe = rng.standard_normal((16, self.coeffs.m))
        once = np.asarray(proj(probe), dtype=float)
        twice = np.asarray(proj(once), dtype=float)
        if not np.allclose(once, twice, atol=1e-10):
            raise ValidationError("ControlProblem: projection is not idempotent")
        other = rng.standard_normal((16, self.coeffs.m))
        lhs = np.linalg.norm(once - np.asarray(proj(other)), axis=-1)
        rhs = np.linalg.norm(probe - other, axis=-1)
        if np.any(lhs > rhs + 1e-10):
            raise ValidationError("ControlProblem: projection is not 1-Lipschitz")

    @property
    def coeffs(self):
        return self.forward.control_coeffs

    @property
    def triple(self):
        return self.forward.triple

    def project(self, values):
        proj = self.projection or identity_projection
        shape = values.shape
        return np.asarray(proj(values.reshape(-1, shape[-1])), dtype=float).reshape(shape)

    def sample_admissible(self, rng, count, scale=1.0):
        if self.control_sampler is not None:
            return np.asarray(self.control_sampler(rng, count), dtype=float)
        return self.project(scale * rng.standard_normal((count, self.coeffs.m)))

    def simulate_under(self, control, dw=None):
        return simulate(self.forward, self.grid, self.n_paths, self.seed, control, dw=dw)


def cost(prob, control, ens):
    """Sample-average cost: rectangle rule in time, particle averages for
    both the outer expectation and the mean-field argument."""
    coeffs = prob.coeffs
    dt = prob.grid.dt
    steps = prob.grid.steps
    xbar_t = ens.paths.mean(axis=0)
    total = np.zeros(ens.n_paths)
    for k in range(steps):
        states = ens.paths[:, k, :]
        xbar = np.broadcast_to(xbar_t[k], states.shape)
        u = control.at(k, ens.n_paths)
        lk = np.asarray(coeffs.l(k * dt, states, xbar, u), dtype=float)
        if not np.all(np.isfinite(lk)):
            raise ValidationError(f"cost: running cost non-finite at node {k}")
        total += dt * lk
    x_term = ens.paths[:, steps, :]
    phi = np.asarray(coeffs.phi(x_term, np.broadcast_to(xbar_t[steps], x_term.shape)), dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValidationError("cost: terminal cost non-finite")
    return float(np.mean(total + phi))


def _gram_pair(jac, gram_h, vec):
    """J^T gram_h vec for a (out, in) or (M, out, in) Jacobian, (M, out) vec."""
    jac = np.asarray(jac, dtype=float)
    gv = vec @ gram_h
    if jac.ndim == 2:
        return gv @ jac
    return np.einsum("bij,bi->bj", jac, gv)


def hamiltonian(t, x, xp, u, p, q, coeffs, tri):
    """Scalar Hamiltonian, batched over the leading axis."""
    x, xp, u = np.atleast_2d(x), np.atleast_2d(xp), np.atleast_2d(u)
    p, q = np.atleast_2d(p), np.atleast_2d(q)
    hv = np.asarray(coeffs.h(t, x, xp, u), dtype=float)
    gv = np.asarray(coeffs.g(t, x, xp, u), dtype=float)
    lv = np.asarray(coeffs.l(t, x, xp, u), dtype=float)
    gh = tri.gram_h
    return np.einsum("bi,ij,bj->b", hv, gh, p) + np.einsum("bi,ij,bj->b", gv, gh, q) + lv


def hamiltonian_gradients(t, x, xp, u, p, q, coeffs, tri):
    """Euclidean gradients (H_x, H_xp, H_u) of the Hamiltonian, batched."""
    x, xp, u = np.atleast_2d(x), np.atleast_2d(xp), np.atleast_2d(u)
    p, q = np.atleast_2d(p), np.atleast_2d(q)
    gh = tri.gram_h
    h_x = _gram_pair(coeffs.h_x(t, x, xp, u), gh, p) + _gram_pair(coeffs.g_x(t, x, xp, u), gh, q)
    h_x = h_x + np.asarray(coeffs.l_x(t, x, xp, u), dtype=float)
    h_xp = _gram_pair(coeffs.h_xp(t, x, xp, u), gh, p) + _gram_pair(coeffs.g_xp(t, x, xp, u), gh, q)
    h_xp = h_xp + np.asarray(coeffs.l_xp(t, x, xp, u), dtype=float)
    h_u = _gram_pair(coeffs.h_u(t, x, xp, u), gh, p) + _gram_pair(coeffs.g_u(t, x, xp, u), gh, q)
    h_u = h_u + np.asarray(coeffs.l_u(t, x, xp, u), dtype=float)
    return h_x, h_xp, h_u


def variational_gradient(prob, control, ens, adj):
    """H_u along the ensemble: the cost gradient delivered by the adjoint.

    Per-path controls get the (M, steps, m) array of H_u(t_k) evaluated at
    the stored adjoint pair; deterministic controls get its particle
    average (steps, m), which for per-node controls is exactly dJ/du_k
    divided by dt.
    """
    coeffs = prob.coeffs
    tri = prob.triple
    steps = prob.grid.steps
    dt = prob.grid.dt
    xbar_t = ens.paths.mean(axis=0)
    out = np.empty((ens.n_paths, steps, coeffs.m))
    for k in range(steps):
        t = k * dt
        states = ens.paths[:, k, :]
        xbar = np.broadcast_to(xbar_t[k], states.shape)
        u = control.at(k, ens.n_paths)
        _, _, h_u = hamiltonian_gradients(
            t, states, xbar, u, adj.p[:, k, :], adj.q[:, k, :], coeffs, tri
        )
        out[:, k, :] = h_u
    if control.deterministic:
        return out.mean(axis=0)
    return out


def directional_value(prob, grad, direction):
    """Time-rectangle ensemble pairing E int (grad, direction) dt."""
    direction = np.asarray(direction, dtype=float)
    if grad.shape != direction.shape:
        raise ValidationError("directional_value: gradient/direction shape mismatch")
    dt = prob.grid.dt
    if grad.ndim == 2:  # deterministic (steps, m)
        return float(dt * np.sum(grad * direction))
    return float(dt * np.sum(grad * direction) / grad.shape[0])


@dataclass(frozen=True)
class FDEstimate:
    value: float
    error: float
    converged: bool
    ladder: tuple


def fd_directional_derivative(prob, control, direction, epsilons=(1e-2, 5e-3, 2.5e-3)):
    """Central-difference oracle for dJ/d(eps) along ``direction``.

    Uses common random numbers (the problem seed).  Consecutive ladder
    values are Richardson-combined assuming the O(eps^2) central-difference
    error model; a ladder whose raw differences fail to shrink is flagged.
    """
    epsilons = tuple(float(e) for e in epsilons)
    if not epsilons or any(e <= 0 for e in epsilons):
        raise ValidationError("fd_directional_derivative: epsilons must be positive")
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ValidationError("fd_directional_derivative: epsilons must decrease")
    direction = np.asarray(direction, dtype=float)

    def j_at(values):
        trial = control.replace_values(values)
        ens = prob.simulate_under(trial)
        return cost(prob, trial, ens)

    raw = []
    for eps in epsilons:
        plus = j_at(control.values + eps * direction)
        minus = j_at(control.values - eps * direction)
        raw.append((plus - minus) / (2.0 * eps))

    if len(raw) == 1:
        return FDEstimate(raw[0], np.inf, False, tuple(raw))

    extrap = raw[0]
    for i in range(1, len(raw)):
        r2 = (epsilons[i] / epsilons[i - 1]) ** 2
        extrap = (raw[i] - r2 * raw[i - 1]) / (1.0 - r2)
    diffs = [abs(b - a) for a, b in zip(raw, raw[1:])]
    scale = 1.0 + abs(raw[-1])
    converged = diffs[-1] <= max(diffs) + 1e-15 and (
        len(diffs) < 2 or diffs[-1] <= 4.0 * diffs[0] + 1e-12 * scale
    )
    error = abs(extrap - raw[-1]) + 1e-14 * scale
    return FDEstimate(float(extrap), float(error), bool(converged), tuple(raw))


def _solve_adjoint_for(prob, control, ens, basis=None):
    return solve_linear_adjoint(
        prob.triple, prob.forward.operator, prob.coeffs, ens, control, basis=basis
    )


def minimum_condition_residual(prob, control, grad):
    """Fixed-point residual E int ||u - Pi(u - H_u)||^2 dt of the projected
    gradient map (zero exactly at controls satisfying the minimum condition)."""
    u = control.values
    step = prob.project(u - grad)
    dt = prob.grid.dt
    gap = u - step
    if u.ndim == 2:
        return float(dt * np.sum(gap**2))
    return float(dt * np.sum(gap**2) / u.shape[0])


@dataclass
class OptimizationReport:
    """Iterate history of the projected-gradient run.

    ``history`` rows: (iteration, cost, gradient_norm, step, residual).
    ``controls`` stores each accepted deterministic iterate so recorded
    costs can be re-evaluated; per-path runs store only the final control.
    """

    history: list
    control: ControlProcess
    converged: bool
    line_search_failed: bool = False
    controls: list = field(default_factory=list)

    @property
    def costs(self):
        return [row[1] for row in self.history]

    @property
    def final_residual(self):
        return self.history[-1][4] if self.history else np.inf


def optimize(prob, init, max_iter=200, tol=1e-10, step_init=1.0, backtrack=0.5,
             armijo=1e-4, basis=None):
    """Projected-gradient descent with backtracking on the sampled cost.

    Each iterate re-simulates the ensemble and re-solves the adjoint under
    the problem seed.  Sufficient decrease uses the proximal form
    J(u+) <= J(u) - (armijo/step) ||u+ - u||^2.  Terminates on the
    minimum-condition residual; a failed line search returns a flagged
    report instead of raising.
    """
    u = init.replace_values(prob.project(np.asarray(init.values, dtype=float)))
    ens = prob.simulate_under(u)
    j_curr = cost(prob, u, ens)
    dt = prob.grid.dt
    history = []
    controls = [u] if u.deterministic else []
    gamma = step_init

    for it in range(max_iter):
        adj = _solve_adjoint_for(prob, u, ens, basis=basis)
        grad = variational_gradient(prob, u, ens, adj)
        resid = minimum_condition_residual(prob, u, grad)
        gnorm = float(np.sqrt(dt * np.sum(grad**2) / (1 if grad.ndim == 2 else grad.shape[0])))
        history.append((it, j_curr, gnorm, gamma, resid))
        if resid <= tol:
            return OptimizationReport(history, u, True, controls=controls)

        gamma = min(gamma * 2.0, 1e3)
        while True:
            trial_vals = prob.project(u.values - gamma * grad)
            move = trial_vals - u.values
            move_sq = np.sum(move**2) * dt / (1 if grad.ndim == 2 else grad.shape[0])
            trial = u.replace_values(trial_vals)
            ens_trial = prob.simulate_under(trial)
            j_trial = cost(prob, trial, ens_trial)
            if j_trial <= j_curr - (armijo / gamma) * move_sq:
                break
            gamma *= backtrack
            if gamma < 1e-13:
                history.append((it + 1, j_curr, gnorm, gamma, resid))
                return OptimizationReport(
                    history, u, False, line_search_failed=True, controls=controls
                )
        u, ens, j_curr = trial, ens_trial, j_trial
        if u.deterministic:
            controls.append(u)

    adj = _solve_adjoint_for(prob, u, ens, basis=basis)
    grad = variational_gradient(prob, u, ens, adj)
    resid = minimum_condition_residual(prob, u, grad)
    history.append((max_iter, j_curr, float(np.sqrt(dt * np.sum(grad**2))), gamma, resid))
    return OptimizationReport(history, u, resid <= tol, controls=controls)


@dataclass(frozen=True)
class SufficiencyReport:
    certified: bool
    hamiltonian_convex: bool
    terminal_convex: bool
    pointwise_minimal: bool
    n_probes: int
    worst_convexity_gap: float
    worst_minimization_gap: float


def check_sufficiency(prob, control, ens, adj, n_probes=50, seed=7, n_controls=50):
    """Sampled verification of the sufficiency conditions.

    (a) midpoint convexity of (x, x', u) -> H(t, ., p(t), q(t)) along random
    segments, (b) midpoint convexity of Phi, (c) H at the candidate control
    is minimal against sampled admissible alternatives.  Verdict "certified"
    only if every probe passes.
    """
    rng = np.random.default_rng(seed)
    coeffs = prob.coeffs
    tri = prob.triple
    steps = prob.grid.steps
    dt = prob.grid.dt
    xbar_t = ens.paths.mean(axis=0)
    scale = 1.0 + float(np.max(np.abs(ens.paths))) + float(np.max(np.abs(control.values)))

    ham_ok = True
    term_ok = True
    min_ok = True
    worst_gap = -np.inf
    worst_min = -np.inf

    for _ in range(n_probes):
        i = int(rng.integers(ens.n_paths))
        k = int(rng.integers(steps))
        t = k * dt
        p = adj.p[i, k][None, :]
        q = adj.q[i, k][None, :]

        z1 = [scale * rng.standard_normal((1, coeffs.n)),
              scale * rng.standard_normal((1, coeffs.n)),
              prob.sample_admissible(rng, 1, scale=scale)]
        z2 = [scale * rng.standard_normal((1, coeffs.n)),
              scale * rng.standard_normal((1, coeffs.n)),
              prob.sample_admissible(rng, 1, scale=scale)]
        mid = [(a + b) / 2.0 for a, b in zip(z1, z2)]
        h1 = hamiltonian(t, *z1, p, q, coeffs, tri)[0]
        h2 = hamiltonian(t, *z2, p, q, coeffs, tri)[0]
        hm = hamiltonian(t, *mid, p, q, coeffs, tri)[0]
        gap = hm - 0.5 * (h1 + h2)
        slack = 1e-8 * (1.0 + abs(h1) + abs(h2))
        worst_gap = max(worst_gap, gap)
        if gap > slack:
            ham_ok = False

        x1, x2 = scale * rng.standard_normal((2, 1, coeffs.n))
        xp1, xp2 = scale * rng.standard_normal((2, 1, coeffs.n))
        f1 = float(coeffs.phi(x1, xp1)[0])
        f2 = float(coeffs.phi(x2, xp2)[0])
        fm = float(coeffs.phi((x1 + x2) / 2.0, (xp1 + xp2) / 2.0)[0])
        if fm - 0.5 * (f1 + f2) > 1e-8 * (1.0 + abs(f1) + abs(f2)):
            term_ok = False

        states = ens.paths[i, k][None, :]
        xbar = xbar_t[k][None, :]
        u_here = control.at(k, ens.n_paths)[i][None, :]
        h_at_u = hamiltonian(t, states, xbar, u_here, p, q, coeffs, tri)[0]
        vs = prob.sample_admissible(rng, n_controls, scale=scale)
        hv = hamiltonian(
            t,
            np.repeat(states, n_controls, axis=0),
            np.repeat(xbar, n_controls, axis=0),
            vs,
            np.repeat(p, n_controls, axis=0),
            np.repeat(q, n_controls, axis=0),
            coeffs,
            tri,
        )
        gap = h_at_u - float(np.min(hv))
        worst_min = max(worst_min, gap)
        if gap > 1e-6 * (1.0 + abs(h_at_u)):
            min_ok = False

    return SufficiencyReport(
        certified=ham_ok and term_ok and min_ok,
        hamiltonian_convex=ham_ok,
        terminal_convex=term_ok,
        pointwise_minimal=min_ok,
        n_probes=n_probes,
        worst_convexity_gap=float(worst_gap),
        worst_minimization_gap=float(worst_min),
    )


@dataclass(frozen=True)
class HamiltonianSystemReport:
    forward_defect: float
    backward_defect: float
    minimum_residual: float

    def max_defect(self):
        return max(self.forward_defect, self.backward_defect, self.minimum_residual)


def hamiltonian_system_residual(prob, control, ens, adj, basis=None):
    """Self-consistency residuals of a candidate (u, X, p, q) tuple.

    Re-simulates the forward system on the stored noise, re-solves the
    adjoint, and evaluates the minimum-condition residual; all three near
    zero certifies a solution of the coupled optimality system.
    """
    tri = prob.triple
    ens2 = prob.simulate_under(control, dw=ens.dw)
    denom = 1.0 + float(np.sqrt(np.mean(tri.h_norm(ens.paths) ** 2)))
    fwd = float(np.sqrt(np.mean(tri.h_norm(ens2.paths - ens.paths) ** 2))) / denom

    adj2 = _solve_adjoint_for(prob, control, ens, basis=basis)
    denom_p = 1.0 + float(np.sqrt(np.mean(tri.h_norm(adj.p) ** 2)))
    denom_q = 1.0 + float(np.sqrt(np.mean(tri.h_norm(adj.q) ** 2)))
    bwd = max(
        float(np.sqrt(np.mean(tri.h_norm(adj2.p - adj.p) ** 2))) / denom_p,
        float(np.sqrt(np.mean(tri.h_norm(adj2.q - adj.q) ** 2))) / denom_q,
    )

    grad = variational_gradient(prob, control, ens, adj)
    resid = minimum_condition_residual(prob, control, grad)
    return HamiltonianSystemReport(fwd, bwd, resid)
