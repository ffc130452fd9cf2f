"""Interacting-particle semi-implicit Euler scheme for the forward dynamics.

Per step and particle the update solves

    (I + dt A(t_k)) X^i_{k+1} = X^i_k + dt B^i_k + dW^i_k S^i_k,

with the principal operator treated implicitly (unconditional stability for
stiff, coercive A) and the mean-field and noise terms explicit.  Two
mean-field forms are supported:

* ``independent-copy``: B^i averages the drift over all particle pairs,
  (1/M) sum_j b(t, X^j, X^i), realizing the duplicated-space expectation
  as an interacting ensemble (self-term included; O(1/M) bias).
* ``ensemble-mean``: the primed slot receives the ensemble average
  (1/M) sum_j X^j; with a control attached the drift/diffusion come from
  the controlled coefficients h, g instead.

All randomness flows from one 64-bit seed through per-particle substreams
(SeedSequence spawn keys feeding counter-based Philox generators), so
results are bit-reproducible and independent of any scheduling order.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .coeffs import ControlCoeffs, LQCoeffs, MeanFieldDiffusion, MeanFieldDrift
from .errors import BlowUpError, SolverError, ValidationError
from .triple import DiscreteTriple, OperatorProcess, TimeGrid

__all__ = [
    "ForwardProblem",
    "ParticleEnsemble",
    "ControlProcess",
    "brownian_increments",
    "simulate",
    "ensemble_mean",
    "moment_oracle",
]

INDEPENDENT_COPY = "independent-copy"
ENSEMBLE_MEAN = "ensemble-mean"

_PAIR_CHUNK = 64  # row chunk for the O(M^2) independent-copy pairing


@dataclass(frozen=True)
class ForwardProblem:
    """State dynamics bundle.

    Exactly one of (drift & diffusion) or ``control_coeffs`` drives the
    non-operator part: attaching controlled coefficients switches the step
    to h(t, X, mean, u), g(t, X, mean, u) and requires ensemble-mean form.
    """

    triple: DiscreteTriple
    operator: OperatorProcess
    initial: np.ndarray
    form: str = ENSEMBLE_MEAN
    drift: Optional[MeanFieldDrift] = None
    diffusion: Optional[MeanFieldDiffusion] = None
    control_coeffs: Optional[ControlCoeffs] = None

    def __post_init__(self):
        x0 = np.asarray(self.initial, dtype=float).reshape(-1)
        if x0.shape[0] != self.triple.dim:
            raise ValidationError("ForwardProblem: initial vector has wrong dimension")
        if not np.all(np.isfinite(x0)):
            raise ValidationError("ForwardProblem: initial vector has non-finite entries")
        object.__setattr__(self, "initial", x0)
        if self.form not in (INDEPENDENT_COPY, ENSEMBLE_MEAN):
            raise ValidationError(f"ForwardProblem: unknown form {self.form!r}")
        if self.operator.dim != self.triple.dim:
            raise ValidationError("ForwardProblem: operator dimension mismatch")
        if self.control_coeffs is not None:
            if self.form != ENSEMBLE_MEAN:
                raise ValidationError(
                    "ForwardProblem: controlled dynamics require the ensemble-mean form"
                )
        elif self.drift is None or self.diffusion is None:
            raise ValidationError("ForwardProblem: drift and diffusion are required")
        if (
            self.form == INDEPENDENT_COPY
            and self.control_coeffs is None
            and (self.drift.uses_noise or self.diffusion.uses_noise)
        ):
            raise ValidationError(
                "ForwardProblem: noise-dependent coefficients are supported only "
                "in the ensemble-mean form"
            )


@dataclass(frozen=True)
class ControlProcess:
    """Control values, either deterministic (steps, m) or per-path (M, steps, m).

    ``projection``, when given, is the metric projection onto the closed
    convex admissible set; construction verifies membership of the stored
    values.
    """

    values: np.ndarray
    deterministic: bool
    projection: Optional[Callable] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        want = 2 if self.deterministic else 3
        if v.ndim != want:
            raise ValidationError(
                f"ControlProcess: expected {want}-d value array, got shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValidationError("ControlProcess: non-finite control values")
        if self.projection is not None:
            proj = np.asarray(self.projection(v.reshape(-1, v.shape[-1])), dtype=float)
            if not np.allclose(proj, v.reshape(-1, v.shape[-1]), atol=1e-10):
                raise ValidationError("ControlProcess: values violate the constraint set")
        object.__setattr__(self, "values", v)

    @property
    def m(self):
        return self.values.shape[-1]

    @property
    def steps(self):
        return self.values.shape[0] if self.deterministic else self.values.shape[1]

    def at(self, k, n_paths):
        """Values on step k broadcast to (M, m)."""
        if self.deterministic:
            return np.broadcast_to(self.values[k], (n_paths, self.m))
        return self.values[:, k, :]

    def replace_values(self, values):
        return ControlProcess(values, self.deterministic, self.projection)


def deterministic_control(values, projection=None):
    return ControlProcess(np.asarray(values, dtype=float), True, projection)


def zero_control(grid, m, deterministic=True, n_paths=None, projection=None):
    if deterministic:
        return ControlProcess(np.zeros((grid.steps, m)), True, projection)
    return ControlProcess(np.zeros((n_paths, grid.steps, m)), False, projection)


@dataclass(frozen=True)
class ParticleEnsemble:
    """M sample paths with their driving increments and master seed."""

    paths: np.ndarray  # (M, steps + 1, n)
    dw: np.ndarray     # (M, steps)
    seed: int
    grid: TimeGrid

    @property
    def n_paths(self):
        return self.paths.shape[0]

    @property
    def dim(self):
        return self.paths.shape[-1]

    def brownian_path(self):
        """Cumulative W(t_k), shape (M, steps + 1)."""
        w = np.zeros((self.n_paths, self.grid.steps + 1))
        np.cumsum(self.dw, axis=1, out=w[:, 1:])
        return w

    def validate(self):
        if not np.all(np.isfinite(self.paths)):
            raise ValidationError("ParticleEnsemble: non-finite states")
        m, steps = self.dw.shape
        count = m * steps
        dt = self.grid.dt
        mean = float(self.dw.mean())
        var = float(self.dw.var(ddof=1)) if count > 1 else dt
        se_mean = np.sqrt(dt / count)
        se_var = dt * np.sqrt(2.0 / max(count - 1, 1))
        if abs(mean) > 5.0 * se_mean:
            raise ValidationError(
                f"ParticleEnsemble: increment mean {mean:.3e} outside 5 standard errors"
            )
        if count > 8 and abs(var - dt) > 5.0 * se_var:
            raise ValidationError(
                f"ParticleEnsemble: increment variance {var:.3e} vs dt={dt:.3e} "
                "outside 5 standard errors"
            )


_dw_cache = {}


def brownian_increments(seed, n_paths, steps, dt):
    """Per-particle N(0, dt) increments, (n_paths, steps), read-only.

    Particle i draws from its own substream keyed by SeedSequence(seed)
    spawn child i over a counter-based Philox generator, so any particle's
    increments are independent of how many others were generated and in
    which order.  Results are cached per (seed, n_paths, steps, dt).
    """
    key = (int(seed), int(n_paths), int(steps), float(dt))
    hit = _dw_cache.get(key)
    if hit is not None:
        return hit
    children = np.random.SeedSequence(int(seed)).spawn(int(n_paths))
    out = np.empty((n_paths, steps))
    root = np.sqrt(dt)
    for i, child in enumerate(children):
        gen = np.random.Generator(np.random.Philox(child))
        out[i] = root * gen.standard_normal(steps)
    out.setflags(write=False)
    if len(_dw_cache) > 64:
        _dw_cache.clear()
    _dw_cache[key] = out
    return out


def _pairwise_average(coeff, t, states, w):
    """(1/M) sum_j coeff(t, X^j, X^i) for every i, chunked to bound memory."""
    m, n = states.shape
    acc = np.zeros((m, n))
    for start in range(0, m, _PAIR_CHUNK):
        block = states[start : start + _PAIR_CHUNK]  # (B, n) of X^j
        xp = np.repeat(block, m, axis=0)              # pair (j, i) flattened
        x = np.tile(states, (block.shape[0], 1))
        wv = np.tile(w, block.shape[0]) if w is not None else None
        vals = coeff.eval(t, xp, x, w=wv).reshape(block.shape[0], m, n)
        acc += vals.sum(axis=0)
    return acc / m


def simulate(problem, grid, n_paths, seed, control=None, dw=None):
    """Run the particle system; deterministic given (problem, grid, n_paths, seed, control).

    ``dw`` overrides the generated increments (used by perturbation studies
    that must share noise across solves, and by exchangeability tests).
    """
    if n_paths < 1:
        raise ValidationError("simulate: need at least one particle")
    problem.operator.validate(problem.triple)
    n = problem.triple.dim
    steps = grid.steps
    dt = grid.dt

    if control is not None:
        if problem.control_coeffs is None:
            raise ValidationError("simulate: control given but problem has no control hook")
        if control.steps != steps:
            raise ValidationError("simulate: control grid does not match the time grid")
        if not control.deterministic and control.values.shape[0] != n_paths:
            raise ValidationError("simulate: per-path control has wrong path count")
    elif problem.control_coeffs is not None:
        raise ValidationError("simulate: problem expects a control process")

    if dw is None:
        dw = brownian_increments(seed, n_paths, steps, dt)
    else:
        dw = np.asarray(dw, dtype=float)
        if dw.shape != (n_paths, steps):
            raise ValidationError("simulate: dw override has wrong shape")

    paths = np.empty((n_paths, steps + 1, n))
    paths[:, 0, :] = problem.initial
    eye = np.eye(n)
    w_running = np.zeros(n_paths)

    for k in range(steps):
        t = k * dt
        states = paths[:, k, :]
        if control is not None:
            u = control.at(k, n_paths)
            xbar = states.mean(axis=0)
            xbar_b = np.broadcast_to(xbar, states.shape)
            b_term = problem.control_coeffs.h(t, states, xbar_b, u)
            s_term = problem.control_coeffs.g(t, states, xbar_b, u)
        elif problem.form == ENSEMBLE_MEAN:
            xbar = states.mean(axis=0)
            xbar_b = np.broadcast_to(xbar, states.shape)
            wv = w_running if (problem.drift.uses_noise or problem.diffusion.uses_noise) else None
            b_term = problem.drift.eval(t, xbar_b, states, w=wv)
            s_term = problem.diffusion.eval(t, xbar_b, states, w=wv)
        else:
            b_term = _pairwise_average(problem.drift, t, states, None)
            s_term = _pairwise_average(problem.diffusion, t, states, None)

        rhs = states + dt * np.asarray(b_term) + dw[:, k, None] * np.asarray(s_term)
        lhs = eye + dt * problem.operator.at(k)
        try:
            paths[:, k + 1, :] = np.linalg.solve(lhs, rhs.T).T
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"simulate: singular (I + dt A) at node {k}") from exc
        if not np.all(np.isfinite(paths[:, k + 1, :])):
            raise BlowUpError(f"simulate: non-finite state after step {k}", step=k)
        w_running = w_running + dw[:, k]

    ens = ParticleEnsemble(paths=paths, dw=np.asarray(dw), seed=int(seed), grid=grid)
    ens.validate()
    return ens


def ensemble_mean(ens):
    """Arithmetic particle average per node, (steps + 1, n)."""
    return ens.paths.mean(axis=0)


def _affine_parts(fn, t, n, rng, tol=1e-8):
    """Extract (const, J_x, J_xp) of an affine map, rejecting nonlinear ones."""
    zero = np.zeros((1, n))
    const = np.asarray(fn(t, zero, zero)).reshape(n)
    jx = np.empty((n, n))
    jxp = np.empty((n, n))
    for j in range(n):
        e = np.zeros((1, n))
        e[0, j] = 1.0
        jx[:, j] = np.asarray(fn(t, zero, e)).reshape(n) - const
        jxp[:, j] = np.asarray(fn(t, e, zero)).reshape(n) - const
    for _ in range(2):
        x = rng.standard_normal((1, n))
        xp = rng.standard_normal((1, n))
        want = const + jx @ x[0] + jxp @ xp[0]
        got = np.asarray(fn(t, xp, x)).reshape(n)
        if np.max(np.abs(got - want)) > tol * (1.0 + np.max(np.abs(want))):
            raise ValidationError("moment_oracle: drift is not affine in its state arguments")
    return const, jx, jxp


def moment_oracle(problem, grid, control=None, lq=None, initial=None):
    """Closed deterministic recursion for the mean of linear dynamics.

    Solves (I + dt A) m_{k+1} = m_k + dt (J_x + J_xp) m_k + dt (b0 + C u_k).
    For LQ data pass ``lq``; otherwise the problem's drift is probed for
    affinity and rejected when nonlinear.  Controls must be deterministic.
    """
    if control is not None and not control.deterministic:
        raise ValidationError("moment_oracle: control must be deterministic")
    n = problem.triple.dim
    dt = grid.dt
    m0 = problem.initial if initial is None else np.asarray(initial, dtype=float)
    out = np.empty((grid.steps + 1, n))
    out[0] = m0
    eye = np.eye(n)
    rng = np.random.default_rng(0)

    for k in range(grid.steps):
        t = k * dt
        if lq is not None:
            jx, jxp = lq.at("B1", k), lq.at("B2", k)
            const = np.zeros(n)
            if control is not None:
                const = const + lq.at("C", k) @ control.values[k]
        else:
            const, jx, jxp = _affine_parts(problem.drift.eval, t, n, rng)
        rhs = out[k] + dt * ((jx + jxp) @ out[k] + const)
        lhs = eye + dt * problem.operator.at(k)
        out[k + 1] = np.linalg.solve(lhs, rhs)
    return out
