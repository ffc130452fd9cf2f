"""Coefficient models and validators for the standing assumptions.

Conventions used throughout the package:

* Coefficient callables are vectorized: state arguments arrive as batches
  ``(M, n)`` (or broadcastable ``(n,)``) and return batches of the same
  leading shape.
* Mean-field ("primed") arguments always sit *before* the own-state
  arguments, matching the order b(t, x', x) used by the dynamics.
* Controlled-coefficient callables use (t, x, x', u) order.
* Scalar costs l and Phi return ``(M,)`` batches; their derivative fields
  are plain Euclidean gradients/Jacobians so they can be checked against
  central finite differences directly.  Metric-aware machinery (adjoint
  drivers, Hamiltonian pairings) applies gram_h factors where needed.

Coefficient evaluation must be reentrant: no internal mutable state.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ValidationError
from .triple import DiscreteTriple, TimeGrid

__all__ = [
    "MeanFieldDrift",
    "MeanFieldDiffusion",
    "BackwardDriver",
    "ControlCoeffs",
    "LQCoeffs",
    "estimate_lipschitz",
    "validate_lq",
    "lq_to_control_coeffs",
    "validate_control_coeffs",
]


@dataclass(frozen=True)
class MeanFieldDrift:
    """Drift b(t, x', x) with a declared Lipschitz constant in (x, x').

    ``uses_noise`` opts into randomness: the solver then passes the current
    Brownian value per path as a keyword ``w``, which keeps adaptedness
    automatic while allowing genuinely random coefficient fields.
    """

    fn: Callable
    lipschitz: float
    uses_noise: bool = False

    def eval(self, t, x_other, x, w=None):
        if self.uses_noise:
            out = self.fn(t, x_other, x, w)
        else:
            out = self.fn(t, x_other, x)
        return np.asarray(out, dtype=float)


@dataclass(frozen=True)
class MeanFieldDiffusion(MeanFieldDrift):
    """Diffusion g(t, x', x); same shape and contract as the drift."""


@dataclass(frozen=True)
class BackwardDriver:
    """Driver f(t, y', z', y, z) of the backward equation, Lipschitz in all four."""

    fn: Callable
    lipschitz: float

    def eval(self, t, y_other, z_other, y, z):
        return np.asarray(self.fn(t, y_other, z_other, y, z), dtype=float)


def _probe_args(coeff):
    if isinstance(coeff, BackwardDriver):
        return 4
    return 2


def estimate_lipschitz(coeff, tri, probes, seed, scale=1.0):
    """Maximal sampled difference ratio ||Δ eval||_H / Σ ||Δ arg||_H.

    Probe pairs cycle through perturbing each argument alone and then all
    arguments jointly, so per-argument Lipschitz directions are actually
    attained by the sample.  Probes are drawn sequentially from one seeded
    stream, so the estimate over a larger probe count extends (never
    replaces) the smaller one.
    """
    if probes < 2:
        raise ValidationError("estimate_lipschitz: probes must be >= 2")
    n = tri.dim
    n_args = _probe_args(coeff)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for j in range(probes):
        t = float(rng.uniform(0.0, 1.0))
        base = [scale * rng.standard_normal(n) for _ in range(n_args)]
        mode = j % (n_args + 1)
        pert = []
        for a in range(n_args):
            step = scale * rng.standard_normal(n)
            if mode < n_args and a != mode:
                step = np.zeros(n)
            pert.append(base[a] + step)
        if isinstance(coeff, BackwardDriver):
            f0 = coeff.eval(t, *base)
            f1 = coeff.eval(t, *pert)
        else:
            f0 = coeff.eval(t, base[0], base[1])
            f1 = coeff.eval(t, pert[0], pert[1])
        if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(f1))):
            raise ValidationError("estimate_lipschitz: coefficient returned non-finite values")
        denom = sum(float(tri.h_norm(p - b)) for p, b in zip(pert, base))
        if denom <= 0.0:
            continue
        ratio = float(tri.h_norm(f1 - f0)) / denom
        worst = max(worst, ratio)
    return worst


# ---------------------------------------------------------------------------
# Controlled coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlCoeffs:
    """Controlled dynamics h, g, running cost l, terminal cost Phi, and
    their first derivatives.

    All callables are batched.  Jacobians may return a single matrix
    (state-independent case) or a stacked ``(M, out, in)`` batch; gradients
    of the scalar costs return ``(M, dim)`` arrays.  Derivatives here are
    Euclidean; see the module docstring.
    """

    n: int
    m: int
    h: Callable    # (t, x, x', u) -> (M, n)
    g: Callable
    l: Callable    # (t, x, x', u) -> (M,)
    phi: Callable  # (x, x') -> (M,)
    h_x: Callable  # (t, x, x', u) -> (n, n) or (M, n, n)
    h_xp: Callable
    h_u: Callable  # -> (n, m) or (M, n, m)
    g_x: Callable
    g_xp: Callable
    g_u: Callable
    l_x: Callable   # -> (M, n)
    l_xp: Callable
    l_u: Callable   # -> (M, m)
    phi_x: Callable  # (x, x') -> (M, n)
    phi_xp: Callable


@dataclass(frozen=True)
class LQCoeffs:
    """Matrix data of the linear-quadratic specialization.

    Dynamics   h = B1 x + B2 x' + C u,   g = D1 x + D2 x' + F u.
    Costs      l = x^T G1 x + x'^T G2 x' + u^T N u,
               Phi = x^T Phi1 x + x'^T Phi2 x',
    with all quadratic forms plain Euclidean forms in coordinates.  Each of
    B1..N may be a single matrix or a per-step (steps, ...) stack; Phi1 and
    Phi2 are single matrices.  ``k_min`` is the declared uniform positivity
    floor of N.
    """

    n: int
    m: int
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    F: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    N: np.ndarray
    Phi1: np.ndarray
    Phi2: np.ndarray
    k_min: float = 1e-8

    def __post_init__(self):
        def conv(name, val, rows, cols, terminal=False):
            a = np.asarray(val, dtype=float)
            want = (rows, cols)
            if a.shape == want or (not terminal and a.ndim == 3 and a.shape[1:] == want):
                if not np.all(np.isfinite(a)):
                    raise ValidationError(f"LQCoeffs.{name}: non-finite entries")
                return a
            raise ValidationError(
                f"LQCoeffs.{name}: expected shape {want} (optionally time-stacked), got {a.shape}"
            )

        n, m = self.n, self.m
        for name, rows, cols in [
            ("B1", n, n), ("B2", n, n), ("C", n, m), ("D1", n, n),
            ("D2", n, n), ("F", n, m), ("G1", n, n), ("G2", n, n), ("N", m, m),
        ]:
            object.__setattr__(self, name, conv(name, getattr(self, name), rows, cols))
        for name in ("Phi1", "Phi2"):
            object.__setattr__(self, name, conv(name, getattr(self, name), n, n, terminal=True))
        if not self.k_min > 0:
            raise ValidationError("LQCoeffs: k_min must be positive")

    def at(self, name, k):
        a = getattr(self, name)
        return a if a.ndim == 2 else a[k]


def lq_zero(n, m, k_min=1.0):
    """All-zero LQ data except N = k_min * I (keeps validate_lq satisfied)."""
    z = np.zeros((n, n))
    zc = np.zeros((n, m))
    return LQCoeffs(
        n=n, m=m, B1=z, B2=z.copy(), C=zc, D1=z.copy(), D2=z.copy(), F=zc.copy(),
        G1=z.copy(), G2=z.copy(), N=k_min * np.eye(m), Phi1=z.copy(), Phi2=z.copy(),
        k_min=k_min,
    )


@dataclass(frozen=True)
class LQValidationReport:
    passed: bool
    messages: tuple
    min_eigs: dict
    symmetry_defects: dict

    def __bool__(self):
        return self.passed


def validate_lq(lq):
    """Check symmetry, nonnegativity of G1, G2, Phi1, Phi2 and N >= k_min I.

    Report-only: per matrix (and per node for time-stacked data) the
    symmetry defect and the minimal eigenvalue, plus an overall verdict.
    """
    messages = []
    min_eigs = {}
    defects = {}
    tol = 1e-10

    def scan(name, required_floor):
        a = getattr(lq, name)
        stack = a[None] if a.ndim == 2 else a
        worst_eig = np.inf
        worst_defect = 0.0
        for k in range(stack.shape[0]):
            mat = stack[k]
            worst_defect = max(worst_defect, float(np.linalg.norm(mat - mat.T)))
            worst_eig = min(worst_eig, float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min()))
        min_eigs[name] = worst_eig
        defects[name] = worst_defect
        if worst_defect > tol * (1.0 + float(np.linalg.norm(a))):
            messages.append(f"{name} is not symmetric (defect {worst_defect:.3e})")
        if worst_eig < required_floor - tol:
            if name == "N":
                messages.append("N not uniformly positive")
            else:
                messages.append(f"{name} not positive semi-definite (min eig {worst_eig:.3e})")

    for name in ("G1", "G2", "Phi1", "Phi2"):
        scan(name, 0.0)
    scan("N", lq.k_min)
    return LQValidationReport(
        passed=not messages,
        messages=tuple(messages),
        min_eigs=min_eigs,
        symmetry_defects=defects,
    )


def _node_index(t, grid):
    k = int(round(t / grid.dt))
    return min(max(k, 0), grid.steps - 1)


def _batch(x, n):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :]
    return x


def lq_to_control_coeffs(lq, grid):
    """Specialize the generic controlled-coefficient interface to LQ data.

    Values and derivatives are the exact affine/quadratic expressions, so
    the finite-difference invariant on the derivative fields holds by
    construction.  Time lookup is piecewise constant between grid nodes.
    """
    rep = validate_lq(lq)
    if not rep.passed:
        raise ValidationError("lq_to_control_coeffs: " + "; ".join(rep.messages))

    def mat(name):
        def get(t):
            return lq.at(name, _node_index(t, grid))
        return get

    B1, B2, C = mat("B1"), mat("B2"), mat("C")
    D1, D2, F = mat("D1"), mat("D2"), mat("F")
    G1, G2, Nm = mat("G1"), mat("G2"), mat("N")

    def h(t, x, xp, u):
        return _batch(x, lq.n) @ B1(t).T + _batch(xp, lq.n) @ B2(t).T + _batch(u, lq.m) @ C(t).T

    def g(t, x, xp, u):
        return _batch(x, lq.n) @ D1(t).T + _batch(xp, lq.n) @ D2(t).T + _batch(u, lq.m) @ F(t).T

    def quad(mat_, v):
        return np.einsum("bi,ij,bj->b", v, mat_, v)

    def l(t, x, xp, u):
        return (
            quad(G1(t), _batch(x, lq.n))
            + quad(G2(t), _batch(xp, lq.n))
            + quad(Nm(t), _batch(u, lq.m))
        )

    def phi(x, xp):
        return quad(lq.Phi1, _batch(x, lq.n)) + quad(lq.Phi2, _batch(xp, lq.n))

    return ControlCoeffs(
        n=lq.n,
        m=lq.m,
        h=h,
        g=g,
        l=l,
        phi=phi,
        h_x=lambda t, x, xp, u: B1(t),
        h_xp=lambda t, x, xp, u: B2(t),
        h_u=lambda t, x, xp, u: C(t),
        g_x=lambda t, x, xp, u: D1(t),
        g_xp=lambda t, x, xp, u: D2(t),
        g_u=lambda t, x, xp, u: F(t),
        l_x=lambda t, x, xp, u: 2.0 * _batch(x, lq.n) @ G1(t).T,
        l_xp=lambda t, x, xp, u: 2.0 * _batch(xp, lq.n) @ G2(t).T,
        l_u=lambda t, x, xp, u: 2.0 * _batch(u, lq.m) @ Nm(t).T,
        phi_x=lambda x, xp: 2.0 * _batch(x, lq.n) @ lq.Phi1.T,
        phi_xp=lambda x, xp: 2.0 * _batch(xp, lq.n) @ lq.Phi2.T,
    )


def _jac_apply(jac, vec):
    """Apply a (n_out, n_in) or (M, n_out, n_in) Jacobian to (M, n_in) rows."""
    jac = np.asarray(jac, dtype=float)
    if jac.ndim == 2:
        return vec @ jac.T
    return np.einsum("bij,bj->bi", jac, vec)


@dataclass(frozen=True)
class CoeffsValidationReport:
    passed: bool
    max_rel_error: float
    worst_field: str
    phi_growth_linear: bool
    phi_growth_quadratic: bool
    messages: tuple

    def __bool__(self):
        return self.passed


def validate_control_coeffs(coeffs, probes=50, seed=0, scale=1.0, rtol=1e-4, step=1e-5):
    """Directional finite-difference check of every derivative field.

    At each probe, random directions (vx, vxp, vu) are drawn and the
    Jacobian-vector (or gradient-dot) products are compared against central
    differences of the value fields.  Also samples the terminal-cost
    gradient growth, recording whether the linear bound
    ||Phi_x|| <= C (1 + ||x|| + ||x'||) holds in addition to the quadratic
    one (the quadratic bound is the one required to pass).
    """
    rng = np.random.default_rng(seed)
    n, m = coeffs.n, coeffs.m
    worst = 0.0
    worst_field = ""
    messages = []

    def compare(name, got, want, ref):
        nonlocal worst, worst_field
        err = float(np.max(np.abs(got - want)))
        rel = err / (1.0 + float(np.max(np.abs(ref))))
        if rel > worst:
            worst, worst_field = rel, name

    for _ in range(probes):
        t = float(rng.uniform(0.0, 1.0))
        x = scale * rng.standard_normal((1, n))
        xp = scale * rng.standard_normal((1, n))
        u = scale * rng.standard_normal((1, m))
        vx = rng.standard_normal((1, n))
        vxp = rng.standard_normal((1, n))
        vu = rng.standard_normal((1, m))

        for name, fn, jac, slot, v in [
            ("h_x", coeffs.h, coeffs.h_x, 0, vx),
            ("h_xp", coeffs.h, coeffs.h_xp, 1, vxp),
            ("h_u", coeffs.h, coeffs.h_u, 2, vu),
            ("g_x", coeffs.g, coeffs.g_x, 0, vx),
            ("g_xp", coeffs.g, coeffs.g_xp, 1, vxp),
            ("g_u", coeffs.g, coeffs.g_u, 2, vu),
        ]:
            args = [x, xp, u]
            plus = list(args)
            minus = list(args)
            plus[slot] = args[slot] + step * v
            minus[slot] = args[slot] - step * v
            fd = (fn(t, *plus) - fn(t, *minus)) / (2.0 * step)
            jv = _jac_apply(jac(t, x, xp, u), v)
            compare(name, jv, fd, fd)

        for name, fn, grad, slot, v in [
            ("l_x", coeffs.l, coeffs.l_x, 0, vx),
            ("l_xp", coeffs.l, coeffs.l_xp, 1, vxp),
            ("l_u", coeffs.l, coeffs.l_u, 2, vu),
        ]:
            args = [x, xp, u]
            plus = list(args)
            minus = list(args)
            plus[slot] = args[slot] + step * v
            minus[slot] = args[slot] - step * v
            fd = (fn(t, *plus) - fn(t, *minus)) / (2.0 * step)
            gd = np.sum(np.asarray(grad(t, x, xp, u)) * v, axis=-1)
            compare(name, gd, fd, fd)

        for name, grad, slot, v in [("phi_x", coeffs.phi_x, 0, vx), ("phi_xp", coeffs.phi_xp, 1, vxp)]:
            args = [x, xp]
            plus = list(args)
            minus = list(args)
            plus[slot] = args[slot] + step * v
            minus[slot] = args[slot] - step * v
            fd = (coeffs.phi(*plus) - coeffs.phi(*minus)) / (2.0 * step)
            gd = np.sum(np.asarray(grad(x, xp)) * v, axis=-1)
            compare(name, gd, fd, fd)

    if worst > rtol:
        messages.append(f"derivative field {worst_field} deviates from FD by {worst:.3e}")

    # Growth sampling for the terminal-cost gradient on balls of radius 1..8.
    lin_ok = True
    quad_ok = True
    lin_c = quad_c = 0.0
    for r in (1.0, 2.0, 4.0, 8.0):
        x = r * rng.standard_normal((8, n))
        xp = r * rng.standard_normal((8, n))
        gnorm = np.linalg.norm(np.asarray(coeffs.phi_x(x, xp)), axis=-1)
        xn = np.linalg.norm(x, axis=-1)
        xpn = np.linalg.norm(xp, axis=-1)
        lin_c = max(lin_c, float(np.max(gnorm / (1.0 + xn + xpn))))
        quad_c = max(quad_c, float(np.max(gnorm / (1.0 + xn + xpn**2))))
    # Bounds "hold" when the sampled constants are stable rather than blowing
    # up with the radius; re-sample at double radius and compare.
    for r in (16.0,):
        x = r * rng.standard_normal((8, n))
        xp = r * rng.standard_normal((8, n))
        gnorm = np.linalg.norm(np.asarray(coeffs.phi_x(x, xp)), axis=-1)
        xn = np.linalg.norm(x, axis=-1)
        xpn = np.linalg.norm(xp, axis=-1)
        lin_ok = float(np.max(gnorm / (1.0 + xn + xpn))) <= 4.0 * lin_c + 1e-12
        quad_ok = float(np.max(gnorm / (1.0 + xn + xpn**2))) <= 4.0 * quad_c + 1e-12
    if not quad_ok:
        messages.append("terminal-cost gradient exceeds the quadratic growth bound")

    return CoeffsValidationReport(
        passed=(worst <= rtol) and quad_ok,
        max_rel_error=worst,
        worst_field=worst_field or "",
        phi_growth_linear=bool(lin_ok),
        phi_growth_quadratic=bool(quad_ok),
        messages=tuple(messages),
    )
