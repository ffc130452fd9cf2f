"""Finite-dimensional realization of the V ⊂ H ⊂ V* frame.

Everything lives in coordinates on R^n.  Two symmetric positive-definite
Gram matrices carry the geometry:

* ``gram_h`` realizes the pivot inner product ``(x, y)_H = x^T gram_h y``,
* ``gram_v`` realizes the stronger form inducing ``||x||_V``.

Operators A: V -> V* are stored as plain coordinate matrices, with the
duality pairing realized through the pivot space:

    <A x, y> := (A x, y)_H = x^T A^T gram_h y.

For the canonical case gram_h = I this reduces to ordinary matrix algebra;
for a lumped-mass discretization (gram_h = h I) it reproduces the weak
form of the underlying differential operator.  All operations here are
pure functions of immutable arrays and are safe to call concurrently.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# Absolute eigenvalue slack for positive-semidefiniteness certificates.
# Double-precision eigensolver noise floor for n <= 256.
PSD_SLACK = 1e-10

_SYM_RTOL = 1e-12


def _as_matrix(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"{name} must be a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    return a


def _check_spd(a, name):
    scale = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > _SYM_RTOL * (1.0 + scale):
        raise ValidationError(f"{name} is not symmetric within tolerance")
    eig = np.linalg.eigvalsh(0.5 * (a + a.T))
    if eig.min() <= 0.0:
        raise ValidationError(f"{name} must be positive definite (min eig {eig.min():.3e})")


@dataclass(frozen=True)
class DiscreteTriple:
    """Two SPD Gram matrices on R^n: the pivot metric and the V-metric."""

    gram_h: np.ndarray
    gram_v: np.ndarray

    def __post_init__(self):
        gh = _as_matrix(self.gram_h, "gram_h")
        gv = _as_matrix(self.gram_v, "gram_v")
        if gh.shape != gv.shape:
            raise ValidationError("gram_h and gram_v must have the same shape")
        _check_spd(gh, "gram_h")
        _check_spd(gv, "gram_v")
        object.__setattr__(self, "gram_h", gh)
        object.__setattr__(self, "gram_v", gv)

    @property
    def dim(self):
        return self.gram_h.shape[0]

    def h_norm(self, x):
        """||x||_H for a vector (n,) or a batch (..., n)."""
        x = np.asarray(x, dtype=float)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", x, self.gram_h, x), 0.0))

    def v_norm(self, x):
        x = np.asarray(x, dtype=float)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", x, self.gram_v, x), 0.0))


def identity_triple(n):
    """The Euclidean triple: gram_h = gram_v = I."""
    eye = np.eye(n)
    return DiscreteTriple(eye, eye.copy())


def h_inner(x, y, tri):
    """Pivot inner product x^T gram_h y.  Accepts batches in the leading axes."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != tri.dim or y.shape[-1] != tri.dim:
        raise ValidationError(
            f"h_inner: vectors of length {x.shape[-1]}/{y.shape[-1]} vs dim {tri.dim}"
        )
    return np.einsum("...i,ij,...j->...", x, tri.gram_h, y)


def embedding_constant(tri):
    """Largest c with ||x||_V >= c ||x||_H, from the (gram_v, gram_h) pencil."""
    l = np.linalg.cholesky(tri.gram_h)
    linv = np.linalg.inv(l)
    m = linv @ tri.gram_v @ linv.T
    lam_min = np.linalg.eigvalsh(0.5 * (m + m.T)).min()
    return float(np.sqrt(max(lam_min, 0.0)))


@dataclass(frozen=True)
class CheckReport:
    """Outcome of a one-shot certificate check."""

    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def __bool__(self):
        return self.passed


def check_coercivity(a, tri, alpha, lam):
    """Certify <A x, x> + lam ||x||_H^2 >= alpha ||x||_V^2 on all of R^n.

    Only the symmetric part of the pairing matters for the quadratic form.
    Passes iff the minimum eigenvalue of

        sym(gram_h A) + lam gram_h - alpha gram_v

    is >= -PSD_SLACK; the report carries that eigenvalue.
    """
    a = _as_matrix(a, "A")
    if a.shape[0] != tri.dim:
        raise ValidationError("check_coercivity: operator dimension mismatch")
    if not alpha > 0:
        raise ValidationError("check_coercivity: alpha must be positive")
    gha = tri.gram_h @ a
    form = 0.5 * (gha + gha.T) + lam * tri.gram_h - alpha * tri.gram_v
    min_eig = float(np.linalg.eigvalsh(form).min())
    return CheckReport(
        passed=min_eig >= -PSD_SLACK,
        value=min_eig,
        threshold=-PSD_SLACK,
        detail=f"alpha={alpha}, lambda={lam}",
    )


def required_lambda(a, tri, alpha):
    """Smallest lam (up to slack) making check_coercivity(a, tri, alpha, lam) pass.

    Solves the pencil problem min-eig(sym(gram_h A) - alpha gram_v + lam gram_h) = 0.
    """
    a = _as_matrix(a, "A")
    gha = tri.gram_h @ a
    base = 0.5 * (gha + gha.T) - alpha * tri.gram_v
    l = np.linalg.cholesky(tri.gram_h)
    linv = np.linalg.inv(l)
    m = linv @ base @ linv.T
    lam_min = np.linalg.eigvalsh(0.5 * (m + m.T)).min()
    return float(max(-lam_min, 0.0))


def operator_norm_v_to_vstar(a, tri):
    """Norm of A as a map V -> V* under the coordinate/duality conventions above."""
    a = _as_matrix(a, "A")
    l = np.linalg.cholesky(tri.gram_v)
    linv = np.linalg.inv(l)
    m = linv @ (tri.gram_h @ a) @ linv.T
    return float(np.linalg.norm(m, ord=2))


def check_boundedness(a, tri, bound_c):
    """Certify ||A||_{L(V, V*)} <= bound_c (plus eigen-noise slack)."""
    if not bound_c > 0:
        raise ValidationError("check_boundedness: bound must be positive")
    norm = operator_norm_v_to_vstar(a, tri)
    return CheckReport(
        passed=norm <= bound_c + PSD_SLACK,
        value=norm,
        threshold=bound_c,
    )


def adjoint_in_H(a, tri):
    """H-adjoint A* = gram_h^{-1} A^T gram_h, so (A x, y)_H = (x, A* y)_H."""
    a = _as_matrix(a, "A")
    if a.shape[0] != tri.dim:
        raise ValidationError("adjoint_in_H: dimension mismatch")
    return np.linalg.solve(tri.gram_h, a.T @ tri.gram_h)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k dt on [0, T]."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValidationError("TimeGrid: horizon must be positive")
        if not (isinstance(self.steps, (int, np.integer)) and self.steps >= 1):
            raise ValidationError("TimeGrid: steps must be an integer >= 1")

    @property
    def dt(self):
        return self.horizon / self.steps

    @property
    def nodes(self):
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass(frozen=True)
class OperatorProcess:
    """Time-indexed principal operator with its declared constants.

    ``values`` is either a single (n, n) matrix (constant in time) or a
    (steps, n, n) stack giving A(t_k) on each step.  The declared constants
    are certified node by node by :func:`validate`.
    """

    values: np.ndarray
    alpha: float
    lam: float
    bound_c: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim not in (2, 3):
            raise ValidationError("OperatorProcess: values must be (n,n) or (steps,n,n)")
        if v.shape[-1] != v.shape[-2]:
            raise ValidationError("OperatorProcess: operator matrices must be square")
        if not np.all(np.isfinite(v)):
            raise ValidationError("OperatorProcess: non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def dim(self):
        return self.values.shape[-1]

    def at(self, k):
        """Operator matrix on step k (piecewise constant between nodes)."""
        if self.values.ndim == 2:
            return self.values
        return self.values[k]

    def n_distinct(self):
        return 1 if self.values.ndim == 2 else self.values.shape[0]

    def validate(self, tri):
        """Run coercivity and boundedness certificates on every stored node.

        Raises ValidationError naming the first failing node.
        """
        for k in range(self.n_distinct()):
            a = self.at(k)
            rep = check_coercivity(a, tri, self.alpha, self.lam)
            if not rep.passed:
                raise ValidationError(
                    f"operator fails coercivity at node {k}: min eig {rep.value:.3e}"
                )
            rep = check_boundedness(a, tri, self.bound_c)
            if not rep.passed:
                raise ValidationError(
                    f"operator fails boundedness at node {k}: norm {rep.value:.3e} "
                    f"> {self.bound_c}"
                )


def _pencil_max(tri):
    """Largest generalized eigenvalue of (gram_v, gram_h)."""
    l = np.linalg.cholesky(tri.gram_h)
    linv = np.linalg.inv(l)
    m = linv @ tri.gram_v @ linv.T
    return float(np.linalg.eigvalsh(0.5 * (m + m.T)).max())


def zero_operator(n, tri=None):
    """A == 0 with certificate constants derived from the Gram pencil.

    lam ||x||_H^2 >= alpha ||x||_V^2 holds with alpha = 1 once
    lam dominates the largest (gram_v, gram_h) pencil eigenvalue.
    """
    if tri is None:
        tri = identity_triple(n)
    lam = _pencil_max(tri) * (1.0 + 1e-9)
    return OperatorProcess(np.zeros((n, n)), alpha=1.0, lam=lam, bound_c=1.0)
