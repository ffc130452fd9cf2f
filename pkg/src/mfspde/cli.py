"""Config-driven command line front end.

Two commands over a plain-text sectioned config format:

    mfspde run <config>      execute one experiment, write CSVs + manifest
    mfspde verify <config>   run a verification bundle, report pass/fail

Config grammar: ``[section]`` headers with ``key = value`` lines; dense
matrices and vectors as ``[matrix NAME]`` / ``[vector NAME]`` blocks of
whitespace- or comma-separated numbers (one matrix row per line), with
``[matrix NAME @ k]`` overriding individual time nodes; ``#`` comments.
Unknown keys are rejected and the seed is mandatory: all randomness flows
from it, there are no hidden entropy sources.

Exit codes: 0 success, 1 failed verification checks, 2 validation error,
3 solver non-convergence, 4 I/O error.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from . import control as control_mod
from . import exports
from .backward import BackwardProblem, RegressionBasis, constant_terminal, solve_backward
from .cauchy import CauchySpec, constant_field, solve_cauchy
from .coeffs import BackwardDriver, LQCoeffs, MeanFieldDiffusion, MeanFieldDrift
from .errors import NonConvergenceError, SolverError, ValidationError
from .estimates import backward_dependence_study, forward_apriori_study, forward_dependence_study
from .forward import ControlProcess, ForwardProblem, ensemble_mean, simulate
from .lq import LQProblem, solve_fixed_point, verify_coercivity
from .triple import DiscreteTriple, OperatorProcess, TimeGrid, identity_triple, required_lambda

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_IO = 4


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

_KNOWN_KEYS = {
    "experiment": {"kind", "seed", "bundle", "target", "deltas", "scales"},
    "grid": {"horizon", "steps"},
    "problem": {"n", "m", "paths", "x0", "form", "control_mode"},
    "lq": {"k_min"},
    "operator": {"alpha", "lambda", "bound"},
    "drift": {"kind"},
    "diffusion": {"kind"},
    "backward": {"terminal", "driver_const"},
    "solver": {"damping", "tol", "max_iter", "basis_degree", "ridge", "picard_tol"},
    "output": {"files"},
    "cauchy": {
        "a", "b", "c", "eta", "rho", "sigma", "kappa", "bound_k",
        "half_width", "mesh_points", "initial", "paths",
    },
    "study": {"perturb", "magnitude"},
}

_KNOWN_KINDS = (
    "forward-sim", "backward-solve", "gradcheck", "lq-solve", "cauchy",
    "dependence-study", "verify",
)


class Config:
    def __init__(self):
        self.sections = {}
        self.matrices = {}
        self.node_matrices = {}

    def has(self, section):
        return section in self.sections

    def get(self, section, key, default=None, required=False):
        sec = self.sections.get(section, {})
        if key in sec:
            return sec[key]
        if required:
            raise ValidationError(f"config: missing key '{key}' in section [{section}]")
        return default

    def get_float(self, section, key, default=None, required=False):
        v = self.get(section, key, default, required)
        if v is None:
            return None
        try:
            return float(v)
        except (TypeError, ValueError):
            raise ValidationError(f"config: key '{key}' in [{section}] must be a number")

    def get_int(self, section, key, default=None, required=False):
        v = self.get(section, key, default, required)
        if v is None:
            return None
        try:
            f = float(v)
        except (TypeError, ValueError):
            raise ValidationError(f"config: key '{key}' in [{section}] must be an integer")
        if f != int(f):
            raise ValidationError(f"config: key '{key}' in [{section}] must be an integer")
        return int(f)

    def get_floats(self, section, key, required=False):
        v = self.get(section, key, required=required)
        if v is None:
            return None
        parts = v.replace(",", " ").split()
        try:
            return [float(p) for p in parts]
        except ValueError:
            raise ValidationError(f"config: key '{key}' in [{section}] must list numbers")

    def matrix(self, name, default=None):
        if name in self.matrices:
            return self.matrices[name]
        return default


def parse_config(text):
    cfg = Config()
    section = None
    kind = None
    name = None
    rows = []

    def flush():
        nonlocal rows
        if kind == "matrix" and name is not None:
            arr = np.array(rows, dtype=float)
            if "@" in name:
                base, _, node = name.partition("@")
                cfg.node_matrices.setdefault(base.strip(), {})[int(node)] = arr
            else:
                cfg.matrices[name] = arr
        elif kind == "vector" and name is not None:
            cfg.matrices[name] = np.array(rows, dtype=float).reshape(-1)
        rows = []

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            flush()
            head = line[1:-1].strip()
            if head.startswith("matrix ") or head.startswith("vector "):
                kind, name = head.split(None, 1)
                name = name.strip()
                section = None
            else:
                kind, name = None, None
                section = head
                if section not in _KNOWN_KEYS:
                    raise ValidationError(f"config line {lineno}: unknown section [{section}]")
                cfg.sections.setdefault(section, {})
            continue
        if kind in ("matrix", "vector"):
            try:
                rows.append([float(p) for p in line.replace(",", " ").split()])
            except ValueError:
                raise ValidationError(f"config line {lineno}: bad number row in [{kind} {name}]")
            continue
        if section is None:
            raise ValidationError(f"config line {lineno}: content outside any section")
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _KNOWN_KEYS[section]:
            raise ValidationError(f"config line {lineno}: unknown key '{key}' in [{section}]")
        cfg.sections[section][key] = value.strip()
    flush()
    return cfg


def load_config(path):
    if not os.path.exists(path):
        raise OSError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def echo_config(cfg):
    """Normalized, re-parsable text of the resolved configuration."""
    out = []
    for section in sorted(cfg.sections):
        out.append(f"[{section}]")
        for key in sorted(cfg.sections[section]):
            out.append(f"{key} = {cfg.sections[section][key]}")
        out.append("")
    for name in sorted(cfg.matrices):
        arr = cfg.matrices[name]
        tag = "vector" if arr.ndim == 1 else "matrix"
        out.append(f"[{tag} {name}]")
        rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
        if arr.ndim == 1:
            out.append(" ".join(exports.fmt(v) for v in arr))
        else:
            for row in rows:
                out.append(" ".join(exports.fmt(v) for v in row))
        out.append("")
    for name in sorted(cfg.node_matrices):
        for node in sorted(cfg.node_matrices[name]):
            out.append(f"[matrix {name} @ {node}]")
            for row in cfg.node_matrices[name][node]:
                out.append(" ".join(exports.fmt(v) for v in row))
            out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _build_grid(cfg):
    horizon = cfg.get_float("grid", "horizon", required=True)
    steps = cfg.get_int("grid", "steps", required=True)
    if steps < 1:
        raise ValidationError("config: [grid] steps must be >= 1")
    return TimeGrid(horizon, steps)


def _stacked_matrix(cfg, name, steps, default):
    base = cfg.matrix(name, default)
    per_node = cfg.node_matrices.get(name)
    if per_node is None:
        return base
    stack = np.broadcast_to(base, (steps,) + base.shape).copy()
    for node, arr in per_node.items():
        if not 0 <= node < steps:
            raise ValidationError(f"config: [matrix {name} @ {node}] node out of range")
        stack[node] = arr
    return stack


def _build_triple(cfg, n):
    gram_h = cfg.matrix("gramH", np.eye(n))
    gram_v = cfg.matrix("gramV", gram_h.copy())
    return DiscreteTriple(gram_h, gram_v)


def _build_operator(cfg, tri, grid):
    n = tri.dim
    a = _stacked_matrix(cfg, "A", grid.steps, np.zeros((n, n)))
    alpha = cfg.get_float("operator", "alpha")
    lam = cfg.get_float("operator", "lambda")
    bound = cfg.get_float("operator", "bound")
    if alpha is None:
        alpha = 1.0
    if lam is None:
        stack = a if a.ndim == 3 else a[None]
        lam = max(required_lambda(mat, tri, alpha) for mat in stack) * (1 + 1e-9) + 1e-12
    if bound is None:
        from .triple import operator_norm_v_to_vstar

        stack = a if a.ndim == 3 else a[None]
        bound = max(operator_norm_v_to_vstar(mat, tri) for mat in stack) * (1 + 1e-9) + 1e-12
    return OperatorProcess(a, alpha=alpha, lam=lam, bound_c=bound)


def _linear_coefficient(cfg, prefix, n, cls):
    kind = cfg.get(prefix, "kind", "linear")
    if kind != "linear":
        raise ValidationError(f"config: [{prefix}] kind must be 'linear'")
    jx = cfg.matrix(f"{prefix}_x", np.zeros((n, n)))
    jxp = cfg.matrix(f"{prefix}_xp", np.zeros((n, n)))
    b0 = cfg.matrix(f"{prefix}_0", np.zeros(n))
    lip = float(np.linalg.norm(jx, 2) + np.linalg.norm(jxp, 2))

    def fn(t, xp, x):
        return x @ jx.T + xp @ jxp.T + b0

    return cls(fn, lip)


def _build_forward(cfg, grid):
    n = cfg.get_int("problem", "n", required=True)
    tri = _build_triple(cfg, n)
    op = _build_operator(cfg, tri, grid)
    x0 = cfg.matrix("x0")
    if x0 is None:
        x0 = np.full(n, cfg.get_float("problem", "x0", 0.0))
    form = cfg.get("problem", "form", "ensemble-mean")
    drift = _linear_coefficient(cfg, "drift", n, MeanFieldDrift)
    diffusion = _linear_coefficient(cfg, "diffusion", n, MeanFieldDiffusion)
    return ForwardProblem(
        triple=tri, operator=op, initial=x0, form=form, drift=drift, diffusion=diffusion
    )


def _build_lq(cfg, grid):
    n = cfg.get_int("problem", "n", required=True)
    m = cfg.get_int("problem", "m", n)
    tri = _build_triple(cfg, n)
    op = _build_operator(cfg, tri, grid)
    steps = grid.steps
    zn = np.zeros((n, n))
    znm = np.zeros((n, m))
    k_min = cfg.get_float("lq", "k_min", 1.0)
    lq = LQCoeffs(
        n=n, m=m,
        B1=_stacked_matrix(cfg, "B1", steps, zn),
        B2=_stacked_matrix(cfg, "B2", steps, zn),
        C=_stacked_matrix(cfg, "C", steps, znm),
        D1=_stacked_matrix(cfg, "D1", steps, zn),
        D2=_stacked_matrix(cfg, "D2", steps, zn),
        F=_stacked_matrix(cfg, "F", steps, znm),
        G1=_stacked_matrix(cfg, "G1", steps, zn),
        G2=_stacked_matrix(cfg, "G2", steps, zn),
        N=_stacked_matrix(cfg, "N", steps, k_min * np.eye(m)),
        Phi1=cfg.matrix("Phi1", zn),
        Phi2=cfg.matrix("Phi2", zn),
        k_min=k_min,
    )
    x0 = cfg.matrix("x0")
    if x0 is None:
        x0 = np.full(n, cfg.get_float("problem", "x0", 0.0))
    paths = cfg.get_int("problem", "paths", 1)
    seed = cfg.get_int("experiment", "seed", required=True)
    return LQProblem(
        triple=tri, operator=op, coeffs=lq, initial=x0, grid=grid,
        n_paths=paths, seed=seed,
    )


_FIELD_BUILTINS = {}


def _register_field(name):
    def deco(fn):
        _FIELD_BUILTINS[name] = fn
        return fn
    return deco


@_register_field("constant")
def _f_constant(value):
    return constant_field(value)


@_register_field("sin-bump")
def _f_sin_bump(base, ampl, freq=1.0):
    def fn(t, z):
        return base + ampl * np.sin(freq * np.asarray(z, dtype=float))
    return fn


@_register_field("gaussian")
def _f_gaussian(ampl, center=0.0, width=1.0):
    def fn(t, z):
        zz = np.asarray(z, dtype=float)
        return ampl * np.exp(-0.5 * ((zz - center) / width) ** 2)
    return fn


def _parse_field(text, what):
    parts = text.split()
    name = parts[0]
    if name not in _FIELD_BUILTINS:
        raise ValidationError(
            f"config: unknown coefficient builtin '{name}' for {what} "
            f"(known: {', '.join(sorted(_FIELD_BUILTINS))})"
        )
    try:
        args = [float(p) for p in parts[1:]]
    except ValueError:
        raise ValidationError(f"config: bad arguments for {what} = {text}")
    return _FIELD_BUILTINS[name](*args)


def _build_cauchy_spec(cfg, grid):
    def fld(key, default="constant 0.0"):
        return _parse_field(cfg.get("cauchy", key, default), key)

    profile2d = _parse_field(cfg.get("cauchy", "initial", "gaussian 1.0 0.0 0.5"), "initial")
    return CauchySpec(
        a=fld("a", "constant 1.0"),
        b=fld("b"),
        c=fld("c"),
        eta=fld("eta"),
        rho=fld("rho"),
        sigma=fld("sigma"),
        bound_k=cfg.get_float("cauchy", "bound_k", 3.0),
        kappa=cfg.get_float("cauchy", "kappa", 1.0),
        half_width=cfg.get_float("cauchy", "half_width", 2.0),
        mesh_points=cfg.get_int("cauchy", "mesh_points", 32),
        initial_profile=lambda z: profile2d(0.0, z),
        horizon=grid.horizon,
    )


def _build_basis(cfg):
    return RegressionBasis(
        degree=cfg.get_int("solver", "basis_degree", 1),
        ridge=cfg.get_float("solver", "ridge", 1e-10),
    )


# ---------------------------------------------------------------------------
# Runners
# ---------------------------------------------------------------------------


class Manifest:
    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.lines = []
        self.phases = []
        self._t0 = time.time()

    def note(self, key, value):
        self.lines.append(f"{key}: {value}")

    def phase(self, name, seconds):
        self.phases.append((name, seconds))

    def write(self, cfg):
        os.makedirs(self.out_dir, exist_ok=True)
        echo_path = os.path.join(self.out_dir, "config_echo.cfg")
        with open(echo_path, "w", encoding="utf-8") as fh:
            fh.write(echo_config(cfg))
        with open(os.path.join(self.out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"mfspde version: {__version__}\n")
            fh.write(f"numpy version: {np.__version__}\n")
            fh.write(f"python version: {sys.version.split()[0]}\n")
            fh.write(f"wall clock start: {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
            fh.write(f"total seconds: {time.time() - self._t0:.3f}\n")
            for name, seconds in self.phases:
                fh.write(f"phase {name}: {seconds:.3f} s\n")
            for line in self.lines:
                fh.write(line + "\n")
            fh.write(f"config echo: {os.path.basename(echo_path)}\n")


def _wanted_files(cfg, default):
    raw = cfg.get("output", "files", default)
    return {part.strip() for part in raw.split(",") if part.strip()}


def _run_forward(cfg, grid, seed, out, manifest):
    problem = _build_forward(cfg, grid)
    paths = cfg.get_int("problem", "paths", 100)
    t0 = time.time()
    ens = simulate(problem, grid, paths, seed)
    manifest.phase("simulate", time.time() - t0)
    wanted = _wanted_files(cfg, "paths,summary")
    if "paths" in wanted:
        exports.ensemble_csv(os.path.join(out, "paths.csv"), ens)
    if "summary" in wanted:
        exports.ensemble_summary_csv(os.path.join(out, "summary.csv"), ens)
    manifest.note("terminal mean", exports.fmt(float(ensemble_mean(ens)[-1].mean())))
    return EXIT_OK


def _run_backward(cfg, grid, seed, out, manifest):
    fwd = _build_forward(cfg, grid)
    paths = cfg.get_int("problem", "paths", 500)
    ens = simulate(fwd, grid, paths, seed)
    n = fwd.triple.dim
    term_val = cfg.matrix("terminal", None)
    if term_val is None:
        term_val = np.full(n, cfg.get_float("backward", "terminal", 0.0))
    driver_const = cfg.matrix("driver_0", None)
    if driver_const is None:
        driver_const = np.full(n, cfg.get_float("backward", "driver_const", 0.0))
    driver = BackwardDriver(
        lambda t, yp, zp, y, z: np.broadcast_to(driver_const, y.shape), 0.0
    )
    problem = BackwardProblem(
        triple=fwd.triple, operator=fwd.operator, driver=driver,
        terminal=constant_terminal(term_val),
    )
    t0 = time.time()
    pair = solve_backward(
        problem, ens, _build_basis(cfg),
        picard_tol=cfg.get_float("solver", "picard_tol", 1e-10),
        max_picard=cfg.get_int("solver", "max_iter", 50),
    )
    manifest.phase("solve_backward", time.time() - t0)
    exports.adjoint_csv(os.path.join(out, "y.csv"), os.path.join(out, "z.csv"), pair, grid)
    manifest.note("picard iterations", pair.picard_iterations)
    manifest.note("picard residual", exports.fmt(pair.picard_residual))
    return EXIT_OK


def _run_lq(cfg, grid, seed, out, manifest, write=True):
    prob = _build_lq(cfg, grid)
    deterministic = cfg.get("problem", "control_mode", "deterministic") == "deterministic"
    t0 = time.time()
    sol = solve_fixed_point(
        prob,
        damping=cfg.get_float("solver", "damping", 0.5),
        tol=cfg.get_float("solver", "tol", 1e-8),
        max_iter=cfg.get_int("solver", "max_iter", 300),
        deterministic=deterministic,
    )
    manifest.phase("solve_fixed_point", time.time() - t0)
    if write:
        wanted = _wanted_files(cfg, "solution,summary")
        if "solution" in wanted:
            exports.lq_solution_csv(os.path.join(out, "solution.csv"), sol, grid)
        if "summary" in wanted:
            exports.ensemble_summary_csv(os.path.join(out, "summary.csv"), sol.ensemble)
    manifest.note("cost", exports.fmt(sol.cost))
    manifest.note("fixed-point iterations", sol.iterations)
    manifest.note("control change norm", exports.fmt(sol.change_norm))
    return prob, sol


def _run_cauchy(cfg, grid, seed, out, manifest):
    spec = _build_cauchy_spec(cfg, grid)
    paths = cfg.get_int("cauchy", "paths", 200)
    t0 = time.time()
    sol = solve_cauchy(
        spec, grid, paths, seed,
        damping=cfg.get_float("solver", "damping", 0.5),
        tol=cfg.get_float("solver", "tol", 1e-8),
        max_iter=cfg.get_int("solver", "max_iter", 300),
    )
    manifest.phase("solve_cauchy", time.time() - t0)
    wanted = _wanted_files(cfg, "control,state,summary")
    if "control" in wanted:
        exports.field_csv(os.path.join(out, "control_field.csv"), grid, sol.mesh,
                          sol.control_field())
    if "state" in wanted:
        exports.field_csv(os.path.join(out, "state_mean.csv"), grid, sol.mesh,
                          sol.mean_state())
    if "summary" in wanted:
        exports.ensemble_summary_csv(os.path.join(out, "summary.csv"),
                                     sol.lq_solution.ensemble)
    manifest.note("cost", exports.fmt(sol.cost))
    manifest.note("dual identity residual", exports.fmt(sol.dual_identity_residual))
    return EXIT_OK


def _run_gradcheck(cfg, grid, seed, out, manifest, tol=1e-3):
    prob = _build_lq(cfg, grid)
    cp = prob.control_problem()
    from .backward import solve_linear_adjoint

    rng = np.random.default_rng(seed + 1)
    u = ControlProcess(0.2 * rng.standard_normal((grid.steps, prob.coeffs.m)), True)
    ens = cp.simulate_under(u)
    adj = solve_linear_adjoint(prob.triple, prob.operator, cp.coeffs, ens, u)
    grad = control_mod.variational_gradient(cp, u, ens, adj)
    rows = []
    worst = 0.0
    for trial in range(3):
        direction = rng.standard_normal(grad.shape)
        adj_dd = control_mod.directional_value(cp, grad, direction)
        fd = control_mod.fd_directional_derivative(cp, u, direction)
        rel = abs(adj_dd - fd.value) / max(abs(fd.value), 1e-12)
        worst = max(worst, rel)
        rows.append([trial, adj_dd, fd.value, rel])
    exports.write_csv(
        os.path.join(out, "gradcheck.csv"),
        ["direction", "adjoint", "finite_difference", "relative_error"],
        rows,
    )
    manifest.note("gradcheck worst relative error", exports.fmt(worst))
    return worst <= tol


def _run_dependence(cfg, grid, seed, out, manifest):
    target = cfg.get("experiment", "target", "forward")
    deltas = cfg.get_floats("experiment", "deltas") or [0.2, 0.1, 0.05, 0.025]
    paths = cfg.get_int("problem", "paths", 500)
    fwd = _build_forward(cfg, grid)
    magnitude = cfg.get_float("study", "magnitude", 1.0)

    if target == "forward":
        def perturb(delta):
            bump = delta * magnitude

            def fn(t, xp, x):
                return fwd.drift.eval(t, xp, x) + bump

            from dataclasses import replace

            return replace(fwd, drift=MeanFieldDrift(fn, fwd.drift.lipschitz))

        study = forward_dependence_study(fwd, perturb, deltas, grid, paths, seed)
    elif target == "forward-apriori":
        scales = cfg.get_floats("experiment", "scales") or [2.0, 1.0, 0.5, 0.25]
        study = forward_apriori_study(fwd, scales, grid, paths, seed)
    elif target == "backward":
        ens = simulate(fwd, grid, paths, seed)
        n = fwd.triple.dim
        base = BackwardProblem(
            triple=fwd.triple, operator=fwd.operator,
            driver=BackwardDriver(lambda t, yp, zp, y, z: 0.5 * y + 0.25 * z, 1.0),
            terminal=lambda e: e.paths[:, -1, :],
        )

        def perturb(delta):
            bump = delta * magnitude
            return BackwardProblem(
                triple=base.triple, operator=base.operator, driver=base.driver,
                terminal=lambda e: e.paths[:, -1, :] + bump,
            )

        study = backward_dependence_study(base, perturb, deltas, ens, _build_basis(cfg))
    else:
        raise ValidationError(f"config: unknown dependence target '{target}'")

    exports.study_csv(os.path.join(out, "study.csv"), study)
    manifest.note("fitted slope", exports.fmt(study.slope))
    manifest.note("k_hat", exports.fmt(study.k_hat))
    return study


def run(config_path, out_dir=None, seed_override=None, workers=None):
    """Execute the experiment a config describes.  Returns an exit code."""
    del workers  # computations are vectorized; outputs never depend on it
    try:
        cfg = load_config(config_path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        kind = cfg.get("experiment", "kind", required=True)
        if kind not in _KNOWN_KINDS:
            raise ValidationError(f"config: unknown experiment kind '{kind}'")
        if seed_override is not None:
            cfg.sections.setdefault("experiment", {})["seed"] = str(int(seed_override))
        seed = cfg.get_int("experiment", "seed", required=True)
        grid = _build_grid(cfg)
        out = out_dir or "out"
        manifest = Manifest(out)
        manifest.note("experiment kind", kind)
        manifest.note("seed", seed)

        if kind == "forward-sim":
            code = _run_forward(cfg, grid, seed, out, manifest)
        elif kind == "backward-solve":
            code = _run_backward(cfg, grid, seed, out, manifest)
        elif kind == "lq-solve":
            _run_lq(cfg, grid, seed, out, manifest)
            code = EXIT_OK
        elif kind == "cauchy":
            code = _run_cauchy(cfg, grid, seed, out, manifest)
        elif kind == "gradcheck":
            ok = _run_gradcheck(cfg, grid, seed, out, manifest)
            code = EXIT_OK if ok else EXIT_CHECK_FAILED
        elif kind == "dependence-study":
            _run_dependence(cfg, grid, seed, out, manifest)
            code = EXIT_OK
        else:
            return verify(config_path, out_dir=out_dir, seed_override=seed_override)
        manifest.write(cfg)
        return code
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NonConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def verify(config_path, out_dir=None, seed_override=None, workers=None):
    """Run a verification bundle; exit 0 iff every check passes."""
    del workers
    try:
        cfg = load_config(config_path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        if seed_override is not None:
            cfg.sections.setdefault("experiment", {})["seed"] = str(int(seed_override))
        seed = cfg.get_int("experiment", "seed", required=True)
        bundle = cfg.get("experiment", "bundle", "all")
        grid = _build_grid(cfg)
        out = out_dir or "out"
        manifest = Manifest(out)
        manifest.note("bundle", bundle)
        checks = []

        if bundle in ("gradcheck", "all"):
            ok = _run_gradcheck(cfg, grid, seed, out, manifest)
            checks.append(("gradient consistency (<= 1e-3)", ok))

        if bundle in ("dependence", "all"):
            cfg.sections.setdefault("experiment", {}).setdefault("target", "forward")
            study = _run_dependence(cfg, grid, seed, out, manifest)
            ok = 1.8 <= study.slope <= 2.2
            checks.append((f"dependence slope {study.slope:.3f} in [1.8, 2.2]", ok))

        if bundle in ("sufficiency", "hamiltonian", "all"):
            prob, sol = _run_lq(cfg, grid, seed, out, manifest, write=False)
            cp = prob.control_problem()
            if bundle in ("sufficiency", "all"):
                rep = control_mod.check_sufficiency(
                    cp, sol.control, sol.ensemble, sol.adjoint
                )
                checks.append(("sufficiency certificate", rep.certified))
            if bundle in ("hamiltonian", "all"):
                rep = control_mod.hamiltonian_system_residual(
                    cp, sol.control, sol.ensemble, sol.adjoint
                )
                checks.append(
                    (f"optimality-system residual {rep.max_defect():.2e} <= 1e-6",
                     rep.max_defect() <= 1e-6)
                )

        if not checks:
            raise ValidationError(f"config: unknown verification bundle '{bundle}'")

        all_ok = True
        for name, ok in checks:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}")
            manifest.note(f"check {name}", "pass" if ok else "fail")
            all_ok = all_ok and ok
        manifest.write(cfg)
        return EXIT_OK if all_ok else EXIT_CHECK_FAILED
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NonConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mfspde",
        description="Mean-field SPDE simulation and optimal control experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "verify"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--out", default=None, help="output directory (default: out)")
        p.add_argument("--workers", type=int, default=None,
                       help="intra-run parallelism hint; outputs are independent of it")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    args = parser.parse_args(argv)
    fn = run if args.command == "run" else verify
    return fn(args.config, out_dir=args.out, seed_override=args.seed, workers=args.workers)


if __name__ == "__main__":
    sys.exit(main())
