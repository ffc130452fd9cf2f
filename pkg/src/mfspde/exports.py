"""CSV export helpers.

Numbers are written with Python's shortest round-trip float representation
so identical runs produce byte-identical files; timestamps never appear in
CSV bodies (they are confined to the run manifest).
"""

import os

import numpy as np


def fmt(x):
    """Shortest decimal string that round-trips the double."""
    return repr(float(x))


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt(v)
    return str(v)


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def ensemble_csv(path, ens):
    """One row per (particle, node) with the state components."""
    n = ens.dim
    header = ["particle", "node", "t"] + [f"x{j}" for j in range(n)]
    nodes = ens.grid.nodes

    def rows():
        for i in range(ens.n_paths):
            for k in range(ens.grid.steps + 1):
                yield [i, k, nodes[k]] + list(ens.paths[i, k])

    write_csv(path, header, rows())


def ensemble_summary_csv(path, ens):
    """Mean and variance of each state component per node."""
    n = ens.dim
    mean = ens.paths.mean(axis=0)
    var = ens.paths.var(axis=0, ddof=1) if ens.n_paths > 1 else np.zeros_like(mean)
    header = ["node", "t"] + [f"mean{j}" for j in range(n)] + [f"var{j}" for j in range(n)]
    nodes = ens.grid.nodes
    rows = ([k, nodes[k]] + list(mean[k]) + list(var[k]) for k in range(ens.grid.steps + 1))
    write_csv(path, header, rows)


def adjoint_csv(path_p, path_q, adj, grid):
    n = adj.p.shape[-1]
    nodes = grid.nodes
    header = ["particle", "node", "t"] + [f"p{j}" for j in range(n)]

    def prow():
        for i in range(adj.p.shape[0]):
            for k in range(adj.p.shape[1]):
                yield [i, k, nodes[k]] + list(adj.p[i, k])

    write_csv(path_p, header, prow())
    header = ["particle", "step", "t"] + [f"q{j}" for j in range(n)]

    def qrow():
        for i in range(adj.q.shape[0]):
            for k in range(adj.q.shape[1]):
                yield [i, k, nodes[k]] + list(adj.q[i, k])

    write_csv(path_q, header, qrow())


def study_csv(path, study):
    header = ["delta", "lhs", "rhs", "ratio"]
    rows = (
        [d, l, r, ratio]
        for d, l, r, ratio in zip(study.deltas, study.lhs, study.rhs, study.ratios)
    )
    write_csv(path, header, rows)


def optimization_csv(path, report):
    header = ["iteration", "cost", "gradient_norm", "step", "residual"]
    write_csv(path, header, report.history)


def lq_solution_csv(path, sol, grid):
    """Per node: control field (particle average), state mean, adjoint mean."""
    u = sol.control.values
    u_field = u if sol.control.deterministic else u.mean(axis=0)
    xbar = sol.ensemble.paths.mean(axis=0)
    pbar = sol.adjoint.p.mean(axis=0)
    m = u_field.shape[-1]
    n = xbar.shape[-1]
    header = (
        ["node", "t"]
        + [f"u{j}" for j in range(m)]
        + [f"xmean{j}" for j in range(n)]
        + [f"pmean{j}" for j in range(n)]
    )
    nodes = grid.nodes

    def rows():
        for k in range(grid.steps):
            yield [k, nodes[k]] + list(u_field[k]) + list(xbar[k]) + list(pbar[k])
        yield [grid.steps, nodes[-1]] + [0.0] * m + list(xbar[-1]) + list(pbar[-1])

    write_csv(path, header, rows())


def field_csv(path, grid, mesh, field):
    """Space-time field as (t, z, value) rows; ``field`` is (steps[+1], n)."""
    header = ["t", "z", "value"]
    nodes = grid.nodes

    def rows():
        for k in range(field.shape[0]):
            for j, z in enumerate(mesh):
                yield [nodes[k], z, field[k, j]]

    write_csv(path, header, rows())
