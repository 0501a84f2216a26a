"""Desk-scale 2D problem generation and the instance/state file formats.

Rectangular meshes of bilinear quadrilaterals with a 2x2 Gauss rule
(k = 3, nig = 4).  The per-element strain operators hold the mapped
shape-function gradients evaluated at the Gauss points; boundary
conditions remove the fixed columns so N counts free DOFs only.

Local DOF ordering is node-major, then x/y.  Element nodes are numbered
counterclockwise from the lower-left corner; global nodes are numbered
row-major from the lower-left of the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ElementOperator,
    FmoError,
    InvalidInstance,
    MaterialState,
    NumericalFailure,
    ProblemInstance,
)

GAUSS = 1.0 / np.sqrt(3.0)
# reference-square corners, counterclockwise from (-1, -1)
CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
GAUSS_POINTS = GAUSS * CORNERS  # one per corner, same ordering

EDGES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class LoadSpec:
    """One load case: a node selector and the force on each selected node.

    ``nodes`` is either an edge/corner keyword (``left_edge``,
    ``right_edge``, ``bottom_edge``, ``top_edge``, ``bottom_right``,
    ``top_right``, ``mid_right``) or an explicit tuple of global node ids.
    The force vector is split equally over the selected nodes.
    """

    nodes: object
    force: tuple


@dataclass(frozen=True)
class MeshSpec:
    """Rectangular quadrilateral mesh with one fully fixed edge."""

    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0
    fixed_edge: str = "left"
    loads: tuple = (LoadSpec("right_edge", (0.0, -1.0)),)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise InvalidInstance("need nx, ny >= 1")
        if self.fixed_edge not in EDGES:
            raise InvalidInstance(f"fixed_edge must be one of {EDGES}")
        if self.lx <= 0 or self.ly <= 0:
            raise InvalidInstance("need positive physical dimensions")
        if not self.loads:
            raise InvalidInstance("need at least one load case")


def shape_gradients(xi: float, eta: float) -> np.ndarray:
    """(2, 4) gradients of the bilinear shape functions in reference coords."""
    return 0.25 * np.array(
        [
            [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
            [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)],
        ]
    )


def node_grid(spec: MeshSpec):
    """Global node ids on the (nx+1) x (ny+1) grid, id = iy*(nx+1) + ix."""
    return np.arange((spec.nx + 1) * (spec.ny + 1)).reshape(spec.ny + 1, spec.nx + 1)


def element_nodes(spec: MeshSpec, ex: int, ey: int) -> np.ndarray:
    n1 = ey * (spec.nx + 1) + ex
    return np.array([n1, n1 + 1, n1 + spec.nx + 2, n1 + spec.nx + 1])


def element_matrices(spec: MeshSpec):
    """Strain operators of every element over the full (unfixed) DOF set.

    Returns ``(node_ids, B_local)`` where ``node_ids`` is (m, 4) and
    ``B_local`` is (m, 4, 3, 8): for each Gauss point the 3x8 matrix whose
    node blocks stack the mapped gradient, one derivative per normal-strain
    row and the half-shear row.
    """
    hx, hy = spec.lx / spec.nx, spec.ly / spec.ny
    jac_inv = np.array([2.0 / hx, 2.0 / hy])  # rectangle: diagonal Jacobian
    m = spec.nx * spec.ny
    node_ids = np.zeros((m, 4), dtype=np.int64)
    B_local = np.zeros((m, 4, 3, 8))
    point_B = []
    for xi, eta in GAUSS_POINTS:
        grad = shape_gradients(xi, eta) * jac_inv[:, None]  # (2, 4) physical
        B = np.zeros((3, 8))
        for a in range(4):
            B[0, 2 * a] = grad[0, a]
            B[1, 2 * a + 1] = grad[1, a]
            B[2, 2 * a] = 0.5 * grad[1, a]
            B[2, 2 * a + 1] = 0.5 * grad[0, a]
        point_B.append(B)
    point_B = np.stack(point_B)
    if not np.all(np.isfinite(point_B)):
        raise NumericalFailure("degenerate element: singular Jacobian")
    i = 0
    for ey in range(spec.ny):
        for ex in range(spec.nx):
            node_ids[i] = element_nodes(spec, ex, ey)
            B_local[i] = point_B
            i += 1
    return node_ids, B_local


def fixed_nodes(spec: MeshSpec) -> np.ndarray:
    grid = node_grid(spec)
    if spec.fixed_edge == "left":
        return grid[:, 0]
    if spec.fixed_edge == "right":
        return grid[:, -1]
    if spec.fixed_edge == "bottom":
        return grid[0, :]
    return grid[-1, :]


def select_nodes(spec: MeshSpec, selector) -> np.ndarray:
    grid = node_grid(spec)
    if isinstance(selector, str):
        table = {
            "left_edge": grid[:, 0],
            "right_edge": grid[:, -1],
            "bottom_edge": grid[0, :],
            "top_edge": grid[-1, :],
            "bottom_right": grid[0, -1:],
            "top_right": grid[-1, -1:],
            "mid_right": grid[grid.shape[0] // 2, -1:],
        }
        if selector not in table:
            raise InvalidInstance(f"unknown node selector {selector!r}")
        return np.atleast_1d(table[selector])
    return np.asarray(selector, dtype=np.int64)


def build_instance(spec: MeshSpec, rho_l, rho_u, r, gamma, eta, nu=0.0) -> ProblemInstance:
    """Assemble a ProblemInstance from a mesh specification.

    Columns of the fixed edge are deleted, so N = 2 * (free nodes); loads
    selecting fixed nodes are rejected.
    """
    node_ids, B_local = element_matrices(spec)
    n_nodes = (spec.nx + 1) * (spec.ny + 1)
    fixed = np.zeros(n_nodes, dtype=bool)
    fixed[fixed_nodes(spec)] = True
    free_nodes = np.flatnonzero(~fixed)
    # free-DOF index of each node's (x, y) pair; -1 marks a removed column
    dof_of_node = -np.ones((n_nodes, 2), dtype=np.int64)
    dof_of_node[free_nodes, 0] = 2 * np.arange(free_nodes.size)
    dof_of_node[free_nodes, 1] = 2 * np.arange(free_nodes.size) + 1
    N = 2 * free_nodes.size

    elements = []
    for i in range(node_ids.shape[0]):
        keep_cols = []
        keep_dofs = []
        for a, node in enumerate(node_ids[i]):
            for comp in range(2):
                dof = dof_of_node[node, comp]
                if dof >= 0:
                    keep_cols.append(2 * a + comp)
                    keep_dofs.append(dof)
        keep_cols = np.asarray(keep_cols, dtype=np.int64)
        keep_dofs = np.asarray(keep_dofs, dtype=np.int64)
        order = np.argsort(keep_dofs)
        elements.append(
            ElementOperator(cols=keep_dofs[order], values=B_local[i][:, :, keep_cols[order]])
        )

    loads = np.zeros((len(spec.loads), N))
    for j, load in enumerate(spec.loads):
        nodes = select_nodes(spec, load.nodes)
        if np.any(fixed[nodes]):
            raise InvalidInstance(f"load case {j} touches fixed nodes")
        share = np.asarray(load.force, dtype=float) / nodes.size
        for node in nodes:
            loads[j, dof_of_node[node, 0]] += share[0]
            loads[j, dof_of_node[node, 1]] += share[1]

    return ProblemInstance(elements, loads, rho_l, rho_u, r, gamma, eta, nu)


def reference_compliance(instance: ProblemInstance, E: MaterialState, dense_threshold: int = 4000):
    """Per-load compliances <A(E)^{-1} f_j, f_j> by dense factorization.

    A small-N report/test helper; refuses above the dense threshold.
    """
    if instance.N > dense_threshold:
        raise FmoError(
            f"reference_compliance is dense-only (N={instance.N} > {dense_threshold})"
        )
    from . import penalty

    A = penalty.assemble_dense(instance, E.dense())
    return penalty.compliances_from_dense(instance, A)


# -- file formats ---------------------------------------------------------

INSTANCE_MAGIC = "fmo-inst/1"
STATE_MAGIC = "fmo-state/1"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_instance(instance: ProblemInstance, path) -> None:
    """Write the versioned structured-text instance format (bit-exact).

    Schema (one record per line, whitespace separated)::

        fmo-inst/1
        dims m=<int> k=<int> N=<int> L=<int> nig=<int>
        param r <float>          # eigenvalue floor
        param gamma <float>      # compliance cap
        param eta <float>        # dual-ball radius
        param nu <float>         # penalty weight
        rho_l <m floats>         # per-element trace lower bounds
        rho_u <m floats>
        B <i> <l> <nnz>          # element i, integration point l
        <row> <col> <value>      # nnz triplets; col is a free-DOF index
        ...
        load <j>
        <N floats>

    Floats are written with ``repr`` so a read/write round trip is
    byte-identical.  Columns index free DOFs after boundary fixing,
    ordered node-major with the x component before y; rows follow the
    strain convention (xx, yy, half-shear).
    """
    lines = [INSTANCE_MAGIC]
    lines.append(
        f"dims m={instance.m} k={instance.k} N={instance.N} "
        f"L={instance.L} nig={instance.nig}"
    )
    for name in ("r", "gamma", "eta", "nu"):
        lines.append(f"param {name} {_fmt(getattr(instance, name))}")
    lines.append("rho_l " + " ".join(_fmt(v) for v in instance.rho_l))
    lines.append("rho_u " + " ".join(_fmt(v) for v in instance.rho_u))
    for i, el in enumerate(instance.elements):
        for ig in range(instance.nig):
            trips = list(el.triplets(ig))
            lines.append(f"B {i} {ig} {len(trips)}")
            for row, col, val in trips:
                lines.append(f"{row} {col} {_fmt(val)}")
    for j in range(instance.L):
        lines.append(f"load {j}")
        lines.append(" ".join(_fmt(v) for v in instance.loads[j]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_instance(path) -> ProblemInstance:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != INSTANCE_MAGIC:
        raise InvalidInstance(f"not a {INSTANCE_MAGIC} file: {path}")
    pos = 1

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise InvalidInstance("truncated instance file")
        ln = lines[pos]
        pos += 1
        return ln

    dims = {}
    for tok in take().split()[1:]:
        key, val = tok.split("=")
        dims[key] = int(val)
    params = {}
    for _ in range(4):
        _, name, val = take().split()
        params[name] = float(val)
    rho_l = np.array([float(v) for v in take().split()[1:]])
    rho_u = np.array([float(v) for v in take().split()[1:]])
    if rho_l.size != dims["m"] or rho_u.size != dims["m"]:
        raise InvalidInstance("trace bound count does not match m")

    triplets = [[None] * dims["nig"] for _ in range(dims["m"])]
    for _ in range(dims["m"] * dims["nig"]):
        head = take().split()
        if head[0] != "B":
            raise InvalidInstance(f"expected B header, got {head!r}")
        i, ig, nnz = int(head[1]), int(head[2]), int(head[3])
        entries = []
        for _ in range(nnz):
            row, col, val = take().split()
            entries.append((int(row), int(col), float(val)))
        triplets[i][ig] = entries

    elements = []
    for i in range(dims["m"]):
        cols = sorted({c for ig_list in triplets[i] for _, c, _ in ig_list})
        col_of = {c: a for a, c in enumerate(cols)}
        values = np.zeros((dims["nig"], dims["k"], len(cols)))
        for ig in range(dims["nig"]):
            for row, col, val in triplets[i][ig]:
                values[ig, row, col_of[col]] = val
        elements.append(ElementOperator(cols=np.asarray(cols, dtype=np.int64), values=values))

    loads = np.zeros((dims["L"], dims["N"]))
    for _ in range(dims["L"]):
        j = int(take().split()[1])
        loads[j] = [float(v) for v in take().split()]

    return ProblemInstance(
        elements,
        loads,
        rho_l,
        rho_u,
        params["r"],
        params["gamma"],
        params["eta"],
        params["nu"],
    )


def write_state(state: MaterialState, path) -> None:
    """Write a material state in the companion structured-text format.

    Schema::

        fmo-state/1
        dims m=<int> k=<int>
        block <i>
        <k rows of k floats>     # dense symmetric block, repr round-trip
    """
    dense = state.dense()
    lines = [STATE_MAGIC, f"dims m={state.m} k={state.k}"]
    for i in range(state.m):
        lines.append(f"block {i}")
        for row in dense[i]:
            lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_state(path) -> MaterialState:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != STATE_MAGIC:
        raise InvalidInstance(f"not a {STATE_MAGIC} file: {path}")
    dims = {}
    for tok in lines[1].split()[1:]:
        key, val = tok.split("=")
        dims[key] = int(val)
    m, k = dims["m"], dims["k"]
    blocks = np.zeros((m, k, k))
    pos = 2
    for _ in range(m):
        i = int(lines[pos].split()[1])
        pos += 1
        for row in range(k):
            blocks[i, row] = [float(v) for v in lines[pos].split()]
            pos += 1
    return MaterialState.from_dense(blocks)
