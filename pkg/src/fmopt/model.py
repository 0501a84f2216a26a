"""Core state containers and the matrix-free stiffness operator.

A design is a list of m symmetric k-by-k material blocks; the stiffness
operator A(E) = sum_i sum_l B_{i,l}^T E_i B_{i,l} is never materialized
here, it is applied element by element through the sparse per-element
operators B_{i,l}.

States are value types, safe to hand between threads.  Per-element
contributions reduce through an associative sum in a fixed element order,
so repeated runs on the same build are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FEAS_TOL = 1e-9  # eigenvalue/trace slack after a double-precision projection
QUAD_CLAMP = 1e-9  # quad form more negative than this signals corrupted state


class FmoError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatch(FmoError):
    """Shapes of states, operators, or vectors do not agree."""


class InvalidInstance(FmoError):
    """Problem data violates a documented invariant."""


class NumericalFailure(FmoError):
    """A numerical routine produced an untrustworthy result."""


@dataclass
class FlopCounter:
    """Named floating-point-operation tallies.

    Element loops are charged with the standard multiply-add model on the
    touched column support only (``n_loc`` columns per element, not N);
    dense-width equivalents are reported separately by the diagnostics.
    """

    counts: dict = field(default_factory=dict)

    def add(self, key: str, n: float) -> None:
        self.counts[key] = self.counts.get(key, 0.0) + float(n)

    @property
    def total(self) -> float:
        return float(sum(self.counts.values()))

    def snapshot(self) -> dict:
        return dict(self.counts)


def _pack_indices(k: int):
    return np.triu_indices(k)


@dataclass(frozen=True)
class MaterialState:
    """m symmetric k-by-k blocks, stored as packed upper triangles.

    The packed storage makes symmetry a structural property rather than a
    numerical one.  Treat instances as immutable values; they are safe to
    hand between threads.
    """

    packed: np.ndarray  # (m, k*(k+1)//2)
    k: int

    @classmethod
    def from_dense(cls, blocks: np.ndarray) -> "MaterialState":
        blocks = np.asarray(blocks, dtype=float)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise DimensionMismatch(
                f"expected (m, k, k) block array, got {blocks.shape}"
            )
        k = blocks.shape[1]
        sym = 0.5 * (blocks + np.swapaxes(blocks, 1, 2))
        iu, ju = _pack_indices(k)
        return cls(packed=sym[:, iu, ju].copy(), k=k)

    @property
    def m(self) -> int:
        return self.packed.shape[0]

    def dense(self) -> np.ndarray:
        """Return the blocks as a dense (m, k, k) array (always symmetric)."""
        k = self.k
        iu, ju = _pack_indices(k)
        out = np.zeros((self.m, k, k))
        out[:, iu, ju] = self.packed
        out[:, ju, iu] = self.packed
        return out

    def traces(self) -> np.ndarray:
        k = self.k
        iu, ju = _pack_indices(k)
        return self.packed[:, iu == ju].sum(axis=1)

    def objective(self) -> float:
        """Total trace <I, E>, the material cost."""
        return float(self.traces().sum())


@dataclass(frozen=True)
class DualState:
    """L scaled adjoint displacement vectors of length N."""

    vectors: np.ndarray  # (L, N)

    @classmethod
    def from_array(cls, vectors: np.ndarray) -> "DualState":
        vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
        return cls(vectors=vectors.copy())

    @property
    def L(self) -> int:
        return self.vectors.shape[0]

    @property
    def N(self) -> int:
        return self.vectors.shape[1]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)


@dataclass(frozen=True)
class ElementOperator:
    """The nig strain operators of one element, restricted to its column support.

    ``values[l]`` is the dense k-by-n_loc block of B_{i,l}; ``cols`` maps the
    local columns to global free-DOF indices.
    """

    cols: np.ndarray  # (n_loc,) int, strictly increasing
    values: np.ndarray  # (nig, k, n_loc)

    def triplets(self, ig: int):
        """Yield (row, global_col, value) for B_{i,ig}, nonzeros only."""
        block = self.values[ig]
        rows, lcols = np.nonzero(block)
        for a, b in zip(rows, lcols):
            yield int(a), int(self.cols[b]), float(block[a, b])


class ProblemInstance:
    """Immutable description of one material design problem.

    Parameters
    ----------
    elements : list of ElementOperator
        Per-element sparse strain operators (m entries, nig each).
    loads : ndarray (L, N)
        Load vectors on the free DOFs.
    rho_l, rho_u : ndarray (m,)
        Per-element trace bounds.
    r : float
        Eigenvalue floor of every material block.
    gamma : float
        Compliance cap.
    eta : float
        Radius of the dual ball.
    nu : float
        Penalty weight; 0 disables the penalty term.
    """

    def __init__(self, elements, loads, rho_l, rho_u, r, gamma, eta, nu=0.0):
        self.elements = list(elements)
        self.loads = np.atleast_2d(np.asarray(loads, dtype=float))
        self.m = len(self.elements)
        if self.m == 0:
            raise InvalidInstance("instance has no elements")
        first = self.elements[0].values
        self.nig, self.k = first.shape[0], first.shape[1]
        self.N = self.loads.shape[1]
        self.L = self.loads.shape[0]
        self.rho_l = np.broadcast_to(np.asarray(rho_l, dtype=float), (self.m,)).copy()
        self.rho_u = np.broadcast_to(np.asarray(rho_u, dtype=float), (self.m,)).copy()
        self.r = float(r)
        self.gamma = float(gamma)
        self.eta = float(eta)
        self.nu = float(nu)
        self._validate()
        self._pack()

    def _validate(self) -> None:
        for i, el in enumerate(self.elements):
            if el.values.shape[:2] != (self.nig, self.k):
                raise DimensionMismatch(
                    f"element {i}: operator shape {el.values.shape} "
                    f"inconsistent with (nig={self.nig}, k={self.k})"
                )
            if el.cols.ndim != 1 or el.values.shape[2] != el.cols.shape[0]:
                raise DimensionMismatch(f"element {i}: column support mismatch")
            if not np.all(np.isfinite(el.values)):
                raise InvalidInstance(f"element {i}: non-finite operator entries")
            if el.cols.size and (el.cols.min() < 0 or el.cols.max() >= self.N):
                raise DimensionMismatch(
                    f"element {i}: column index outside [0, {self.N})"
                )
        if not np.all(np.isfinite(self.loads)):
            raise InvalidInstance("loads contain non-finite entries")
        if not (self.r > 0):
            raise InvalidInstance("eigenvalue floor r must be positive")
        if np.any(self.k * self.r > self.rho_l + FEAS_TOL):
            raise InvalidInstance("need k*r <= rho_l for every element")
        if np.any(self.rho_l > self.rho_u):
            raise InvalidInstance("need rho_l <= rho_u for every element")
        if not (self.gamma > 0 and self.eta > 0 and self.nu >= 0):
            raise InvalidInstance("need gamma > 0, eta > 0, nu >= 0")

    def _pack(self) -> None:
        # Pad ragged column supports to a rectangle so element loops can be
        # batched; padded columns carry zero values and are harmless.
        nloc = max(el.cols.shape[0] for el in self.elements)
        self.n_loc = nloc
        cols = np.zeros((self.m, nloc), dtype=np.int64)
        vals = np.zeros((self.m, self.nig, self.k, nloc))
        for i, el in enumerate(self.elements):
            w = el.cols.shape[0]
            cols[i, :w] = el.cols
            vals[i, :, :, :w] = el.values
        self.cols_packed = cols
        self.B_packed = vals

    # -- starting point ----------------------------------------------------

    def start_material(self) -> MaterialState:
        """Identity blocks scaled so every trace sits at its upper bound."""
        eye = np.eye(self.k)[None, :, :] * (self.rho_u / self.k)[:, None, None]
        return MaterialState.from_dense(eye)

    def start_dual(self) -> DualState:
        """Constant vectors scaled to norm eta."""
        v = np.full((self.L, self.N), self.eta / np.sqrt(self.N))
        return DualState.from_array(v)

    def check_material(self, E: MaterialState) -> None:
        if E.m != self.m or E.k != self.k:
            raise DimensionMismatch(
                f"material state (m={E.m}, k={E.k}) does not match "
                f"instance (m={self.m}, k={self.k})"
            )


@dataclass(frozen=True)
class FeasibilityReport:
    """Worst constraint violations of a material state, one entry per kind."""

    feasible: bool
    max_trace_excess: float
    worst_trace_excess_block: int
    max_trace_deficit: float
    worst_trace_deficit_block: int
    max_eig_deficit: float
    worst_eig_block: int


def feasible_E(instance: ProblemInstance, E: MaterialState, tol: float = FEAS_TOL):
    """Check membership of every block in its feasible set.

    Returns ``(ok, report)`` where ``ok`` is True iff every block satisfies
    the trace window and the eigenvalue floor within ``tol``.
    """
    instance.check_material(E)
    dense = E.dense()
    traces = np.einsum("qkk->q", dense)
    eigmin = np.linalg.eigvalsh(dense)[:, 0]
    excess = traces - instance.rho_u
    deficit = instance.rho_l - traces
    eig_deficit = instance.r - eigmin
    report = FeasibilityReport(
        feasible=bool(
            np.all(excess <= tol) and np.all(deficit <= tol) and np.all(eig_deficit <= tol)
        ),
        max_trace_excess=float(excess.max()),
        worst_trace_excess_block=int(excess.argmax()),
        max_trace_deficit=float(deficit.max()),
        worst_trace_deficit_block=int(deficit.argmax()),
        max_eig_deficit=float(eig_deficit.max()),
        worst_eig_block=int(eig_deficit.argmax()),
    )
    return report.feasible, report


def _check_vector(instance: ProblemInstance, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (instance.N,):
        raise DimensionMismatch(f"expected vector of length {instance.N}, got {v.shape}")
    return v


def apply_A(instance: ProblemInstance, E: MaterialState, v, counter: FlopCounter | None = None):
    """Apply the stiffness operator A(E) to a vector, element by element.

    Never materializes A(E): computes sum_i sum_l B_{i,l}^T (E_i (B_{i,l} v)).
    """
    instance.check_material(E)
    v = _check_vector(instance, v)
    Ed = E.dense()
    xg = v[instance.cols_packed]  # (m, n_loc)
    w = np.einsum("qlkd,qd->qlk", instance.B_packed, xg)  # B_{i,l} v
    ew = np.einsum("qkc,qlc->qlk", Ed, w)
    ylocal = np.einsum("qlkd,qlk->qd", instance.B_packed, ew)
    out = np.zeros(instance.N)
    np.add.at(out, instance.cols_packed, ylocal)
    if counter is not None:
        k, nloc = instance.k, instance.n_loc
        counter.add("apply_A", instance.nig * instance.m * (4 * k * nloc + 2 * k * k))
    return out


def quad_A(instance: ProblemInstance, E: MaterialState, v, counter: FlopCounter | None = None) -> float:
    """Quadratic form <A(E) v, v> accumulated through the element loops.

    Tiny negative values from roundoff near the PSD boundary are clamped to
    zero; anything below -1e-9 is treated as corrupted state.
    """
    instance.check_material(E)
    v = _check_vector(instance, v)
    Ed = E.dense()
    xg = v[instance.cols_packed]
    w = np.einsum("qlkd,qd->qlk", instance.B_packed, xg)
    val = float(np.einsum("qlk,qkc,qlc->", w, Ed, w))
    if counter is not None:
        k, nloc = instance.k, instance.n_loc
        counter.add("quad_A", instance.nig * instance.m * (2 * k * nloc + 2 * k * k + 2 * k))
    if val < -QUAD_CLAMP:
        raise NumericalFailure(
            f"<A(E)v, v> = {val:.3e} is negative beyond roundoff; "
            "material state appears corrupted"
        )
    return max(val, 0.0)
