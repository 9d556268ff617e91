"""Flux trace vectors and the splitting of the multiplier space.

A trace vector holds one scalar per oriented fine face; the value an
element sees is ``sign * stored`` where the sign is +1 for the left
element of the face.  Storing a single value per face builds the
normal-flux compatibility of the trace space into the data structure:
the two element-side views of a shared face are exact negatives.

The space splits into three complementary blocks:

* the span of the per-element jump functionals (one per coarse element),
* face-constant vectors with zero pairing against piecewise constants,
* vectors with zero average on every coarse face (the fine remainder).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import CoarseMesh, FinePartition

__all__ = [
    "TraceVector",
    "PiecewiseConstant",
    "TraceSpace",
    "build_trace_space",
    "lambda0_basis",
    "pairing",
    "boundary_functional",
    "decompose",
    "solve_V0_pairing",
    "zero_mean_basis",
]


@dataclass
class TraceVector:
    """One scalar per oriented fine face."""

    space: "TraceSpace"
    values: np.ndarray

    def copy(self) -> "TraceVector":
        return TraceVector(self.space, self.values.copy())

    def side_values(self, elem: int) -> np.ndarray:
        """Element-side view: sign(elem, F) * stored value, per boundary row."""
        geom = self.space.part.geometry[elem]
        return geom.boundary_signs * self.values[geom.boundary_face_ids]

    def face_values(self, face: int) -> np.ndarray:
        return self.values[self.space.part.face_slice(face)]

    def restricted_to_face(self, face: int) -> "TraceVector":
        """Copy that keeps only the values on one coarse face."""
        out = np.zeros_like(self.values)
        sl = self.space.part.face_slice(face)
        out[sl] = self.values[sl]
        return TraceVector(self.space, out)

    def __add__(self, other: "TraceVector") -> "TraceVector":
        return TraceVector(self.space, self.values + other.values)

    def __sub__(self, other: "TraceVector") -> "TraceVector":
        return TraceVector(self.space, self.values - other.values)

    def __mul__(self, s: float) -> "TraceVector":
        return TraceVector(self.space, self.values * s)

    __rmul__ = __mul__

    def __neg__(self) -> "TraceVector":
        return TraceVector(self.space, -self.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def to_csv(self, path: str) -> None:
        """Rows ``fine_face_index,value`` ordered by global fine-face index."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("fine_face,value\n")
            for i, v in enumerate(self.values):
                fh.write(f"{i},{float(v)!r}\n")

    def to_binary(self, path: str) -> None:
        """Raw little-endian float64, ordered by global fine-face index."""
        self.values.astype("<f8").tofile(path)

    @classmethod
    def from_binary(cls, space: "TraceSpace", path: str) -> "TraceVector":
        values = np.fromfile(path, dtype="<f8")
        if values.shape[0] != space.n_fine:
            raise ValueError("binary trace vector has wrong length")
        return cls(space, values)


@dataclass
class PiecewiseConstant:
    """One scalar per coarse element (a member of the constant space)."""

    values: np.ndarray

    def copy(self) -> "PiecewiseConstant":
        return PiecewiseConstant(self.values.copy())


@dataclass
class TraceSpace:
    """Index bookkeeping and change-of-basis data for the multiplier space."""

    mesh: CoarseMesh
    part: FinePartition
    pair_v0: sp.csr_matrix          # (N, n_fine): (mu, 1_tau) weights, rows per element
    jump_basis: sp.csr_matrix       # (n_fine, N): stored lambda0_i columns
    pairing_matrix: np.ndarray      # (N, N): entry [i, j] = (lambda0_i, 1_tau_j)
    zero_mean: np.ndarray           # (nfs, nfs - 1): per-face zero-average basis
    face_constant_coeffs: np.ndarray  # (NF, NF - N): face-constant block, coefficients
    _lu: spla.SuperLU | None = None

    @property
    def n_fine(self) -> int:
        return self.part.n_fine_faces

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    @property
    def n_coarse_faces(self) -> int:
        return self.mesh.n_faces

    @property
    def dim_lambda0(self) -> int:
        return self.n_elements

    @property
    def dim_tilde0(self) -> int:
        return self.face_constant_coeffs.shape[1]

    @property
    def dim_tilde_f(self) -> int:
        return self.n_fine - self.n_coarse_faces

    def zeros(self) -> TraceVector:
        return TraceVector(self, np.zeros(self.n_fine))

    def vector(self, values: np.ndarray) -> TraceVector:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_fine,):
            raise ValueError("trace vector has wrong length")
        return TraceVector(self, values)

    def expand_face_constants(self, coeffs: np.ndarray) -> np.ndarray:
        """Per-coarse-face coefficients -> stored fine-face values."""
        return np.repeat(coeffs, self.part.faces_per_coarse)

    def face_integrals(self, values: np.ndarray) -> np.ndarray:
        """Integral of mu over each coarse face (stored orientation)."""
        nfs = self.part.faces_per_coarse
        weighted = values * self.part.fine_measures
        return weighted.reshape(self.n_coarse_faces, nfs).sum(axis=1)

    def tilde0_stored_basis(self) -> np.ndarray:
        """Zero-boundary-average face-constant basis, expanded to fine faces."""
        nfs = self.part.faces_per_coarse
        return np.repeat(self.face_constant_coeffs, nfs, axis=0)

    def factorization(self) -> spla.SuperLU:
        if self._lu is None:
            try:
                self._lu = spla.splu(sp.csc_matrix(self.pairing_matrix))
            except RuntimeError as exc:  # pragma: no cover - cannot occur on valid meshes
                raise AssertionError(f"constant-pairing matrix is singular: {exc}") from exc
        return self._lu

    def is_tilde(self, mu: TraceVector, tol: float = 1e-10) -> bool:
        """Membership test: (mu, 1_tau) = 0 for every element."""
        r = self.pair_v0 @ mu.values
        scale = max(np.abs(mu.values).max(), 1.0)
        return bool(np.abs(r).max() <= tol * scale)

    def is_tilde_f(self, mu: TraceVector, tol: float = 1e-10) -> bool:
        """Membership test: zero average on every coarse face."""
        r = self.face_integrals(mu.values)
        scale = max(np.abs(mu.values).max(), 1.0)
        return bool(np.abs(r).max() <= tol * scale)

    def random_tilde_f(self, rng: np.random.Generator) -> TraceVector:
        """Deterministic-seed random member of the zero-face-average block."""
        nfs = self.part.faces_per_coarse
        out = np.zeros(self.n_fine)
        if nfs > 1:
            coeffs = rng.standard_normal((self.n_coarse_faces, nfs - 1))
            out = (coeffs @ self.zero_mean.T).ravel()
        return TraceVector(self, out)


def zero_mean_basis(weights: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the weighted zero-mean subspace.

    Columns span {x : weights . x = 0}.  Built from one Householder
    reflection, so it is deterministic and exactly reproducible.
    """
    n = len(weights)
    if n <= 1:
        return np.zeros((n, 0))
    v = weights / np.linalg.norm(weights)
    u = v.copy()
    u[0] += 1.0
    u /= np.linalg.norm(u)
    h = np.eye(n) - 2.0 * np.outer(u, u)
    return h[:, 1:]


def build_trace_space(part: FinePartition) -> TraceSpace:
    """Assemble the index maps, jump basis, and block decompositions."""
    mesh = part.mesh
    n = mesh.n_elements
    nf = mesh.n_faces
    nfs = part.faces_per_coarse
    n_fine = part.n_fine_faces

    rows, cols, vals = [], [], []
    for geom in part.geometry:
        rows.extend([geom.elem] * geom.n_boundary_faces)
        cols.extend(geom.boundary_face_ids.tolist())
        vals.extend((geom.boundary_signs * part.fine_measures[geom.boundary_face_ids]).tolist())
    pair_v0 = sp.csr_matrix((vals, (rows, cols)), shape=(n, n_fine))

    jrows, jcols, jvals = [], [], []
    for geom in part.geometry:
        jrows.extend(geom.boundary_face_ids.tolist())
        jcols.extend([geom.elem] * geom.n_boundary_faces)
        jvals.extend(geom.boundary_signs.tolist())
    jump_basis = sp.csr_matrix((jvals, (jrows, jcols)), shape=(n_fine, n))

    pairing_matrix = (pair_v0 @ jump_basis).toarray().T  # [i, j] = (lambda0_i, 1_tau_j)

    zm = zero_mean_basis(np.full(nfs, 1.0))  # equal sub-face measures per face

    # Face-constant block: coefficients c with sum_F sign(tau,F) c_F |F| = 0
    # for every element.  Null space via column-pivoted QR of the constraint.
    constraint = np.zeros((n, nf))
    for t in range(n):
        for e in range(3):
            fid = mesh.element_faces[t, e]
            constraint[t, fid] += mesh.element_face_signs[t, e] * mesh.face_measures[fid]
    q, r, _ = scipy.linalg.qr(constraint.T, pivoting=True)
    diag = np.abs(np.diag(r)) if r.size else np.array([])
    tol = (diag.max() if diag.size else 0.0) * max(n, nf) * np.finfo(float).eps
    rank = int((diag > tol).sum())
    if rank != n:
        raise AssertionError(
            f"constant-constraint matrix has rank {rank}, expected {n}; "
            "the jump functionals would be dependent"
        )
    face_constant_coeffs = q[:, rank:]

    return TraceSpace(
        mesh=mesh,
        part=part,
        pair_v0=pair_v0,
        jump_basis=jump_basis,
        pairing_matrix=pairing_matrix,
        zero_mean=zm,
        face_constant_coeffs=face_constant_coeffs,
    )


def lambda0_basis(space: TraceSpace) -> list[TraceVector]:
    """The jump functionals: element-side value +1 on all of the element
    boundary, -1 on the mating side of shared faces, 0 elsewhere."""
    cols = space.jump_basis.toarray()
    return [TraceVector(space, cols[:, i].copy()) for i in range(space.n_elements)]


def pairing(
    space: TraceSpace,
    mu: TraceVector,
    v: PiecewiseConstant | Sequence[np.ndarray],
) -> float:
    """The broken duality pairing (mu, v) summed over element boundaries.

    ``v`` is either a piecewise constant or a broken function given by its
    P1 nodal values on each element's interior triangulation.  Exact for
    P1 traces (trapezoid rule per fine boundary edge).
    """
    if isinstance(v, PiecewiseConstant):
        return float(v.values @ (space.pair_v0 @ mu.values))
    total = 0.0
    for geom, v_tau in zip(space.part.geometry, v):
        side = geom.boundary_signs * mu.values[geom.boundary_face_ids]
        total += float(side @ (geom.trace_matrix @ v_tau))
    return total


def boundary_functional(space: TraceSpace, v: Sequence[np.ndarray]) -> np.ndarray:
    """Stored-orientation functional r with (mu, v) = mu . r for all mu.

    r accumulates sign(tau, F) * integral of v_tau over each fine face,
    summed over the incident elements.
    """
    r = np.zeros(space.n_fine)
    for geom, v_tau in zip(space.part.geometry, v):
        r[geom.boundary_face_ids] += geom.boundary_signs * (geom.trace_matrix @ v_tau)
    return r


def element_boundary_functional(space: TraceSpace, elem: int, v_tau: np.ndarray) -> np.ndarray:
    """Same as :func:`boundary_functional` for a function supported on one element."""
    geom = space.part.geometry[elem]
    r = np.zeros(space.n_fine)
    r[geom.boundary_face_ids] += geom.boundary_signs * (geom.trace_matrix @ v_tau)
    return r


def solve_V0_pairing(space: TraceSpace, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Solve the N x N system with entries (lambda0_i, 1_tau_j).

    ``transpose=False`` solves sum_j x_j (lambda0_i, 1_tau_j) = rhs_i (the
    constant-part recovery); ``transpose=True`` solves the transposed
    system sum_i x_i (lambda0_i, 1_tau_j) = rhs_j (the jump-coefficient
    solve).  The matrix is irreducibly diagonally dominant, hence
    nonsingular, on any valid mesh.
    """
    lu = space.factorization()
    rhs = np.asarray(rhs, dtype=float)
    x = lu.solve(rhs, trans="T" if transpose else "N")
    if not np.all(np.isfinite(x)):
        raise AssertionError("constant-pairing solve produced non-finite values")
    return x


def decompose(
    space: TraceSpace, mu: TraceVector
) -> tuple[TraceVector, TraceVector, TraceVector]:
    """Split mu into (jump part, face-constant part, zero-face-average part).

    The jump part matches mu against all piecewise constants, the
    face-constant part is the facewise average of the remainder, and what
    is left has zero mean on every coarse face.  The three parts sum back
    to mu exactly.
    """
    b = space.pair_v0 @ mu.values
    coeffs = solve_V0_pairing(space, b, transpose=True)
    mu0 = space.jump_basis @ coeffs
    r = mu.values - mu0
    averages = space.face_integrals(r) / space.mesh.face_measures
    mu_t0 = space.expand_face_constants(averages)
    mu_tf = r - mu_t0
    return (
        TraceVector(space, np.asarray(mu0).ravel()),
        TraceVector(space, mu_t0),
        TraceVector(space, mu_tf),
    )
