"""Galerkin projections in the flux energy, global and patch-localized.

All of these solve the same kind of problem: find a multiplier in a
face-spanned subspace whose flux energy matches a given functional.  The
subspace is described by per-face basis blocks (the full zero-average
block, or the localizable part of the face spectrum), the energy matrix
is assembled once from the cached element flux-energy blocks, and patch
problems are plain principal submatrices of it.  No interior problem is
ever re-solved here.

Patch factorizations are cached by their active face set, so saturated
patches (and repeated seeds) share one factorization.  Accumulation of
overlapping patch contributions runs in deterministic seed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .localop import ElementCache
from .mesh import CoarseMesh, element_layers
from .spectral import FaceSpectrum
from .traces import TraceSpace, TraceVector

__all__ = [
    "FaceBasis",
    "PatchProblem",
    "PatchProjector",
    "RingProfile",
    "build_flux_energy",
    "plain_basis",
    "delta_basis",
    "pi_basis",
    "ring_energies",
]

DENSE_PATCH_LIMIT = 4000


def build_flux_energy(space: TraceSpace, caches: list[ElementCache]) -> sp.csr_matrix:
    """Global flux-energy matrix in stored coordinates.

    ``mu . (S nu)`` equals the energy pairing of the two trace vectors,
    assembled by scattering each element's flux-energy block with its
    element-side signs.
    """
    rows, cols, vals = [], [], []
    for cache in caches:
        geom = cache.geom
        signed = (cache.flux_energy * geom.boundary_signs[None, :]) * geom.boundary_signs[:, None]
        idx = geom.boundary_face_ids
        rr, cc = np.meshgrid(idx, idx, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(signed.ravel())
    n = space.n_fine
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    mat.sum_duplicates()
    return mat


@dataclass
class FaceBasis:
    """Per-coarse-face basis blocks of a face-spanned multiplier subspace."""

    space: TraceSpace
    label: str
    blocks: list[np.ndarray]        # per face: (nfs, m_F) in stored coordinates
    col_offsets: np.ndarray         # (NF + 1,)
    matrix: sp.csc_matrix           # (n_fine, M) all blocks side by side

    @property
    def dim(self) -> int:
        return int(self.col_offsets[-1])

    def face_cols(self, face: int) -> np.ndarray:
        return np.arange(self.col_offsets[face], self.col_offsets[face + 1])


def _assemble_basis(space: TraceSpace, label: str, blocks: list[np.ndarray]) -> FaceBasis:
    nfs = space.part.faces_per_coarse
    offsets = np.zeros(space.n_coarse_faces + 1, dtype=int)
    rows, cols, vals = [], [], []
    for f, blk in enumerate(blocks):
        offsets[f + 1] = offsets[f] + blk.shape[1]
        if blk.shape[1] == 0:
            continue
        base_row = f * nfs
        r = np.repeat(np.arange(base_row, base_row + nfs), blk.shape[1])
        c = np.tile(np.arange(offsets[f], offsets[f + 1]), nfs)
        rows.append(r)
        cols.append(c)
        vals.append(blk.ravel())
    if rows:
        matrix = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(space.n_fine, int(offsets[-1])),
        )
    else:
        matrix = sp.csc_matrix((space.n_fine, 0))
    return FaceBasis(space, label, blocks, offsets, matrix)


def plain_basis(space: TraceSpace) -> FaceBasis:
    """Zero-average-per-face subspace (the full fine remainder block)."""
    z = space.zero_mean
    return _assemble_basis(space, "plain", [z] * space.n_coarse_faces)


def delta_basis(space: TraceSpace, spectra: list[FaceSpectrum]) -> FaceBasis:
    """Localizable block of the face spectra, per face."""
    blocks = [s.stored_delta(space) for s in spectra]
    return _assemble_basis(space, "delta", blocks)


def pi_basis(space: TraceSpace, spectra: list[FaceSpectrum]) -> FaceBasis:
    """Retained block of the face spectra, per face."""
    blocks = [s.stored_pi(space) for s in spectra]
    return _assemble_basis(space, "pi", blocks)


@dataclass
class PatchProblem:
    """Factorized Galerkin problem on the faces of one layer neighborhood."""

    seed: tuple[str, int]
    j: int
    active_faces: np.ndarray
    dof_indices: np.ndarray
    factor: object = field(repr=False)

    @property
    def dim(self) -> int:
        return self.dof_indices.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if isinstance(self.factor, tuple):
            return scipy.linalg.cho_solve(self.factor, rhs)
        return self.factor.solve(rhs)


class PatchProjector:
    """Flux-energy Galerkin solver over a face basis, global and localized."""

    def __init__(
        self,
        space: TraceSpace,
        caches: list[ElementCache],
        energy: sp.csr_matrix,
        basis: FaceBasis,
    ):
        self.space = space
        self.caches = caches
        self.energy = energy
        self.basis = basis
        self.gram = (basis.matrix.T @ (energy @ basis.matrix)).toarray()
        self.gram = 0.5 * (self.gram + self.gram.T)
        self._reduce = (basis.matrix.T @ energy).tocsc()   # maps stored lambda -> W^T S lambda
        self._global_factor = None
        self._patch_cache: dict[tuple[int, ...], object] = {}
        self._layer_cache: dict[tuple[str, int, int], np.ndarray] = {}

    # -- global (reference) solves ------------------------------------------------

    def _factorize_global(self):
        if self._global_factor is None:
            if self.basis.dim == 0:
                self._global_factor = ()
            elif self.basis.dim <= DENSE_PATCH_LIMIT:
                try:
                    self._global_factor = scipy.linalg.cho_factor(self.gram)
                except scipy.linalg.LinAlgError as exc:
                    raise AssertionError(
                        f"global {self.basis.label} energy Gram matrix is not SPD: {exc}"
                    ) from exc
            else:
                self._global_factor = spla.splu(sp.csc_matrix(self.gram))
        return self._global_factor

    def _solve_global(self, rhs: np.ndarray) -> np.ndarray:
        factor = self._factorize_global()
        if self.basis.dim == 0:
            return np.zeros(0)
        if isinstance(factor, tuple):
            return scipy.linalg.cho_solve(factor, rhs)
        return factor.solve(rhs)

    def reduce_functional(self, r: np.ndarray) -> np.ndarray:
        """Test the stored functional vector against every basis column."""
        return self.basis.matrix.T @ r

    def project_functional(self, r: np.ndarray) -> TraceVector:
        """Global solve: subspace element whose flux energy matches ``r``."""
        x = self._solve_global(self.reduce_functional(r))
        return self.space.vector(self.basis.matrix @ x)

    def project_flux(self, lam: TraceVector) -> TraceVector:
        """Global projection applied to the potential of a multiplier."""
        return self.project_functional(self.energy @ lam.values)

    # -- patch problems -------------------------------------------------------------

    def active_faces(self, elems: frozenset[int]) -> np.ndarray:
        """Faces all of whose incident elements lie inside the patch."""
        mesh = self.space.mesh
        out = []
        for f in range(mesh.n_faces):
            if self.basis.blocks[f].shape[1] == 0:
                continue
            left = int(mesh.face_left[f])
            if left not in elems:
                continue
            right = int(mesh.face_right[f])
            if right >= 0 and right not in elems:
                continue
            out.append(f)
        return np.array(out, dtype=int)

    def _layer_faces(self, seed: tuple[str, int], j: int) -> np.ndarray:
        key = (seed[0], seed[1], j)
        faces = self._layer_cache.get(key)
        if faces is None:
            layer = element_layers(self.space.mesh, seed, j)
            faces = self.active_faces(layer.indices)
            self._layer_cache[key] = faces
        return faces

    def patch_problem(self, seed: tuple[str, int], j: int) -> PatchProblem:
        """Build (or fetch) the factorized patch problem for a seed."""
        if j < 1:
            raise ValueError("patch layer count must be >= 1")
        faces = self._layer_faces(seed, j)
        key = tuple(faces.tolist())
        factor = self._patch_cache.get(key)
        dofs = (
            np.concatenate([self.basis.face_cols(f) for f in faces])
            if faces.size
            else np.array([], dtype=int)
        )
        if factor is None:
            if dofs.size == 0:
                factor = ()
            else:
                sub = self.gram[np.ix_(dofs, dofs)]
                try:
                    if dofs.size <= DENSE_PATCH_LIMIT:
                        factor = scipy.linalg.cho_factor(sub)
                    else:
                        factor = spla.splu(sp.csc_matrix(sub))
                except (scipy.linalg.LinAlgError, RuntimeError) as exc:
                    raise AssertionError(
                        f"patch Gram matrix not SPD for seed {seed}, j={j}: {exc}"
                    ) from exc
            self._patch_cache[key] = factor
        return PatchProblem(seed, j, faces, dofs, factor)

    def solve_patch(self, problem: PatchProblem, rhs_reduced: np.ndarray) -> TraceVector:
        """Galerkin solve on the patch subspace.

        ``rhs_reduced`` is the functional tested against the full basis;
        only its active entries participate.  The output vanishes outside
        the patch faces by construction.
        """
        out = np.zeros(self.space.n_fine)
        if problem.dim:
            x = problem.solve(rhs_reduced[problem.dof_indices])
            nfs = self.space.part.faces_per_coarse
            pos = 0
            for f in problem.active_faces:
                blk = self.basis.blocks[f]
                m = blk.shape[1]
                out[f * nfs : (f + 1) * nfs] += blk @ x[pos : pos + m]
                pos += m
        return self.space.vector(out)

    # -- localized operator applications --------------------------------------------

    def apply_PjT(self, lam: TraceVector, j: int | None) -> TraceVector:
        """Face-seeded localization applied to the potential of ``lam``.

        Splits the multiplier by coarse faces, solves one patch problem per
        face carrying data, and sums.  ``j=None`` is the global reference.
        """
        out = self.apply_PjT_columns(lam.values[:, None], j)
        return self.space.vector(out[:, 0])

    def apply_PjT_columns(self, columns: np.ndarray, j: int | None) -> np.ndarray:
        """Vectorized :meth:`apply_PjT` over the columns of a matrix.

        All columns share each face's patch factorization, so a face costs
        one multi-rhs solve instead of one solve per column.
        """
        if j is None:
            rhs = self.basis.matrix.T @ (self.energy @ columns)
            if self.basis.dim == 0:
                return np.zeros_like(columns)
            factor = self._factorize_global()
            if isinstance(factor, tuple):
                x = scipy.linalg.cho_solve(factor, rhs)
            else:
                x = np.column_stack([factor.solve(rhs[:, k]) for k in range(rhs.shape[1])])
            return self.basis.matrix @ x
        nfs = self.space.part.faces_per_coarse
        out = np.zeros_like(columns)
        for f in range(self.space.n_coarse_faces):
            sl = slice(f * nfs, (f + 1) * nfs)
            vals = columns[sl, :]
            live = np.nonzero(np.any(vals != 0.0, axis=0))[0]
            if live.size == 0:
                continue
            rhs = np.asarray(self._reduce[:, sl] @ vals[:, live])
            problem = self.patch_problem(("face", f), j)
            if problem.dim == 0:
                continue
            x = problem.solve(rhs[problem.dof_indices, :])
            pos = 0
            for fa in problem.active_faces:
                blk = self.basis.blocks[fa]
                m = blk.shape[1]
                out[fa * nfs : (fa + 1) * nfs][:, live] += blk @ x[pos : pos + m, :]
                pos += m
        return out

    def apply_Pj(self, functionals: list[np.ndarray | None], j: int | None) -> TraceVector:
        """Element-seeded localization of a broken function.

        ``functionals[k]`` is the stored boundary functional of the
        function restricted to element k (``None`` to skip).  Used to
        localize the load potential; ``j=None`` is the global reference.
        """
        if j is None:
            total = np.zeros(self.space.n_fine)
            for r in functionals:
                if r is not None:
                    total += r
            return self.project_functional(total)
        out = np.zeros(self.space.n_fine)
        for k, r in enumerate(functionals):
            if r is None:
                continue
            rhs = self.reduce_functional(r)
            problem = self.patch_problem(("element", k), j)
            out += self.solve_patch(problem, rhs).values
        return self.space.vector(out)


# ---------------------------------------------------------------------------
# Ring energies for decay studies.
# ---------------------------------------------------------------------------


@dataclass
class RingProfile:
    """Per-ring flux energies of a trace potential around a seed.

    ``energies[0]`` covers the first layer around the seed; ring r covers
    the elements added by the (r+1)-th layer.  The fitted ratio is the
    geometric per-ring factor from a least-squares line through the log
    energies of rings >= 1, ignoring rings below 1e-14 of the total.
    """

    seed: tuple[str, int]
    energies: np.ndarray
    ratio: float
    total: float

    def cumulative_fraction(self) -> np.ndarray:
        if self.total == 0.0:
            return np.zeros_like(self.energies)
        return np.cumsum(self.energies) / self.total

    def tail_fraction(self, after_ring: int) -> float:
        """Fraction of the total energy beyond the given ring index."""
        if self.total == 0.0:
            return 0.0
        return float(self.energies[after_ring + 1 :].sum() / self.total)

    def step_ratios(self, threshold: float = 1e-13) -> np.ndarray:
        """Consecutive ring ratios e_{r+1}/e_r over significant rings (r >= 1)."""
        out = []
        for r in range(1, len(self.energies) - 1):
            a, b = self.energies[r], self.energies[r + 1]
            if a > threshold * self.total and b > threshold * self.total:
                out.append(b / a)
        return np.array(out)

    @property
    def worst_step(self) -> float:
        """Largest per-ring decay factor: flat plateaus report ~1 even when a
        least-squares line through the profile would hide them."""
        steps = self.step_ratios()
        return float(steps.max()) if steps.size else 0.0

    def to_csv(self, path: str) -> None:
        cum = self.cumulative_fraction()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("seed_kind,seed_index,ring,energy,cumulative_fraction\n")
            for r, (e, c) in enumerate(zip(self.energies, cum)):
                fh.write(f"{self.seed[0]},{self.seed[1]},{r},{float(e)!r},{float(c)!r}\n")


def _fit_ratio(energies: np.ndarray, total: float, start: int = 1) -> float:
    keep = [
        (r, e)
        for r, e in enumerate(energies)
        if r >= start and e > 1e-14 * total and e > 0.0
    ]
    if len(keep) < 2:
        return 0.0
    idx = np.array([r for r, _ in keep], dtype=float)
    log_e = np.log([e for _, e in keep])
    slope = np.polyfit(idx, log_e, 1)[0]
    return float(np.exp(slope))


def ring_energies(
    mesh: CoarseMesh,
    caches: list[ElementCache],
    mu: TraceVector,
    seed: tuple[str, int],
) -> RingProfile:
    """Broken energy of the potential of ``mu`` split by layer rings."""
    per_element = np.array([c.flux_side_energy(mu.side_values(c.elem)) for c in caches])
    total = float(per_element.sum())
    rings = []
    covered: frozenset[int] = frozenset()
    j = 1
    while len(covered) < mesh.n_elements:
        layer = element_layers(mesh, seed, j).indices
        fresh = layer - covered
        rings.append(float(per_element[sorted(fresh)].sum()) if fresh else 0.0)
        covered = layer
        j += 1
        if j > mesh.n_elements + 1:
            break
    energies = np.array(rings)
    return RingProfile(seed, energies, _fit_ratio(energies, total), total)
