"""End-to-end solvers: staged method, oracles, and run reports.

The staged solve follows the four-step elimination of the hybrid saddle
problem: jump coefficients from the constant pairing, the upscaled
coarse solve over the face-constant-plus-retained block, recovery of the
localizable component by patch solves, then the constant part and the
elementwise reconstruction.  Two oracles sit alongside it: the monolithic
symmetric-indefinite solve of the full hybrid system, and a conforming
P1 solve on the union fine mesh approximating the continuous solution.
Every solution path uses direct factorizations only.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import presets
from .coeff import (
    CoefficientField,
    ContrastStats,
    WeightField,
    local_bounds,
    make_weight,
)
from .localize import (
    PatchProjector,
    build_flux_energy,
    delta_basis,
    pi_basis,
    plain_basis,
)
from .localop import (
    ElementCache,
    apply_T,
    apply_Ttilde,
    assemble_all,
    broken_energy,
)
from .mesh import (
    CoarseMesh,
    FinePartition,
    build_structured_mesh,
    load_mesh,
    refine_faces,
    saturation_radius,
)
from .spectral import (
    ElementSpectrum,
    FaceSpectrum,
    all_element_spectra,
    all_face_spectra,
    project_rhs,
    ttilde_from_spectrum,
)
from .traces import (
    PiecewiseConstant,
    TraceSpace,
    TraceVector,
    build_trace_space,
    element_boundary_functional,
    solve_V0_pairing,
)

__all__ = [
    "SolverConfig",
    "Solution",
    "Assembly",
    "PipelineError",
    "build_assembly",
    "sample_load",
    "solve_lambda0",
    "assemble_upscaled",
    "recover_delta",
    "solve_u0",
    "reconstruct",
    "solve_lsd",
    "exact_hybrid_solve",
    "conforming_solve",
    "energy_error",
    "load_norm",
    "full_pipeline",
]

EQUILIBRIUM_TOL = 1e-10


class PipelineError(RuntimeError):
    """A stage of the pipeline failed; carries the stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


@dataclass
class SolverConfig:
    """Everything a run needs; serializable and hashable for reports."""

    nx: int = 4
    ny: int = 4
    domain: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    mesh_file: str | None = None
    face_level: int = 1
    interior_level: int | None = None
    coefficient: str = "smooth"
    coefficient_params: dict = field(default_factory=dict)
    coefficient_file: str | None = None
    rho: str = "one"
    variant: str = "plain"              # "plain" or "delta"
    alpha_stab: float = 4.0
    j: int = 2
    h_target: float | None = None       # defaults to the coarse mesh size
    c_j: float = 1.0
    rhs: str = "smooth"
    rhs_params: dict = field(default_factory=dict)
    rhs_reduction: bool = False
    compare_exact: bool = False
    compare_conforming: bool = False
    threads: int = 1
    equilibrium_tol: float = EQUILIBRIUM_TOL

    def validate(self) -> None:
        if self.j < 1:
            raise ValueError("j must be >= 1")
        if self.alpha_stab < 1.0:
            raise ValueError("alpha_stab must be >= 1")
        if self.h_target is not None and self.h_target <= 0.0:
            raise ValueError("h_target must be positive")
        if self.variant not in ("plain", "delta"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.face_level < 0:
            raise ValueError("face_level must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = list(self.domain)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "domain" in kwargs:
            kwargs["domain"] = tuple(kwargs["domain"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Solution:
    """Reconstructed fields of one staged solve."""

    u0: PiecewiseConstant
    u_broken: list[np.ndarray]
    lam0: TraceVector
    lam_coarse: TraceVector        # face-constant + retained spectral part
    lam_delta: TraceVector
    lam_total: TraceVector
    sigma: list[np.ndarray]        # per element: (nc, 2) cellwise flux
    diagnostics: dict


class Assembly:
    """Stage products shared between solves on one discretization."""

    def __init__(
        self,
        mesh: CoarseMesh,
        part: FinePartition,
        field_a: CoefficientField,
        weight: WeightField,
        caches: list[ElementCache],
        space: TraceSpace,
        energy: sp.csr_matrix,
        stats: ContrastStats,
        threads: int = 1,
    ):
        self.mesh = mesh
        self.part = part
        self.field = field_a
        self.weight = weight
        self.caches = caches
        self.space = space
        self.energy = energy
        self.stats = stats
        self.threads = threads
        self._face_spectra: dict[float, list[FaceSpectrum]] = {}
        self._projectors: dict[tuple[str, float], PatchProjector] = {}
        self._element_spectra: dict[tuple[float, float], list[ElementSpectrum]] = {}
        self._union: UnionMesh | None = None

    def face_spectra(self, alpha_stab: float) -> list[FaceSpectrum]:
        spectra = self._face_spectra.get(alpha_stab)
        if spectra is None:
            spectra = all_face_spectra(self.space, self.caches, alpha_stab, self.threads)
            self._face_spectra[alpha_stab] = spectra
        return spectra

    def projector(self, variant: str, alpha_stab: float) -> PatchProjector:
        key = (variant, alpha_stab if variant == "delta" else 0.0)
        proj = self._projectors.get(key)
        if proj is None:
            if variant == "plain":
                basis = plain_basis(self.space)
            else:
                basis = delta_basis(self.space, self.face_spectra(alpha_stab))
            proj = PatchProjector(self.space, self.caches, self.energy, basis)
            self._projectors[key] = proj
        return proj

    def element_spectra(self, h_target: float, c_j: float) -> list[ElementSpectrum]:
        key = (h_target, c_j)
        spectra = self._element_spectra.get(key)
        if spectra is None:
            spectra = all_element_spectra(self.caches, h_target, c_j, self.threads)
            self._element_spectra[key] = spectra
        return spectra

    def coarse_basis(self, variant: str, alpha_stab: float) -> np.ndarray:
        """Stored basis of the upscaled block: face constants plus retained modes."""
        tilde0 = self.space.tilde0_stored_basis()
        if variant == "plain":
            return tilde0
        pi = pi_basis(self.space, self.face_spectra(alpha_stab))
        if pi.dim == 0:
            return tilde0
        return np.hstack([tilde0, pi.matrix.toarray()])

    def union_mesh(self) -> "UnionMesh":
        if self._union is None:
            self._union = build_union_mesh(self.part)
        return self._union


def build_assembly(cfg: SolverConfig) -> Assembly:
    """Stages mesh -> coefficients -> element caches -> trace space."""
    cfg.validate()
    try:
        if cfg.mesh_file:
            mesh = load_mesh(cfg.mesh_file)
        else:
            mesh = build_structured_mesh(cfg.nx, cfg.ny, cfg.domain)
        part = refine_faces(mesh, cfg.face_level, cfg.interior_level)
    except Exception as exc:
        raise PipelineError("mesh", exc) from exc
    try:
        field_a = presets.coefficient_field(
            part, cfg.coefficient, cfg.coefficient_params, cfg.coefficient_file
        )
        weight = make_weight(cfg.rho, field_a)
        stats = local_bounds(field_a)
    except Exception as exc:
        raise PipelineError("coefficients", exc) from exc
    try:
        caches = assemble_all(field_a, weight, part, cfg.threads)
    except Exception as exc:
        raise PipelineError("element_caches", exc) from exc
    try:
        space = build_trace_space(part)
        energy = build_flux_energy(space, caches)
    except Exception as exc:
        raise PipelineError("trace_space", exc) from exc
    return Assembly(mesh, part, field_a, weight, caches, space, energy, stats, cfg.threads)


def sample_load(part: FinePartition, fn: Callable[[np.ndarray], np.ndarray]) -> list[np.ndarray]:
    """Elementwise P1 interpolant of the load g."""
    return [np.asarray(fn(geom.nodes), dtype=float) for geom in part.geometry]


def load_norm(caches: list[ElementCache], g: list[np.ndarray]) -> float:
    """Weighted L2 norm of the load."""
    return sum(float(g_t @ (c.mass @ g_t)) for c, g_t in zip(caches, g)) ** 0.5


def energy_error(caches: list[ElementCache], u: list[np.ndarray], v: list[np.ndarray]) -> float:
    """Broken A-energy distance between two broken nodal fields."""
    return sum(
        float((a - b) @ (c.stiffness @ (a - b))) for c, a, b in zip(caches, u, v)
    ) ** 0.5


# ---------------------------------------------------------------------------
# The staged solve.
# ---------------------------------------------------------------------------


def solve_lambda0(assembly: Assembly, g: list[np.ndarray]) -> TraceVector:
    """Jump-basis coefficients from the constant pairing against the load."""
    rhs = np.array([-float(c.mean_vector @ g_t) for c, g_t in zip(assembly.caches, g)])
    coeffs = solve_V0_pairing(assembly.space, rhs, transpose=True)
    return assembly.space.vector(assembly.space.jump_basis @ coeffs)


def compute_ttilde(
    assembly: Assembly,
    g: list[np.ndarray],
    spectra: list[ElementSpectrum] | None = None,
) -> list[np.ndarray]:
    """Load potential per element; spectral shortcut when spectra are given."""
    if spectra is None:
        return [apply_Ttilde(c, g_t).values for c, g_t in zip(assembly.caches, g)]
    return [
        ttilde_from_spectrum(spec, cache, g_t)
        for spec, cache, g_t in zip(spectra, assembly.caches, g)
    ]


@dataclass
class UpscaledSystem:
    """Assembled coarse system over the face-constant + retained block."""

    basis: np.ndarray          # (n_fine, M) stored basis columns
    multiscale: np.ndarray     # (n_fine, M) columns after removing the localized part
    gram: np.ndarray           # (M, M)
    rhs: np.ndarray            # (M,)
    coefficients: np.ndarray | None = None


def assemble_upscaled(
    assembly: Assembly,
    projector: PatchProjector,
    basis: np.ndarray,
    lam0: TraceVector,
    ttg: list[np.ndarray],
    ttg_functionals: list[np.ndarray],
    j: int | None,
) -> UpscaledSystem:
    """Build the coarse Galerkin system for the face-constant + retained part.

    Each basis column is turned into its multiscale version (identity
    minus localized projection applied to its potential) by patch solves;
    the Gram entries and both load terms then come from the cached energy
    matrix, never from interior re-solves.
    """
    space = assembly.space
    s_mat = assembly.energy
    psi = basis - projector.apply_PjT_columns(basis, j)
    gram = psi.T @ (s_mat @ psi)
    gram = 0.5 * (gram + gram.T)

    r_ttg = np.add.reduce(ttg_functionals) if ttg_functionals else np.zeros(space.n_fine)
    q = projector.apply_Pj(ttg_functionals, j)
    phi = lam0.values - projector.apply_PjT(lam0, j).values
    work = r_ttg - s_mat @ q.values + s_mat @ phi
    rhs = -(psi.T @ work)
    return UpscaledSystem(basis, psi, gram, rhs)


def solve_upscaled(system: UpscaledSystem, space: TraceSpace) -> TraceVector:
    if system.basis.shape[1] == 0:
        system.coefficients = np.zeros(0)
        return space.zeros()
    try:
        factor = scipy.linalg.cho_factor(system.gram)
    except scipy.linalg.LinAlgError as exc:
        raise AssertionError(
            f"upscaled system is not SPD ({exc}); patch/spectral data inconsistent"
        ) from exc
    x = scipy.linalg.cho_solve(factor, system.rhs)
    system.coefficients = x
    return space.vector(system.basis @ x)


def recover_delta(
    assembly: Assembly,
    projector: PatchProjector,
    lam0: TraceVector,
    lam_coarse: TraceVector,
    ttg_functionals: list[np.ndarray],
    j: int | None,
) -> TraceVector:
    """Localizable component from patch projections of the known parts."""
    flux_part = projector.apply_PjT(lam0 + lam_coarse, j)
    load_part = projector.apply_Pj(ttg_functionals, j)
    return -(flux_part + load_part)


def solve_u0(
    assembly: Assembly, lam_total: TraceVector, r_ttg: np.ndarray
) -> PiecewiseConstant:
    """Constant part from the transposed constant-pairing system."""
    space = assembly.space
    rhs = -(space.jump_basis.T @ (assembly.energy @ lam_total.values + r_ttg))
    values = solve_V0_pairing(space, np.asarray(rhs).ravel(), transpose=False)
    return PiecewiseConstant(values)


def reconstruct(
    assembly: Assembly,
    lam0: TraceVector,
    lam_coarse: TraceVector,
    lam_delta: TraceVector,
    u0: PiecewiseConstant,
    g: list[np.ndarray],
    ttg: list[np.ndarray],
    equilibrium_tol: float = EQUILIBRIUM_TOL,
) -> Solution:
    """Per-element displacement and flux, with equilibrium diagnostics.

    The flux is checked against the interior load balance on every
    element: the residual at interior nodes is the multiplier of the
    zero-average constraint, which vanishes because the recovered
    multiplier carries exactly the load average of each element.
    """
    lam_total = lam0 + lam_coarse + lam_delta
    u_broken: list[np.ndarray] = []
    sigma: list[np.ndarray] = []
    eq_rel = np.zeros(len(assembly.caches))
    for cache in assembly.caches:
        t = cache.elem
        side = lam_total.side_values(t)
        tilde = apply_T(cache, side).values + ttg[t]
        u_broken.append(u0.values[t] + tilde)
        grad = np.einsum("ck,cki->ci", tilde[cache.geom.cells], cache.geom.grads)
        sigma.append(np.einsum("cij,cj->ci", cache.tensors, grad))
        load = cache.mass @ g[t]
        traction = cache.geom.trace_matrix.T @ side
        residual = cache.stiffness @ tilde - load - traction
        interior = cache.geom.interior_nodes
        # Componentwise scale: the residual at a node is compared against
        # the magnitudes of the flux and load terms that feed it, so the
        # check stays meaningful at high contrast.
        scale = np.abs(cache.stiffness) @ np.abs(tilde) + np.abs(load) + np.abs(traction)
        scale = np.maximum(scale, scale.max() * 1e-8 + 1e-300)
        if interior.size:
            eq_rel[t] = (np.abs(residual[interior]) / scale[interior]).max()
    flux_energy_sq = float(lam_total.values @ (assembly.energy @ lam_total.values))
    diagnostics = {
        "equilibrium_rel_max": float(eq_rel.max()) if len(eq_rel) else 0.0,
        "equilibrium_tol": equilibrium_tol,
        "equilibrium_ok": bool(eq_rel.max() <= equilibrium_tol) if len(eq_rel) else True,
        "flux_energy_sq": flux_energy_sq,
        "solution_energy_sq": broken_energy(assembly.caches, u_broken),
    }
    return Solution(
        u0=u0,
        u_broken=u_broken,
        lam0=lam0,
        lam_coarse=lam_coarse,
        lam_delta=lam_delta,
        lam_total=lam_total,
        sigma=sigma,
        diagnostics=diagnostics,
    )


def solve_lsd(
    assembly: Assembly,
    g: list[np.ndarray],
    j: int | None,
    variant: str = "plain",
    alpha_stab: float = 4.0,
    rhs_reduction: bool = False,
    h_target: float | None = None,
    c_j: float = 1.0,
    equilibrium_tol: float = EQUILIBRIUM_TOL,
) -> Solution:
    """Run the staged solve on an existing assembly.

    ``j=None`` uses the global projections (the exact four-step
    reference); any integer j >= 1 localizes every projection to j
    element layers.
    """
    if h_target is None:
        h_target = assembly.mesh.coarse_size
    g_used = g
    reduction_info: dict = {}
    spectra_e: list[ElementSpectrum] | None = None
    if rhs_reduction:
        spectra_e = assembly.element_spectra(h_target, c_j)
        g_used, remainders = project_rhs(spectra_e, assembly.caches, g)
        sig_next = np.array(
            [s.sigma[s.j_count] if s.j_count < len(s.sigma) else np.inf for s in spectra_e]
        )
        reduction_info = {
            "j_counts": [s.j_count for s in spectra_e],
            "sigma_next_min": float(sig_next.min()),
            "reduction_bound": float(np.max(1.0 / np.sqrt(sig_next))),
            "dropped_norm": float(np.linalg.norm(remainders)),
        }

    ttg = compute_ttilde(assembly, g_used, spectra_e)
    ttg_functionals = [
        element_boundary_functional(assembly.space, t, v) for t, v in enumerate(ttg)
    ]
    r_ttg = np.add.reduce(ttg_functionals) if ttg_functionals else np.zeros(assembly.space.n_fine)

    projector = assembly.projector(variant, alpha_stab)
    basis = assembly.coarse_basis(variant, alpha_stab)

    lam0 = solve_lambda0(assembly, g_used)
    system = assemble_upscaled(assembly, projector, basis, lam0, ttg, ttg_functionals, j)
    lam_coarse = solve_upscaled(system, assembly.space)
    lam_delta = recover_delta(assembly, projector, lam0, lam_coarse, ttg_functionals, j)
    lam_total = lam0 + lam_coarse + lam_delta
    u0 = solve_u0(assembly, lam_total, r_ttg)
    solution = reconstruct(
        assembly, lam0, lam_coarse, lam_delta, u0, g_used, ttg, equilibrium_tol
    )
    solution.diagnostics["variant"] = variant
    solution.diagnostics["j"] = j
    solution.diagnostics["coarse_dim"] = int(basis.shape[1])
    solution.diagnostics["load_norm"] = load_norm(assembly.caches, g_used)
    if rhs_reduction:
        solution.diagnostics["rhs_reduction"] = reduction_info
    return solution


# ---------------------------------------------------------------------------
# Oracles.
# ---------------------------------------------------------------------------


def exact_hybrid_solve(
    assembly: Assembly, g: list[np.ndarray]
) -> tuple[list[np.ndarray], TraceVector]:
    """Monolithic symmetric-indefinite solve of the full hybrid system.

    Returns the broken solution and the multiplier.  This is the
    localization-error reference; it is exact up to the direct solver.
    """
    part = assembly.part
    space = assembly.space
    offsets = np.zeros(len(part.geometry) + 1, dtype=int)
    for geom in part.geometry:
        offsets[geom.elem + 1] = offsets[geom.elem] + geom.n_nodes
    nu = int(offsets[-1])
    nl = space.n_fine

    blocks_r, blocks_c, blocks_v = [], [], []
    rhs = np.zeros(nu + nl)
    for cache in assembly.caches:
        geom = cache.geom
        base = offsets[geom.elem]
        nn = geom.n_nodes
        rr, cc = np.meshgrid(np.arange(nn) + base, np.arange(nn) + base, indexing="ij")
        blocks_r.append(rr.ravel())
        blocks_c.append(cc.ravel())
        blocks_v.append(cache.stiffness.ravel())
        # Constraint block: -(mu, u) rows and the symmetric -(lambda, v) columns.
        signed_trace = geom.boundary_signs[:, None] * geom.trace_matrix
        fr = np.repeat(geom.boundary_face_ids + nu, nn)
        fc = np.tile(np.arange(nn) + base, geom.n_boundary_faces)
        blocks_r.extend([fr, fc])
        blocks_c.extend([fc, fr])
        blocks_v.extend([-signed_trace.ravel(), -signed_trace.ravel()])
        rhs[base : base + nn] = cache.mass @ g[cache.elem]
    mat = sp.csc_matrix(
        (np.concatenate(blocks_v), (np.concatenate(blocks_r), np.concatenate(blocks_c))),
        shape=(nu + nl, nu + nl),
    )
    try:
        lu = spla.splu(mat)
    except RuntimeError as exc:
        raise AssertionError(f"hybrid saddle system is singular: {exc}") from exc
    sol = lu.solve(rhs)
    u_broken = [sol[offsets[t] : offsets[t + 1]] for t in range(len(part.geometry))]
    lam = space.vector(sol[nu:])
    return u_broken, lam


@dataclass
class UnionMesh:
    """Conforming view of the per-element interior triangulations."""

    nodes: np.ndarray
    node_maps: list[np.ndarray]    # per element: local node id -> union node id
    boundary: np.ndarray           # union node ids on the domain boundary


def build_union_mesh(part: FinePartition) -> UnionMesh:
    scale = max(
        float(np.ptp(part.mesh.vertices[:, 0])), float(np.ptp(part.mesh.vertices[:, 1])), 1.0
    )
    delta = 1e-9 * scale
    buckets: dict[tuple[int, int], int] = {}
    coords: list[np.ndarray] = []
    node_maps = []
    for geom in part.geometry:
        local = np.empty(geom.n_nodes, dtype=int)
        for i, p in enumerate(geom.nodes):
            kx, ky = int(round(p[0] / delta)), int(round(p[1] / delta))
            gid = None
            for dx in (0, -1, 1):
                for dy in (0, -1, 1):
                    cand = buckets.get((kx + dx, ky + dy))
                    if cand is not None and np.hypot(*(coords[cand] - p)) <= 10 * delta:
                        gid = cand
                        break
                if gid is not None:
                    break
            if gid is None:
                gid = len(coords)
                coords.append(p.copy())
                buckets[(kx, ky)] = gid
            local[i] = gid
        node_maps.append(local)

    boundary_ids: set[int] = set()
    mesh = part.mesh
    for f in range(mesh.n_faces):
        if not mesh.face_boundary[f]:
            continue
        elem = int(mesh.face_left[f])
        geom = part.geometry[elem]
        rows = geom.face_rows[f]
        # Nodes supporting the trace rows of a boundary face lie on it.
        on_face = np.nonzero(np.abs(geom.trace_matrix[rows]).sum(axis=0) > 0.0)[0]
        boundary_ids.update(int(node_maps[elem][i]) for i in on_face)
    return UnionMesh(np.array(coords), node_maps, np.array(sorted(boundary_ids), dtype=int))


def poincare_estimate(assembly: Assembly) -> float:
    """Rayleigh-quotient estimate of the global weighted Poincare constant.

    Largest ratio of the weighted L2 norm to the energy norm over the
    conforming fine space with zero boundary values; computed from the
    smallest eigenvalue of the global stiffness/mass pencil.  A measured
    diagnostic, not an input to the method.
    """
    import scipy.sparse.linalg as sla

    union = assembly.union_mesh()
    ng = union.nodes.shape[0]
    rows, cols, kvals, mvals = [], [], [], []
    for cache in assembly.caches:
        gmap = union.node_maps[cache.elem]
        rr, cc = np.meshgrid(gmap, gmap, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        kvals.append(cache.stiffness.ravel())
        mvals.append(cache.mass.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    k_gl = sp.csr_matrix((np.concatenate(kvals), (rows, cols)), shape=(ng, ng))
    m_gl = sp.csr_matrix((np.concatenate(mvals), (rows, cols)), shape=(ng, ng))
    free = np.setdiff1d(np.arange(ng), union.boundary)
    k_ff = k_gl[np.ix_(free, free)].tocsc()
    m_ff = m_gl[np.ix_(free, free)].tocsc()
    v0 = np.ones(free.size)
    lam = sla.eigsh(k_ff, k=1, M=m_ff, sigma=0.0, which="LM", v0=v0,
                    return_eigenvectors=False)
    return float(1.0 / np.sqrt(lam[0]))


def j_guidance(alpha_effective: float, dim: int = 2) -> list[dict]:
    """Heuristic layer counts per target reduction of the truncation error.

    Uses the qualitative per-layer factor q = d^2 a / (1 + d^2 a) with the
    effective threshold in place of the unquantifiable worst-case product;
    the absolute constants are unknown, so this is guidance for choosing
    the layer count, never solver logic.
    """
    q = dim**2 * alpha_effective / (1.0 + dim**2 * alpha_effective)
    out = []
    for target in (1e-1, 1e-2, 1e-4, 1e-6):
        j = int(np.ceil(np.log(target) / np.log(q))) if q < 1.0 else None
        out.append({"target_factor": target, "suggested_j": j})
    return out


def conforming_solve(
    assembly: Assembly, g: list[np.ndarray]
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Conforming P1 solve on the union fine mesh with zero boundary values.

    Approximates the continuous solution; its discretization error is the
    one caveat when it serves as the reference for target-precision
    calibration.  Returns union nodal values and the broken per-element view.
    """
    union = assembly.union_mesh()
    ng = union.nodes.shape[0]
    rows, cols, vals = [], [], []
    rhs = np.zeros(ng)
    for cache in assembly.caches:
        gmap = union.node_maps[cache.elem]
        rr, cc = np.meshgrid(gmap, gmap, indexing="ij")
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(cache.stiffness.ravel())
        np.add.at(rhs, gmap, cache.mass @ g[cache.elem])
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(ng, ng)
    ).tolil()
    for b in union.boundary:
        mat.rows[b] = [b]
        mat.data[b] = [1.0]
        rhs[b] = 0.0
    # Keep symmetry irrelevant for splu; Dirichlet rows replaced, columns left.
    lu = spla.splu(mat.tocsc())
    u = lu.solve(rhs)
    broken = [u[union.node_maps[t]] for t in range(len(assembly.caches))]
    return u, broken


# ---------------------------------------------------------------------------
# Full pipeline with report.
# ---------------------------------------------------------------------------


def full_pipeline(
    cfg: SolverConfig,
    g_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    assembly: Assembly | None = None,
) -> tuple[Solution, dict]:
    """Run every stage and emit a JSON-able report of all diagnostics."""
    cfg.validate()
    timings: dict[str, float] = {}

    def timed(stage: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, exc) from exc
        timings[stage] = time.perf_counter() - t0
        return out

    if assembly is None:
        t0 = time.perf_counter()
        assembly = build_assembly(cfg)
        timings["assembly"] = time.perf_counter() - t0

    if g_fn is None:
        g_fn = presets.load_function(cfg.rhs, cfg.rhs_params)
    g = timed("rhs", sample_load, assembly.part, g_fn)

    solution = timed(
        "solve",
        solve_lsd,
        assembly,
        g,
        cfg.j,
        cfg.variant,
        cfg.alpha_stab,
        cfg.rhs_reduction,
        cfg.h_target,
        cfg.c_j,
        cfg.equilibrium_tol,
    )

    report: dict = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "dimensions": {
            "elements": assembly.mesh.n_elements,
            "saturation_radius": saturation_radius(assembly.mesh),
            "coarse_faces": assembly.mesh.n_faces,
            "fine_faces": assembly.space.n_fine,
            "tilde0_dim": assembly.space.dim_tilde0,
            "tilde_f_dim": assembly.space.dim_tilde_f,
            "coarse_dim": solution.diagnostics["coarse_dim"],
        },
        "contrast": assembly.stats.as_dict(),
        "diagnostics": dict(solution.diagnostics),
    }
    if cfg.variant == "delta":
        spectra = assembly.face_spectra(cfg.alpha_stab)
        alphas = np.concatenate([s.alphas for s in spectra if not s.empty]) if spectra else np.zeros(0)
        report["face_spectrum"] = {
            "alpha_min": float(alphas.min()) if alphas.size else None,
            "alpha_max": float(alphas.max()) if alphas.size else None,
            "n_pi_total": int(sum(s.n_pi for s in spectra)),
            "n_delta_total": int(sum(s.n_delta for s in spectra)),
        }
        alpha_eff = cfg.alpha_stab
    else:
        alpha_eff = min(assembly.stats.beta**2 * assembly.stats.kappa, 1e6)
    report["j_guidance"] = j_guidance(alpha_eff)

    if cfg.compare_exact:
        u_ref, lam_ref = timed("oracle_exact", exact_hybrid_solve, assembly, g)
        err = energy_error(assembly.caches, u_ref, solution.u_broken)
        ref = broken_energy(assembly.caches, u_ref) ** 0.5
        report["oracle_exact"] = {
            "energy_error": err,
            "reference_energy": ref,
            "relative": err / ref if ref > 0 else 0.0,
        }
    if cfg.compare_conforming:
        _, u_conf = timed("oracle_conforming", conforming_solve, assembly, g)
        err = energy_error(assembly.caches, u_conf, solution.u_broken)
        gn = solution.diagnostics["load_norm"]
        report["oracle_conforming"] = {
            "energy_error": err,
            "error_per_load": err / gn if gn > 0 else 0.0,
            "global_poincare_estimate": timed("poincare", poincare_estimate, assembly),
        }
    report["timings"] = timings
    return solution, report
