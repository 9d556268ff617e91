"""Multiscale hybrid finite element solver with localized spectral decomposition.

Solves -div(A grad u) = f on 2D polygonal domains with heterogeneous,
possibly high-contrast coefficients.  The solver works on a primal hybrid
formulation: inter-element continuity is enforced by flux multipliers on
a refined skeleton, the multiplier space is split into coarse and fine
blocks, and the fine block is computed by exponentially convergent local
patch problems, optionally enriched by face eigenmodes so the decay does
not degrade with the coefficient contrast.
"""

from .coeff import CoefficientField, ContrastStats, Raster, WeightField, local_bounds, make_weight
from .localize import PatchProjector, RingProfile, build_flux_energy, ring_energies
from .localop import ElementCache, apply_T, apply_Ttilde, assemble_all, assemble_element
from .mesh import (
    CoarseMesh,
    ElementSet,
    FinePartition,
    build_structured_mesh,
    element_layers,
    load_mesh,
    refine_faces,
    save_mesh,
    saturation_depth,
    saturation_radius,
)
from .pipeline import (
    Assembly,
    SolverConfig,
    Solution,
    build_assembly,
    conforming_solve,
    exact_hybrid_solve,
    full_pipeline,
    sample_load,
    solve_lsd,
)
from .spectral import ElementSpectrum, FaceSpectrum, element_spectrum, face_spectrum, gensym_eig
from .traces import PiecewiseConstant, TraceSpace, TraceVector, build_trace_space, decompose

__version__ = "0.1.0"

__all__ = [
    "CoarseMesh",
    "FinePartition",
    "ElementSet",
    "build_structured_mesh",
    "refine_faces",
    "element_layers",
    "saturation_depth",
    "saturation_radius",
    "load_mesh",
    "save_mesh",
    "CoefficientField",
    "WeightField",
    "ContrastStats",
    "Raster",
    "local_bounds",
    "make_weight",
    "TraceSpace",
    "TraceVector",
    "PiecewiseConstant",
    "build_trace_space",
    "decompose",
    "ElementCache",
    "assemble_element",
    "assemble_all",
    "apply_T",
    "apply_Ttilde",
    "gensym_eig",
    "FaceSpectrum",
    "ElementSpectrum",
    "face_spectrum",
    "element_spectrum",
    "PatchProjector",
    "RingProfile",
    "build_flux_energy",
    "ring_energies",
    "SolverConfig",
    "Solution",
    "Assembly",
    "build_assembly",
    "solve_lsd",
    "full_pipeline",
    "exact_hybrid_solve",
    "conforming_solve",
    "sample_load",
    "__version__",
]
