"""Batch front end: run solves and parameter studies, emit CSV/JSON.

One experiment per invocation.  All output is plot-ready CSV plus a JSON
summary; there is no plotting dependency.  Sequential runs are bitwise
reproducible for a fixed (spec, seed); ``--threads`` only parallelizes
per-element and per-face work inside the modules, which is deterministic
by contract.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import presets
from .localize import ring_energies
from .pipeline import (
    Assembly,
    PipelineError,
    SolverConfig,
    build_assembly,
    broken_energy,
    conforming_solve,
    energy_error,
    exact_hybrid_solve,
    full_pipeline,
    load_norm,
    sample_load,
    solve_lsd,
)
from .spectral import project_rhs
from .traces import element_boundary_functional

EXPERIMENT_KINDS = ("solve", "decay", "j_sweep", "contrast_sweep", "h_convergence", "rhs_reduction")
ENV_PREFIX = "LSDFEM_"


@dataclass
class ExperimentSpec:
    """Parsed experiment description: kind, base config, sweeps, output."""

    kind: str
    config: SolverConfig
    sweep: dict = field(default_factory=dict)
    out_dir: str = "lsdfem-out"
    seed: int = 0

    @classmethod
    def from_file(cls, path: str) -> "ExperimentSpec":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        kind = data.get("experiment", "solve")
        if kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {kind!r}")
        cfg = SolverConfig.from_dict(data.get("config", {}))
        return cls(
            kind=kind,
            config=cfg,
            sweep=data.get("sweep", {}),
            out_dir=data.get("out", "lsdfem-out"),
            seed=int(data.get("seed", 0)),
        )


def _write_csv(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _center_element(assembly: Assembly) -> int:
    mesh = assembly.mesh
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    return int(np.argmin(np.linalg.norm(mesh.centroids - center, axis=1)))


def _seed_profile(assembly: Assembly, variant: str, alpha_stab: float, elem: int, rng):
    """Ring profile of the projected potential of a one-element source."""
    geom = assembly.part.geometry[elem]
    if rng is None:
        v = geom.nodes[:, 0].copy()     # linear probe varies along every face
    else:
        v = rng.standard_normal(geom.n_nodes)
    r = element_boundary_functional(assembly.space, elem, v)
    projector = assembly.projector(variant, alpha_stab)
    mu = projector.project_functional(r)
    return ring_energies(assembly.mesh, assembly.caches, mu, ("element", elem))


def run_solve(spec: ExperimentSpec) -> dict:
    assembly = build_assembly(spec.config)
    solution, report = full_pipeline(spec.config, assembly=assembly)
    out = spec.out_dir
    _write_json(os.path.join(out, "report.json"), report)
    solution.lam_total.to_binary(os.path.join(out, "multiplier.bin"))
    rows = [
        {
            "element": t,
            "u_constant": float(solution.u0.values[t]),
            "u_min": float(u_t.min()),
            "u_max": float(u_t.max()),
            "flux_max": float(np.abs(solution.sigma[t]).max()),
            "config_hash": report["config_hash"],
        }
        for t, u_t in enumerate(solution.u_broken)
    ]
    _write_csv(os.path.join(out, "solution_summary.csv"), rows)
    nodal = [
        {"element": t, "node": i, "x": float(x), "y": float(y), "u": float(u)}
        for t, u_t in enumerate(solution.u_broken)
        for i, ((x, y), u) in enumerate(zip(assembly.part.geometry[t].nodes, u_t))
    ]
    _write_csv(os.path.join(out, "solution_nodal.csv"), nodal)
    flux = [
        {
            "element": t,
            "cell": c,
            "x": float(xc),
            "y": float(yc),
            "sigma_x": float(s[0]),
            "sigma_y": float(s[1]),
        }
        for t, sig in enumerate(solution.sigma)
        for c, (s, (xc, yc)) in enumerate(zip(sig, assembly.part.geometry[t].cell_centroids))
    ]
    _write_csv(os.path.join(out, "flux_cells.csv"), flux)
    return report


def run_decay(spec: ExperimentSpec) -> dict:
    cfg = spec.config
    assembly = build_assembly(cfg)
    elem = int(spec.sweep.get("seed_element", _center_element(assembly)))
    rng = np.random.default_rng(spec.seed) if spec.sweep.get("random_probe") else None
    rows = []
    summary = {}
    variants = ["plain"] if cfg.variant == "plain" else ["plain", "delta"]
    for variant in variants:
        profile = _seed_profile(assembly, variant, cfg.alpha_stab, elem, rng)
        cum = profile.cumulative_fraction()
        for r, (e, c) in enumerate(zip(profile.energies, cum)):
            rows.append(
                {
                    "variant": variant,
                    "seed_element": elem,
                    "ring": r,
                    "energy": e,
                    "cumulative_fraction": c,
                    "config_hash": cfg.digest(),
                }
            )
        summary[variant] = {
            "ratio": profile.ratio,
            "worst_step": profile.worst_step,
            "total": profile.total,
        }
    _write_csv(os.path.join(spec.out_dir, "decay.csv"), rows)
    payload = {"config_hash": cfg.digest(), "seed_element": elem, "fit": summary}
    _write_json(os.path.join(spec.out_dir, "decay.json"), payload)
    return payload


def run_j_sweep(spec: ExperimentSpec) -> dict:
    cfg = spec.config
    assembly = build_assembly(cfg)
    g = sample_load(assembly.part, presets.load_function(cfg.rhs, cfg.rhs_params))
    reference = solve_lsd(assembly, g, None, cfg.variant, cfg.alpha_stab)
    ref_energy = broken_energy(assembly.caches, reference.u_broken) ** 0.5
    js = [int(j) for j in spec.sweep.get("j", [1, 2, 3])]
    rows = []
    for j in js:
        sol = solve_lsd(assembly, g, j, cfg.variant, cfg.alpha_stab)
        err = energy_error(assembly.caches, reference.u_broken, sol.u_broken)
        rows.append(
            {
                "j": j,
                "energy_error": err,
                "relative_error": err / ref_energy if ref_energy else 0.0,
                "equilibrium_rel_max": sol.diagnostics["equilibrium_rel_max"],
                "oracle": "global_projection_reference",
                "config_hash": cfg.digest(),
            }
        )
    _write_csv(os.path.join(spec.out_dir, "j_sweep.csv"), rows)
    payload = {"rows": rows, "config_hash": cfg.digest()}
    _write_json(os.path.join(spec.out_dir, "j_sweep.json"), payload)
    return payload


def run_contrast_sweep(spec: ExperimentSpec) -> dict:
    cfg = spec.config
    contrasts = [float(c) for c in spec.sweep.get("contrasts", [1e2, 1e4, 1e6])]
    rows = []
    for contrast in contrasts:
        sub = SolverConfig.from_dict(
            {
                **cfg.to_dict(),
                "coefficient": "channel",
                "coefficient_params": {**cfg.coefficient_params, "contrast": contrast},
            }
        )
        assembly = build_assembly(sub)
        elem = int(spec.sweep.get("seed_element", _channel_seed(assembly, sub)))
        for variant in ("plain", "delta"):
            profile = _seed_profile(assembly, variant, cfg.alpha_stab, elem, None)
            rows.append(
                {
                    "contrast": contrast,
                    "variant": variant,
                    "decay_ratio": profile.ratio,
                    "worst_step": profile.worst_step,
                    "tail_after_ring4": profile.tail_fraction(4),
                    "seed_element": elem,
                    "oracle": "ring_energies_of_projected_seed_potential",
                    "config_hash": sub.digest(),
                }
            )
    _write_csv(os.path.join(spec.out_dir, "contrast_sweep.csv"), rows)
    payload = {"rows": rows}
    _write_json(os.path.join(spec.out_dir, "contrast_sweep.json"), payload)
    return payload


def _channel_seed(assembly: Assembly, cfg: SolverConfig) -> int:
    """Element inside the channel nearest the domain's left edge."""
    center = float(cfg.coefficient_params.get("center", 0.5))
    lo = assembly.mesh.vertices.min(axis=0)
    target = np.array([lo[0], center])
    return int(np.argmin(np.linalg.norm(assembly.mesh.centroids - target, axis=1)))


def run_h_convergence(spec: ExperimentSpec) -> dict:
    cfg = spec.config
    sizes = [int(n) for n in spec.sweep.get("nx", [2, 4, 8])]
    rows = []
    prev = None
    for n in sizes:
        sub = SolverConfig.from_dict({**cfg.to_dict(), "nx": n, "ny": n})
        assembly = build_assembly(sub)
        g = sample_load(assembly.part, presets.load_function(sub.rhs, sub.rhs_params))
        sol = solve_lsd(assembly, g, sub.j, sub.variant, sub.alpha_stab)
        _, u_conf = conforming_solve(assembly, g)
        err = energy_error(assembly.caches, u_conf, sol.u_broken)
        gn = load_norm(assembly.caches, g)
        h_coarse = assembly.mesh.coarse_size
        rate = None
        if prev is not None and err > 0 and prev[1] > 0:
            rate = float(np.log(prev[1] / err) / np.log(prev[0] / h_coarse))
        rows.append(
            {
                "nx": n,
                "H": h_coarse,
                "energy_error": err,
                "error_per_load": err / gn if gn else 0.0,
                "rate": "" if rate is None else rate,
                "oracle": "conforming_union_mesh",
                "config_hash": sub.digest(),
            }
        )
        prev = (h_coarse, err)
    _write_csv(os.path.join(spec.out_dir, "h_convergence.csv"), rows)
    payload = {"rows": rows}
    _write_json(os.path.join(spec.out_dir, "h_convergence.json"), payload)
    return payload


def run_rhs_reduction(spec: ExperimentSpec) -> dict:
    cfg = spec.config
    assembly = build_assembly(cfg)
    g = sample_load(assembly.part, presets.load_function(cfg.rhs, cfg.rhs_params))
    u_full, _ = exact_hybrid_solve(assembly, g)
    targets = spec.sweep.get("h_target")
    if targets is None:
        h_coarse = assembly.mesh.coarse_size
        targets = [h_coarse, 0.5 * h_coarse]
    rows = []
    for h_target in [float(t) for t in targets]:
        spectra = assembly.element_spectra(h_target, cfg.c_j)
        g_proj, dropped = project_rhs(spectra, assembly.caches, g)
        u_red, _ = exact_hybrid_solve(assembly, g_proj)
        err = energy_error(assembly.caches, u_full, u_red)
        sig_next = np.array(
            [s.sigma[s.j_count] if s.j_count < len(s.sigma) else np.inf for s in spectra]
        )
        bound = float(np.max(1.0 / np.sqrt(sig_next))) * load_norm(assembly.caches, g)
        rows.append(
            {
                "h_target": h_target,
                "energy_error": err,
                "bound": bound,
                "bound_satisfied": err <= bound * (1 + 1e-9),
                "mean_modes_kept": float(np.mean([s.j_count for s in spectra])),
                "dropped_load_norm": float(np.linalg.norm(dropped)),
                "oracle": "exact_hybrid",
                "config_hash": cfg.digest(),
            }
        )
    _write_csv(os.path.join(spec.out_dir, "rhs_reduction.csv"), rows)
    payload = {"rows": rows}
    _write_json(os.path.join(spec.out_dir, "rhs_reduction.json"), payload)
    return payload


RUNNERS = {
    "solve": run_solve,
    "decay": run_decay,
    "j_sweep": run_j_sweep,
    "contrast_sweep": run_contrast_sweep,
    "h_convergence": run_h_convergence,
    "rhs_reduction": run_rhs_reduction,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsdfem",
        description="Multiscale hybrid solver batch runner (CSV/JSON output).",
        epilog=(
            "Flags can also be set through the environment with the "
            f"{ENV_PREFIX} prefix (e.g. {ENV_PREFIX}THREADS, {ENV_PREFIX}OUT)."
        ),
    )
    parser.add_argument("--config", required=False, help="experiment JSON file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (1 = deterministic reference)")
    parser.add_argument("--seed", type=int, default=None, help="seed for randomized test vectors")
    parser.add_argument("--experiment", choices=EXPERIMENT_KINDS, default=None)
    parser.add_argument("--list-presets", action="store_true", help="print bundled scenarios and exit")
    return parser


def _env_override(name: str, current):
    raw = os.environ.get(ENV_PREFIX + name.upper())
    return raw if raw is not None and current is None else current


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_presets:
        json.dump(presets.describe(), sys.stdout, indent=1)
        print()
        return 0
    config_path = _env_override("config", args.config)
    if config_path is None:
        parser.error("--config is required (or set " + ENV_PREFIX + "CONFIG)")
    try:
        spec = ExperimentSpec.from_file(config_path)
    except json.JSONDecodeError as exc:
        print(f"config parse error at line {exc.lineno}, col {exc.colno}: {exc.msg}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.experiment or _env_override("experiment", args.experiment):
        spec.kind = args.experiment or os.environ[ENV_PREFIX + "EXPERIMENT"]
    out = args.out or os.environ.get(ENV_PREFIX + "OUT")
    if out:
        spec.out_dir = out
    seed = args.seed if args.seed is not None else os.environ.get(ENV_PREFIX + "SEED")
    if seed is not None:
        spec.seed = int(seed)
    threads = args.threads if args.threads is not None else os.environ.get(ENV_PREFIX + "THREADS")
    if threads is not None:
        spec.config.threads = int(threads)

    os.makedirs(spec.out_dir, exist_ok=True)
    try:
        RUNNERS[spec.kind](spec)
    except (AssertionError, PipelineError) as exc:
        stage = getattr(exc, "stage", "numerical-check")
        print(f"numerical assertion failed [{stage}]: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
