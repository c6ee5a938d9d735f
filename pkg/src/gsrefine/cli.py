"""Command-line interface.

Subcommands: decompose, refine, refine-seq, synth, eval, check. Defaults
come from a key=value config file when --config is given; explicit flags
override file values; unknown keys are hard errors. All outputs are written
atomically (temp file + rename) and every report header echoes the fully
resolved configuration, so a run can be reproduced from its report alone.

Exit codes: 0 success, 1 input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import io
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import scene_io, solver, synth_bench
from .energy import EnergyParams
from .errors import ConfigError, GsRefineError, NumericalError
from .image_model import QuadTreeParams, decompose_image, dump_gaussians, patch_overlay
from .solver import SolverConfig
from .surface_model import compute_normals, subdivide


@dataclass(frozen=True)
class RunConfig:
    """Merged view of energy, solver, and pipeline settings."""

    wreg: float = 1.0
    delta_color: float = 0.05
    delta_geo: float = 2.0
    cull_factor: float = 3.0
    circular_hue: bool = True
    sigma_hat: float = 7.0
    subdiv: int = 1
    bias: bool = True
    quadtree_depth: int = 8
    split_threshold: float = 0.04
    min_patch_side: int = 2
    initial_step: float = 0.1
    grow: float = 1.2
    shrink: float = 0.5
    step_min: float = 1e-4
    step_max: float = 5.0
    max_iters: int = 200
    convergence_eps: float = 1e-6
    visibility_refresh: int = 10
    reference_frame: int = 0
    mask: str = ""
    threads: int = 1

    def energy_params(self) -> EnergyParams:
        return EnergyParams(
            w_reg=self.wreg,
            delta_color=self.delta_color,
            delta_geo=self.delta_geo,
            cull_factor=self.cull_factor,
            circular_hue=self.circular_hue,
        )

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            initial_step=self.initial_step,
            grow=self.grow,
            shrink=self.shrink,
            step_min=self.step_min,
            step_max=self.step_max,
            max_iters=self.max_iters,
            convergence_eps=self.convergence_eps,
            visibility_refresh=self.visibility_refresh,
        )

    def quad_params(self) -> QuadTreeParams:
        return QuadTreeParams(
            max_depth=self.quadtree_depth,
            split_threshold=self.split_threshold,
            min_patch_side=self.min_patch_side,
        )

    def header_lines(self):
        return [f"# {f.name}={getattr(self, f.name)}" for f in fields(self)]


_BOOL_KEYS = {"circular_hue", "bias"}
_INT_KEYS = {
    "subdiv",
    "quadtree_depth",
    "min_patch_side",
    "max_iters",
    "visibility_refresh",
    "reference_frame",
    "threads",
}
_STR_KEYS = {"mask"}


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig from an optional file plus flag overrides."""
    cfg = RunConfig()
    if path:
        cfg = _apply_settings(cfg, _parse_config_file(path), source=path)
    if overrides:
        cfg = _apply_settings(cfg, overrides, source="flags")
    return cfg


def _parse_config_file(path: str) -> dict:
    settings = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            settings[key.strip()] = value.strip()
    return settings


def _apply_settings(cfg: RunConfig, settings: dict, source: str) -> RunConfig:
    valid = {f.name for f in fields(RunConfig)}
    parsed = {}
    for key, value in settings.items():
        if key not in valid:
            raise ConfigError(f"{source}: unknown configuration key {key!r}")
        if isinstance(value, str):
            if key in _BOOL_KEYS:
                low = value.lower()
                if low in ("1", "true", "yes", "on"):
                    value = True
                elif low in ("0", "false", "no", "off"):
                    value = False
                else:
                    raise ConfigError(f"{source}: bad boolean for {key}: {value!r}")
            elif key in _INT_KEYS:
                try:
                    value = int(value)
                except ValueError:
                    raise ConfigError(f"{source}: bad integer for {key}: {value!r}")
            elif key not in _STR_KEYS:
                try:
                    value = float(value)
                except ValueError:
                    raise ConfigError(f"{source}: bad number for {key}: {value!r}")
        parsed[key] = value
    return replace(cfg, **parsed)


def _common_refine_flags(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--wreg", type=float, help="smoothness weight")
    p.add_argument("--sigma-hat", type=float, dest="sigma_hat", help="surface Gaussian std (mm)")
    p.add_argument("--subdiv", type=int, help="subdivision levels")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--no-bias", action="store_true", help="skip the export-time normal offset")
    p.add_argument("--mask", help="region mask file (one refinable vertex index per line)")
    p.add_argument("--energy-dump", help="per-iteration energy CSV")
    p.add_argument("--report", help="summary report CSV")
    p.add_argument("--displacements", help="per-vertex displacement CSV (vertex_id,k_mm)")
    p.add_argument("--threads", type=int, help="worker cap for per-camera stages (0 = auto)")


def _overrides_from_args(args) -> dict:
    out = {}
    for flag, key in (
        ("wreg", "wreg"),
        ("sigma_hat", "sigma_hat"),
        ("subdiv", "subdiv"),
        ("max_iters", "max_iters"),
        ("threads", "threads"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = val
    if getattr(args, "no_bias", False):
        out["bias"] = False
    if getattr(args, "mask", None):
        out["mask"] = args.mask
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsrefine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="quad-tree image Gaussians for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output text file")
    p.add_argument("--cam-id", type=int, default=0)
    p.add_argument("--overlay", help="optional diagnostic PNG with patch boundaries")
    p.add_argument("--max-depth", type=int, default=8)
    p.add_argument("--split-threshold", type=float, default=0.04)
    p.add_argument("--min-side", type=int, default=2)

    p = sub.add_parser("refine", help="refine a single frame")
    p.add_argument("--mesh", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--images", nargs="+", required=True, help="one image per camera, camera order")
    p.add_argument("--out", required=True, help="refined OBJ path")
    _common_refine_flags(p)

    p = sub.add_parser("refine-seq", help="refine a whole manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _common_refine_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic benchmark scene")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", choices=["plane-wave", "sphere-bumps"], default="plane-wave")
    p.add_argument("--cams", type=int, default=8)
    p.add_argument("--res", type=int, default=512)
    p.add_argument("--amplitude", type=float, default=10.0)
    p.add_argument("--freq", type=float, default=None, help="cycles per mm")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture", choices=["waves", "checker", "plain"], default="waves")

    p = sub.add_parser("eval", help="reprojection / displacement metrics for a refined mesh")
    p.add_argument("--scene", required=True, help="scene directory produced by synth")
    p.add_argument("--refined", required=True, help="refined OBJ")
    p.add_argument("--out", help="metric CSV (default: stdout)")
    p.add_argument("--subdiv", type=int, default=None, help="subdivision used at refine time (default: infer)")

    p = sub.add_parser("check", help="run the oracle self-check suites")
    p.add_argument("--quick", action="store_true", help="smaller sample counts")
    p.add_argument("--seed", type=int, default=0)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, scene_io.ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except GsRefineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    return {
        "decompose": _cmd_decompose,
        "refine": _cmd_refine,
        "refine-seq": _cmd_refine_seq,
        "synth": _cmd_synth,
        "eval": _cmd_eval,
        "check": _cmd_check,
    }[args.command](args)


def _cmd_decompose(args) -> int:
    image = scene_io.load_image(args.image)
    params = QuadTreeParams(
        max_depth=args.max_depth,
        split_threshold=args.split_threshold,
        min_patch_side=args.min_side,
    )
    gaussians = decompose_image(image, params, cam_id=args.cam_id)
    buf = io.StringIO()
    dump_gaussians(gaussians, buf)
    scene_io.atomic_write_text(args.out, buf.getvalue())
    if args.overlay:
        scene_io.save_image(patch_overlay(image, gaussians), args.overlay)
    print(f"{len(gaussians)} image Gaussians -> {args.out}")
    return 0


def _load_frame_inputs(args):
    mesh = scene_io.load_mesh(args.mesh)
    cams = scene_io.load_cameras(args.cameras)
    if len(args.images) != len(cams):
        raise GsRefineError(f"{len(args.images)} images given for {len(cams)} cameras")
    images = [scene_io.load_image(p) for p in args.images]
    return mesh, cams, images


def _cmd_refine(args) -> int:
    cfg = load_config(args.config, _overrides_from_args(args))
    mesh, cams, images = _load_frame_inputs(args)
    if cfg.mask:
        mesh = scene_io.Mesh(
            mesh.vertices.copy(), mesh.faces.copy(), scene_io.load_region_mask(cfg.mask, mesh.n_vertices)
        )
    refined, report, scene = solver.refine_frame(
        mesh,
        images,
        cams,
        cfg.energy_params(),
        cfg.solver_config(),
        subdiv_levels=cfg.subdiv,
        sigma_hat=cfg.sigma_hat,
        quad_params=cfg.quad_params(),
        bias=cfg.bias,
        threads=cfg.threads,
    )
    scene_io.save_mesh(refined, args.out)
    if args.displacements:
        _write_displacements(args.displacements, scene.gaussians, cfg)
    if args.energy_dump:
        _write_energy_dump(args.energy_dump, [(0, report)], cfg)
    if args.report:
        _write_report(args.report, [(0, report)], cfg)
    print(
        f"frame refined: {report.iterations} iters, "
        f"E {report.e_initial:.6f} -> {report.e_final:.6f}, max|k| {report.max_abs_k:.3f} mm"
    )
    return 0


def _cmd_refine_seq(args) -> int:
    cfg = load_config(args.config, _overrides_from_args(args))
    manifest = scene_io.load_manifest(args.manifest)
    if cfg.reference_frame:
        manifest = scene_io.SequenceManifest(
            camera_path=manifest.camera_path,
            reference_frame=cfg.reference_frame,
            frames=manifest.frames,
        )
    os.makedirs(args.out_dir, exist_ok=True)
    results = []
    for fi, refined, report, scene in solver.refine_sequence(
        manifest,
        cfg.energy_params(),
        cfg.solver_config(),
        subdiv_levels=cfg.subdiv,
        sigma_hat=cfg.sigma_hat,
        quad_params=cfg.quad_params(),
        bias=cfg.bias,
        threads=cfg.threads,
    ):
        scene_io.save_mesh(refined, os.path.join(args.out_dir, f"frame{fi:04d}.obj"))
        _write_displacements(os.path.join(args.out_dir, f"frame{fi:04d}_k.csv"), scene.gaussians, cfg)
        results.append((fi, report))
        print(
            f"frame {fi}: {report.iterations} iters, "
            f"E {report.e_initial:.6f} -> {report.e_final:.6f}, max|k| {report.max_abs_k:.3f} mm"
        )
    if args.energy_dump:
        _write_energy_dump(args.energy_dump, results, cfg)
    report_path = args.report or os.path.join(args.out_dir, "report.csv")
    _write_report(report_path, results, cfg)
    return 0


def _write_report(path, results, cfg) -> None:
    lines = cfg.header_lines() + ["frame,iters,E0,Ef,max_k_mm,seconds"]
    for fi, rep in results:
        lines.append(
            f"{fi},{rep.iterations},{rep.e_initial!r},{rep.e_final!r},{rep.max_abs_k!r},{rep.seconds:.3f}"
        )
    scene_io.atomic_write_text(path, "\n".join(lines) + "\n")


def _write_energy_dump(path, results, cfg) -> None:
    lines = cfg.header_lines() + ["iter,E_total,E_sim,E_reg,saturated,pairs"]
    for fi, rep in results:
        if len(results) > 1:
            lines.append(f"# frame {fi}")
        for it, er in enumerate(rep.trace):
            lines.append(f"{it},{er.e_total!r},{er.e_sim!r},{er.e_reg!r},{er.saturated},{er.pairs_evaluated}")
    scene_io.atomic_write_text(path, "\n".join(lines) + "\n")


def _write_displacements(path, gaussians, cfg) -> None:
    lines = cfg.header_lines() + ["vertex_id,k_mm"]
    for vid, k in zip(gaussians.vertex_ids, gaussians.k):
        lines.append(f"{int(vid)},{float(k)!r}")
    scene_io.atomic_write_text(path, "\n".join(lines) + "\n")


def _cmd_synth(args) -> int:
    scene = synth_bench.make_scene(
        args.kind,
        n_cameras=args.cams,
        resolution=(args.res, args.res),
        amplitude_mm=args.amplitude,
        frequency=args.freq,
        texture=synth_bench.ProceduralTexture(args.texture, seed=args.seed),
        seed=args.seed,
    )
    manifest = synth_bench.save_scene(scene, args.out, n_frames=args.frames)
    print(f"scene written to {args.out} ({len(scene.cams)} cameras); manifest: {manifest}")
    return 0


def _cmd_eval(args) -> int:
    scene_dir = args.scene
    manifest = scene_io.load_manifest(os.path.join(scene_dir, "manifest.txt"))
    cams = scene_io.load_cameras(manifest.camera_path)
    coarse = scene_io.load_mesh(manifest.frames[0][0])
    mask_path = os.path.join(scene_dir, "mask.txt")
    if os.path.exists(mask_path):
        coarse = scene_io.Mesh(
            coarse.vertices.copy(), coarse.faces.copy(), scene_io.load_region_mask(mask_path, coarse.n_vertices)
        )
    refined = scene_io.load_mesh(args.refined)
    images = [scene_io.load_image(p) for p in manifest.frames[manifest.reference_frame][1]]

    subdiv_levels = args.subdiv
    fine = coarse
    levels = 0
    while fine.n_vertices != refined.n_vertices and levels < 4:
        fine = subdivide(fine, 1)
        levels += 1
    if fine.n_vertices != refined.n_vertices:
        raise GsRefineError(
            f"refined mesh has {refined.n_vertices} vertices; cannot match any subdivision of the coarse mesh"
        )
    if subdiv_levels is not None and subdiv_levels != levels:
        raise GsRefineError(f"--subdiv {subdiv_levels} inconsistent with inferred level {levels}")

    normals = compute_normals(fine)
    vertex_colors, have = _reference_vertex_colors(fine, normals, images, cams)
    refined_mesh = scene_io.Mesh(refined.vertices.copy(), fine.faces.copy(), fine.refinable.copy())
    metric = synth_bench.reprojection_error(
        refined_mesh, synth_bench.propagate_vertex_colors(fine, vertex_colors, have), images, cams
    )

    lines = ["camera,mean_abs_hsv_err"]
    for ci, err in enumerate(metric.per_camera):
        lines.append(f"{ci},{float(err)!r}")
    lines.append(f"overall,{metric.overall!r}")

    k_true_path = os.path.join(scene_dir, "k_true.csv")
    if os.path.exists(k_true_path):
        k_true = synth_bench.load_k_true(k_true_path)
        disp = refined.vertices[: coarse.n_vertices] - coarse.vertices
        n0 = normals[: coarse.n_vertices]
        k_meas = np.einsum("ij,ij->i", disp, n0)
        rmse = synth_bench.displacement_rmse(k_meas, k_true, coarse.refinable)
        lines.append(f"k_rmse_mm,{rmse!r}")

    text = "\n".join(lines) + "\n"
    if args.out:
        scene_io.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def _reference_vertex_colors(fine, normals, images, cams):
    from .surface_model import assign_colors, build_surface_gaussians, visibility_for_mesh

    gaussians = build_surface_gaussians(fine, normals)
    vis = visibility_for_mesh(fine, normals, cams)
    assign_colors(gaussians, images, cams, vis)
    colors = np.zeros((fine.n_vertices, 3))
    have = np.zeros(fine.n_vertices, dtype=bool)
    seen = ~np.isnan(gaussians.eta[:, 0])
    colors[gaussians.vertex_ids[seen]] = gaussians.eta[seen]
    have[gaussians.vertex_ids[seen]] = True
    return colors, have


def _cmd_check(args) -> int:
    from . import checks

    results = checks.run_all(quick=args.quick, seed=args.seed)
    failed = 0
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} check(s) failed", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
