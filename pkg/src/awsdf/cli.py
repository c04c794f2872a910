"""Command-line entry point: synth / run / eval / mesh / slice.

Every RunConfig field is exposed both as a CLI flag and as a key in an
optional YAML config file; explicit flags win over the file, the file wins
over defaults.  Exit codes: 0 success, 1 runtime error, 2 usage/input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import inspect
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import dataio, export_eval
from .dataio import SequenceError
from .export_eval import PlanarMap
from .model import load_checkpoint, save_checkpoint
from .trainer import Engine

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_ENGINE_DEFAULTS = {
    name: p.default
    for name, p in inspect.signature(Engine.__init__).parameters.items()
    if p.default is not inspect.Parameter.empty
}


class UsageError(Exception):
    """Bad flags or unusable input; maps to exit code 2."""


@dataclass
class RunConfig:
    """Flat run configuration; single source of CLI flags and file keys.

    Engine hyperparameters default to the Engine signature so the CLI can
    never drift from the library defaults.
    """

    seed: int = _ENGINE_DEFAULTS["seed"]
    hidden: int = _ENGINE_DEFAULTS["hidden"]
    n_hidden: int = _ENGINE_DEFAULTS["n_hidden"]
    lr: float = _ENGINE_DEFAULTS["lr"]
    weight_decay: float = _ENGINE_DEFAULTS["weight_decay"]
    n_pixels: int = _ENGINE_DEFAULTS["n_pixels"]
    surfel_share: float = _ENGINE_DEFAULTS["surfel_share"]
    window: int = _ENGINE_DEFAULTS["window"]
    iters_per_frame: int = _ENGINE_DEFAULTS["iters_per_frame"]
    kf_check_every: int = _ENGINE_DEFAULTS["kf_check_every"]
    kf_tol: float = _ENGINE_DEFAULTS["kf_tol"]
    kf_frac: float = _ENGINE_DEFAULTS["kf_frac"]
    surfel_min_inliers: int = _ENGINE_DEFAULTS["surfel_min_inliers"]
    surfel_candidates: int = _ENGINE_DEFAULTS["surfel_candidates"]
    steps: int = 2000
    frames: int = 300
    noise_sigma: float = 0.0
    eval_points: int = 20_000
    mesh_resolution: int = 64
    slice_z: float = 1.0
    slice_resolution: int = 256
    bounds_margin: float = 0.3
    deterministic: bool = False


def engine_kwargs(cfg: RunConfig) -> dict:
    """RunConfig fields that map one-to-one onto Engine parameters."""
    return {k: getattr(cfg, k) for k in _ENGINE_DEFAULTS if hasattr(cfg, k)}


# ------------------------------------------------------------- config plumbing


def load_config(path: str) -> dict:
    import yaml

    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    valid = {f.name for f in dataclasses.fields(RunConfig)}
    bad = set(doc) - valid
    if bad:
        raise UsageError(f"unknown config keys in {path}: {sorted(bad)}")
    return doc


def build_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for f in dataclasses.fields(RunConfig):
        if hasattr(args, f.name):  # only explicitly passed flags survive SUPPRESS
            values[f.name] = getattr(args, f.name)
    return RunConfig(**values)


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="YAML",
                        help="config file; explicit flags override it")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            parser.add_argument(flag, dest=f.name, default=argparse.SUPPRESS,
                                action=argparse.BooleanOptionalAction,
                                help=f"default {f.default}")
        else:
            typ = float if f.type in ("float", float) else int
            parser.add_argument(flag, dest=f.name, type=typ,
                                default=argparse.SUPPRESS,
                                help=f"default {f.default}")


def _apply_determinism(cfg: RunConfig) -> None:
    """Pin numeric library threading so reductions run in a fixed order."""
    if not cfg.deterministic:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"


# ------------------------------------------------------------- input handling


def resolve_scene(args) -> dataio.SceneSpec:
    if getattr(args, "scene_file", None):
        return dataio.scene_from_yaml(args.scene_file)
    if getattr(args, "scene", None):
        try:
            return dataio.builtin_scene(args.scene)
        except KeyError as e:
            raise UsageError(str(e)) from e
    raise UsageError("provide --scene or --scene-file")


def resolve_frames(args, cfg: RunConfig):
    """(frame triples, source string, scene-or-None) from --input or --scene."""
    if getattr(args, "input", None):
        seq = dataio.load_sequence(args.input)
        return list(seq.frames()), f"dir:{args.input}", None
    scene = resolve_scene(args)
    seq = dataio.synth_sequence(scene, n_frames=cfg.frames,
                                noise_sigma=cfg.noise_sigma)
    return list(seq.frames()), f"scene:{scene.name}", scene


def keyframe_bounds(engine: Engine, margin: float):
    """Axis-aligned bounds of observed geometry: surfel corners plus
    backprojected keyframe depth (coarse stride), padded by margin."""
    pts = []
    rays = engine.K.ray_dirs_cam()[::12, ::12].reshape(-1, 3)
    for kf in engine.keyframes:
        pts.append(kf.camera_center[None])
        for s in kf.surfels:
            pts.append(s.corners())
        d = kf.depth[::12, ::12].ravel()
        ok = d > 0
        world = (rays[ok] * d[ok, None]) @ kf.pose.rotation.T + kf.camera_center
        pts.append(world)
    P = np.concatenate(pts)
    return P.min(axis=0) - margin, P.max(axis=0) + margin


# ------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = build_config(args)
    scene = resolve_scene(args)
    seq = dataio.synth_sequence(scene, n_frames=cfg.frames,
                                noise_sigma=cfg.noise_sigma)
    dataio.write_sequence(seq, args.out)
    dataio.scene_to_yaml(scene, os.path.join(args.out, "scene.yaml"))
    print(f"wrote {len(seq)} frames to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = build_config(args)
    _apply_determinism(cfg)
    triples, source, scene = resolve_frames(args, cfg)
    os.makedirs(args.out, exist_ok=True)

    K = dataio.DEFAULT_INTRINSICS if scene is not None else _loaded_K(args.input)
    engine = Engine(K, **engine_kwargs(cfg))
    kf_log = []
    interrupted = False
    reports = []
    try:
        reports = engine.run_sequence(triples, total_steps=cfg.steps)
    except KeyboardInterrupt:
        interrupted = True  # still write every output below
    by_status = [r for r in reports if r.get("status") in ("init_keyframe", "keyframe_added")]
    for kf, rep in zip(engine.keyframes, by_status):
        kf_log.append({
            "id": kf.id,
            "n_surfels": len(kf.surfels),
            "af_angles_deg": [round(a, 6) for a in kf.local_af.frame.angles.tolist()],
            "observed_directions": list(kf.local_af.observed),
            "loss_total": rep.get("loss_total"),
        })

    outputs = {}
    ckpt = os.path.join(args.out, "checkpoint.npz")
    save_checkpoint(ckpt, engine.model, engine.opt,
                    extra={"steps": engine.steps_done, "seed": cfg.seed})
    outputs["checkpoint"] = ckpt

    if engine.af is not None:
        pmap = PlanarMap(engine.af, [s for kf in engine.keyframes for s in kf.surfels])
        pmap_path = os.path.join(args.out, "planar_map.txt")
        export_eval.export_planar_map(pmap, pmap_path)
        outputs["planar_map"] = pmap_path

    if engine.keyframes:
        lo, hi = keyframe_bounds(engine, cfg.bounds_margin)
        mesh = export_eval.marching_cubes(engine.model, (lo, hi), cfg.mesh_resolution)
        mesh_path = os.path.join(args.out, "mesh.obj")
        export_eval.export_mesh(mesh, mesh_path)
        outputs["mesh"] = mesh_path
        z = min(max(cfg.slice_z, lo[2]), hi[2])
        values = export_eval.sdf_slice(engine.model, z, (lo, hi), cfg.slice_resolution)
        png = os.path.join(args.out, "slice.png")
        raw = os.path.join(args.out, "slice.npy")
        export_eval.export_slice(values, png, raw)
        outputs["slice_png"] = png
        outputs["slice_raw"] = raw

    manifest = {
        "version": 1,
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "input": source,
        "interrupted": interrupted,
        "n_frames": len(triples),
        "steps_done": engine.steps_done,
        "n_keyframes": len(engine.keyframes),
        "keyframes": kf_log,
        "outputs": {k: os.path.basename(v) for k, v in outputs.items()},
    }
    man_path = os.path.join(args.out, "manifest.json")
    with open(man_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"run complete: {engine.steps_done} steps, "
          f"{len(engine.keyframes)} keyframes, outputs in {args.out}")
    return EXIT_RUNTIME if interrupted else EXIT_OK


def _loaded_K(directory: str):
    return dataio.load_sequence(directory).K


def cmd_eval(args) -> int:
    cfg = build_config(args)
    _apply_determinism(cfg)
    if args.mode == "combined" and not args.planar_map:
        raise UsageError("combined mode requires --planar-map")
    model, _, _ = load_checkpoint(args.checkpoint)
    triples, _, scene = resolve_frames(args, cfg)
    if scene is None:
        if not getattr(args, "scene", None) and not getattr(args, "scene_file", None):
            raise UsageError("evaluation requires an analytic scene "
                             "(--scene/--scene-file) as the oracle")
        scene = resolve_scene(args)
    frames = [(d, p) for (_, d, p) in triples]
    oracle = lambda X: dataio.scene_sdf(scene, X)  # noqa: E731
    pmap = export_eval.load_planar_map(args.planar_map) if args.planar_map else None
    K = dataio.DEFAULT_INTRINSICS if args.input is None else _loaded_K(args.input)
    report = export_eval.evaluate(model, oracle, frames, K,
                                  n_points=cfg.eval_points, mode=args.mode,
                                  planar_map=pmap, seed=cfg.seed)
    sys.stdout.write(report.to_text())
    if args.out:
        report.write(args.out)
    return EXIT_OK


def cmd_mesh(args) -> int:
    cfg = build_config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    lo = np.array(args.bounds[:3], dtype=float)
    hi = np.array(args.bounds[3:], dtype=float)
    try:
        mesh = export_eval.marching_cubes(model, (lo, hi), cfg.mesh_resolution)
    except ValueError as e:
        raise UsageError(str(e)) from e
    export_eval.export_mesh(mesh, args.out)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {args.out}")
    return EXIT_OK


def cmd_slice(args) -> int:
    cfg = build_config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    lo = np.array(args.bounds[:3], dtype=float)
    hi = np.array(args.bounds[3:], dtype=float)
    try:
        values = export_eval.sdf_slice(model, args.z, (lo, hi), cfg.slice_resolution)
    except ValueError as e:
        raise UsageError(str(e)) from e
    raw = os.path.splitext(args.out)[0] + ".npy"
    export_eval.export_slice(values, args.out, raw)
    print(f"wrote {args.out} and {raw}")
    return EXIT_OK


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="awsdf",
        description="Incremental signed-distance-field reconstruction "
                    "with an Atlanta-world planar map.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_scene_flags(p):
        p.add_argument("--scene", help="builtin scene name (e.g. aw-apartment)")
        p.add_argument("--scene-file", help="scene YAML path")

    p = sub.add_parser("synth", help="render a synthetic depth sequence to disk")
    add_scene_flags(p)
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="train on a sequence; write map/mesh/manifest")
    add_scene_flags(p)
    p.add_argument("--input", help="sequence directory (depth/ + poses.txt)")
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="metrics of a checkpoint against a scene oracle")
    p.add_argument("--checkpoint", required=True)
    add_scene_flags(p)
    p.add_argument("--input", help="sequence directory for evaluation rays")
    p.add_argument("--planar-map")
    p.add_argument("--mode", choices=("implicit", "combined"), default="implicit")
    p.add_argument("--out", help="also write the report to this path")
    add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mesh", help="marching-cubes mesh of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bounds", nargs=6, type=float, metavar="B",
                   default=[-3, -3, -0.5, 3, 3, 3],
                   help="x0 y0 z0 x1 y1 z1")
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("slice", help="horizontal slice image of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--z", type=float, required=True)
    p.add_argument("--bounds", nargs=6, type=float, metavar="B",
                   default=[-3, -3, -0.5, 3, 3, 3])
    p.add_argument("--out", required=True, help="PNG path (.npy written alongside)")
    add_config_flags(p)
    p.set_defaults(func=cmd_slice)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SequenceError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
