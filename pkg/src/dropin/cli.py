"""Command-line entry point.

Subcommands: optimize (full guided optimization), render (forward render of
foreground / shadow ratio / composite from a given environment map),
benchmark (synthetic HDR-panorama protocol over a directory of PFM maps),
gradcheck (finite-difference suites).

Exit codes: 0 ok, 2 usage, 3 remote guidance unavailable, 4 numerical
failure. DIPIR_THREADS overrides --threads. Heavy imports happen after
thread setup so the thread count can still be pinned.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _setup_threads(n_threads):
    env = os.environ.get("DIPIR_THREADS")
    if env:
        n_threads = int(env)
    if n_threads is None:
        n_threads = os.cpu_count() or 1
    os.environ.setdefault("NUMBA_NUM_THREADS", str(max(1, n_threads)))
    import numba

    numba.set_num_threads(min(max(1, n_threads), numba.config.NUMBA_NUM_THREADS))
    return n_threads


def _versions():
    import numpy, numba
    from . import __version__

    return {
        "dropin": __version__,
        "numpy": numpy.__version__,
        "numba": numba.__version__,
        "python": sys.version.split()[0],
    }


def _parse_resolution(s):
    if s is None:
        return None
    rows, cols = s.lower().split("x")
    return (int(rows), int(cols))


def _build_parser():
    p = argparse.ArgumentParser(prog="dropin", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--spp", type=int, default=128)
        sp.add_argument("--mis-rays", type=int, default=4)
        sp.add_argument("--depth", type=int, default=3)
        sp.add_argument("--resolution", type=str, default=None, help="ROWSxCOLS (default 256x384)")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--out-dir", type=str, default="out")

    sp = sub.add_parser("optimize", help="run the guided optimization")
    common(sp)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--iters", type=int, default=600)
    sp.add_argument("--guidance", choices=["oracle", "remote", "stub"], default="stub")
    sp.add_argument("--reference", type=str, default=None, help="reference PNG for the oracle")
    sp.add_argument("--endpoint", type=str, default=None)
    sp.add_argument("--prompt", type=str, default="a photo of an object in a scene")
    sp.add_argument("--mode", choices=["insertion", "material", "tone"], default="insertion")
    sp.add_argument("--env-res", type=str, default="128x256")
    sp.add_argument("--n-lobes", type=int, default=64)
    sp.add_argument("--crop-res", type=int, default=512)
    sp.add_argument("--env-map", type=str, default=None, help="frozen lighting PFM for material/tone modes")
    sp.add_argument("--from-manifest", type=str, default=None)

    sp = sub.add_parser("render", help="forward render from an environment map")
    common(sp)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--env-map", required=True, help="PFM environment map")
    sp.add_argument("--from-manifest", type=str, default=None)

    sp = sub.add_parser("benchmark", help="synthetic benchmark over a directory of PFMs")
    common(sp)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--scenes-dir", required=True)
    sp.add_argument("--iters", type=int, default=600)
    sp.add_argument("--env-res", type=str, default="128x256")
    sp.add_argument("--n-lobes", type=int, default=64)
    sp.add_argument("--crop-res", type=int, default=512)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--fast", action="store_true", help="skip the full-chain checks")
    sp.add_argument("--out-dir", type=str, default=None)
    return p


def _apply_manifest(args):
    if getattr(args, "from_manifest", None):
        stored = json.loads(Path(args.from_manifest).read_text())
        for key, val in stored.get("args", {}).items():
            if key != "out_dir":  # outputs may go elsewhere; inputs are pinned
                setattr(args, key, val)
    return args


def _manifest(args, extra):
    keys = [k for k in vars(args) if k not in ("command", "from_manifest", "threads")]
    man = {
        "command": args.command,
        "args": {k: getattr(args, k) for k in keys},
        "versions": _versions(),
        "inputs": extra,
    }
    return man


def _write_manifest(out_dir, man):
    (out_dir / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def _load_scene_checked(path):
    from .scenegraph import load_scene

    return load_scene(path)


def _render_settings(args):
    from .tracer import RenderSettings

    return RenderSettings(
        spp=args.spp,
        mis_rays=args.mis_rays,
        max_depth=args.depth,
        resolution=_parse_resolution(args.resolution),
        base_seed=args.seed,
    )


def cmd_render(args):
    import numpy as np
    from .imageio import read_pfm, write_pfm, write_png
    from .lightfield import EnvironmentMap
    from .metrics import render_background
    from .tonemap import ToneParams, apply_fg_tone, apply_shadow_tone, srgb_decode, srgb_encode
    from .tracer import composite, render_foreground, render_shadow_ratio, visibility_mask
    from dataclasses import replace as dc_replace

    scene = _load_scene_checked(args.scene)
    env = EnvironmentMap(np.maximum(read_pfm(args.env_map), 0.0))
    settings = _render_settings(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    i_fg = render_foreground(scene, env, settings)
    beta = render_shadow_ratio(scene, env, settings)
    vis = visibility_mask(scene, settings)
    tone = ToneParams()
    fg_toned = apply_fg_tone(i_fg, tone)
    beta_toned = apply_shadow_tone(beta, tone)
    resolution = settings.resolution or scene.camera.resolution
    if scene.background is not None:
        bg = srgb_decode(scene.background)
        if bg.shape[:2] != tuple(resolution):
            raise ValueError("background resolution does not match the render resolution")
    else:
        cam = scene.camera
        if tuple(resolution) != tuple(cam.resolution):
            cam = dc_replace(cam, resolution=tuple(resolution))
        bg = render_background(env, cam)
    comp = composite(bg, fg_toned, beta_toned, vis)

    write_pfm(out_dir / "foreground.pfm", i_fg)
    write_png(out_dir / "foreground.png", srgb_encode(fg_toned))
    write_pfm(out_dir / "beta.pfm", beta)
    write_png(out_dir / "composite.png", srgb_encode(comp))
    man = _manifest(args, {"scene_sha256": _sha256(args.scene), "env_sha256": _sha256(args.env_map)})
    _write_manifest(out_dir, man)
    return 0


def cmd_optimize(args):
    import numpy as np
    from .errors import GuidanceUnavailableError
    from .guidance import GuidanceConfig, PhotometricOracle, RemoteProvider, StubDistillationProvider
    from .imageio import read_png, write_pfm, write_png
    from .lightfield import EnvironmentMap
    from .optimizer import (
        OptimConfig,
        run_material_mode,
        run_optimization,
        run_tone_adjust_mode,
        save_checkpoint,
        write_diagnostics_csv,
    )
    from .imageio import read_pfm
    from .tonemap import srgb_decode, srgb_encode

    scene = _load_scene_checked(args.scene)
    if scene.background is None:
        print("error: scene config must reference a background image", file=sys.stderr)
        return 1
    env_h, env_w = _parse_resolution(args.env_res)
    mode = {"insertion": "insertion", "material": "material", "tone": "tone_adjust"}[args.mode]
    config = OptimConfig(
        iterations=args.iters,
        seed=args.seed,
        mode=mode,
        n_lobes=args.n_lobes,
        env_height=env_h,
        env_width=env_w,
        render=_render_settings(args),
        guidance=GuidanceConfig(crop_resolution=args.crop_res),
    )

    inputs = {"scene_sha256": _sha256(args.scene)}
    if args.guidance == "oracle":
        if not args.reference:
            print("error: --guidance oracle requires --reference", file=sys.stderr)
            return 2
        reference = srgb_decode(read_png(args.reference))
        provider = PhotometricOracle(reference, config.guidance.crop_resolution)
        inputs["reference_sha256"] = _sha256(args.reference)
    elif args.guidance == "remote":
        if not args.endpoint:
            print("error: --guidance remote requires --endpoint", file=sys.stderr)
            return 2
        try:
            provider = RemoteProvider(args.endpoint, args.prompt)
        except GuidanceUnavailableError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 3
    else:
        provider = StubDistillationProvider()

    background = scene.background
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        if mode == "insertion":
            result = run_optimization(scene, background, config, provider)
        else:
            if not args.env_map:
                print("error: material/tone modes require --env-map", file=sys.stderr)
                return 2
            lighting = EnvironmentMap(np.maximum(read_pfm(args.env_map), 0.0))
            inputs["env_sha256"] = _sha256(args.env_map)
            runner = run_material_mode if mode == "material" else run_tone_adjust_mode
            result = runner(scene, background, config, provider, lighting)
    except GuidanceUnavailableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3

    write_png(out_dir / "composite.png", srgb_encode(result.composite_image))
    write_pfm(out_dir / "fused_env.pfm", result.fused_env.pixels)
    curves = {
        "foreground": {"raw": result.tone.fg.raw.tolist(),
                       "knots_x": result.tone.fg.knot_x.tolist(),
                       "knots_y": result.tone.fg.knot_y.tolist()},
        "shadow": [
            {"raw": s.raw.tolist(), "knots_x": s.knot_x.tolist(), "knots_y": s.knot_y.tolist()}
            for s in result.tone.shadow
        ],
    }
    if result.material is not None:
        curves["material"] = {
            "base_color": result.material.base_color.tolist(),
            "metallic": result.material.metallic,
            "roughness": result.material.roughness,
            "emission": result.material.emission.tolist(),
        }
    (out_dir / "tone_curves.json").write_text(json.dumps(curves, indent=2) + "\n")
    write_diagnostics_csv(out_dir / "diagnostics.csv", result.diagnostics)
    save_checkpoint(out_dir / "checkpoint.bin", result.state.params)
    _write_manifest(out_dir, _manifest(args, inputs))
    return 0


def cmd_benchmark(args):
    from .guidance import GuidanceConfig
    from .metrics import MetricsReport, synth_benchmark
    from .optimizer import OptimConfig

    scene = _load_scene_checked(args.scene)
    scenes_dir = Path(args.scenes_dir)
    maps = sorted(scenes_dir.glob("*.pfm"))
    if not maps:
        print(f"error: no PFM maps in {scenes_dir}", file=sys.stderr)
        return 1
    env_h, env_w = _parse_resolution(args.env_res)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in maps:
        config = OptimConfig(
            iterations=args.iters,
            seed=args.seed,
            n_lobes=args.n_lobes,
            env_height=env_h,
            env_width=env_w,
            render=_render_settings(args),
            guidance=GuidanceConfig(crop_resolution=args.crop_res),
        )
        report, _, _ = synth_benchmark(path, scene, config, name=path.stem)
        rows.extend(report.rows())
        print(report.pretty())
    merged = MetricsReport(
        rmse=float(sum(r[1] for r in rows) / len(rows)),
        ssim=float(sum(r[2] for r in rows) / len(rows)),
        si_rmse=float(sum(r[3] for r in rows) / len(rows)),
        per_image=rows,
    )
    (out_dir / "benchmark.csv").write_text(merged.to_csv())
    _write_manifest(out_dir, _manifest(args, {"scene_sha256": _sha256(args.scene)}))
    print(merged.pretty())
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_all

    text, ok = run_all(fast=args.fast)
    print(text)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "gradcheck.txt").write_text(text + "\n")
    return 0 if ok else 4


def main(argv=None):
    args = _build_parser().parse_args(argv)
    _setup_threads(getattr(args, "threads", None))
    args = _apply_manifest(args)
    from .errors import DropinError, NumericalFailureError, SceneLoadError

    try:
        if args.command == "optimize":
            return cmd_optimize(args)
        if args.command == "render":
            return cmd_render(args)
        if args.command == "benchmark":
            return cmd_benchmark(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
    except (SceneLoadError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except DropinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
