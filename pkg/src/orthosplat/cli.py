"""Batch benchmark runner and artifact emitter: generate worlds, run the
retrieval pipeline over scene sets, write metric tables, ablation sweeps,
and rendered image strips."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import embed, imgio
from .config import RunConfig
from .refine import PipelineError, dump_trajectory, run_pipeline
from .retrieve import (GalleryIndex, metrics_row, rank, write_metrics_csv)
from .scenegen import generate_gallery, generate_query, generate_world

MODULE_PRESETS = ("single", "average", "render", "refine", "full")
FUSION_ALIASES = {"alpha": "self", "beta": "cross", "alpha+beta": "both",
                  "self": "self", "cross": "cross", "both": "both"}


class BenchmarkError(RuntimeError):
    pass


def scene_seed(cfg_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([cfg_seed, 17, index]).generate_state(1)[0])


def build_gallery_index(gallery, cfg: RunConfig) -> GalleryIndex:
    """Gallery features from the desk extractor, or dropped in from an
    interchange file (ids matched as strings against patch ids)."""
    ids = [p.patch_id for p in gallery]
    geotags = np.array([p.geotag for p in gallery])
    if cfg.features.startswith("file:"):
        path = cfg.features[5:]
        table = dict(embed.load_feature_file(path))
        feats = []
        for pid in ids:
            key = str(pid)
            if key not in table:
                raise BenchmarkError(f"feature file {path} missing id '{key}'")
            feats.append(table[key])
        features = np.vstack(feats)
    else:
        features = np.vstack([embed.global_feature(p.image.pixels)
                              for p in gallery])
    return GalleryIndex(ids, features, geotags,
                        images=[p.image for p in gallery],
                        footprint_m=gallery[0].gsd * gallery[0].image.shape[1],
                        image_px=gallery[0].image.shape[1])


def prepare_benchmark(cfg: RunConfig):
    world = generate_world(cfg.seed, cfg.extent, cfg.buildings)
    gallery = generate_gallery(world, cfg.patch_m, cfg.stride_m, cfg.gallery_px)
    index = build_gallery_index(gallery, cfg)
    return world, gallery, index


def scene_specs(cfg: RunConfig, gallery) -> list[tuple[str, np.ndarray, int]]:
    """Scene placements: interior patch centers perturbed by a seeded
    offset below half a stride, so every query starts spatially misaligned
    with its (still unique) nearest patch and the drone orbit stays clear
    of the world boundary."""
    margin = cfg.orbit_radius + 2.0
    eligible = [p for p in gallery
                if margin - 1e-9 <= p.geotag[0] <= cfg.extent - margin + 1e-9
                and margin - 1e-9 <= p.geotag[1] <= cfg.extent - margin + 1e-9]
    if len(eligible) < cfg.scenes:
        raise BenchmarkError(
            f"only {len(eligible)} interior patch centers for {cfg.scenes} "
            f"scenes; enlarge the world or reduce --scenes")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 23]))
    order = rng.permutation(len(eligible))[:cfg.scenes]
    lo_off = min(0.16 * cfg.stride_m, margin)
    hi_off = min(0.35 * cfg.stride_m, margin)
    specs = []
    for i, j in enumerate(sorted(order)):
        angle = rng.uniform(0, 2 * np.pi)
        radius = rng.uniform(lo_off, hi_off)
        offset = radius * np.array([np.cos(angle), np.sin(angle)])
        specs.append((f"scene_{i:03d}", eligible[j].geotag + offset,
                      scene_seed(cfg.seed, i)))
    return specs


def truth_patch_id(index: GalleryIndex, geotag) -> object:
    dist = np.linalg.norm(index.geotags - np.asarray(geotag), axis=1)
    return index.ids[int(np.argmin(dist))]


def run_scene(world, index: GalleryIndex, cfg: RunConfig, spec,
              out_dir=None) -> list[dict]:
    """Run one scene end to end and return its metric rows (one per
    refinement iteration; degenerate retrieval modes emit iteration 0)."""
    scene_id, center, seed = spec
    query = generate_query(world, center, cfg.nv, cfg.orbit_radius,
                           cfg.altitude, seed, cfg.drone_px, cfg.max_sparse,
                           scene_id)
    truth = truth_patch_id(index, query.geotag)

    mode = "single" if cfg.nv == 1 else cfg.mode
    if mode in ("single", "average"):
        feats = [embed.global_feature(img.pixels)
                 for _, img in query.drone_images]
        feature = feats[len(feats) // 2] if mode == "single" else \
            embed.normalize_feature(np.mean(feats, axis=0))
        ranked = rank(feature, index)
        return [metrics_row(scene_id, ranked, truth, index, query.geotag, 0)]

    result = run_pipeline(
        query, index, iters=cfg.iters, render_px=cfg.res,
        a=cfg.alpha_interp, lambda_s=cfg.lambda_s, lambda_m=cfg.lambda_m,
        k=cfg.k, n_m=cfg.nm, d_max=None if cfg.d_max <= 0 else cfg.d_max,
        theta_max=cfg.theta_max, ransac_tol=cfg.ransac_tol,
        plane_tol=cfg.plane_tol, fusion_mode=cfg.fusion_mode,
        temperature=cfg.temperature, seed=seed)
    if out_dir is not None and cfg.dump_trajectories:
        dump_trajectory(result, os.path.join(out_dir, scene_id))
    return [metrics_row(scene_id, st.ranking, truth, index, query.geotag,
                        st.iteration) for st in result.states]


_POOL_CTX = {}


def _pool_worker(spec):
    try:
        return ("ok", run_scene(_POOL_CTX["world"], _POOL_CTX["index"],
                                _POOL_CTX["cfg"], spec, _POOL_CTX["out"]))
    except Exception as exc:  # reported per scene by the coordinator
        return ("err", (spec[0], f"{type(exc).__name__}: {exc}"))


def run_benchmark(cfg: RunConfig, out_dir=None, world=None, gallery=None,
                  index=None):
    """Run every scene; returns (rows, failures, manifest_dict).

    With cfg.workers > 1 scenes run in a fork-based process pool; results
    are deterministic regardless of worker count because each scene is a
    pure function of its seed and the rows are sorted before writing.
    """
    if world is None or gallery is None or index is None:
        world, gallery, index = prepare_benchmark(cfg)
    specs = scene_specs(cfg, gallery)

    rows: list[dict] = []
    failures: list[tuple[str, str]] = []
    if cfg.workers > 1:
        import multiprocessing as mp

        _POOL_CTX.update(world=world, index=index, cfg=cfg, out=out_dir)
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=cfg.workers) as pool:
            outcomes = pool.map(_pool_worker, specs)
        _POOL_CTX.clear()
        for status, payload in outcomes:
            if status == "ok":
                rows.extend(payload)
            else:
                failures.append(payload)
    else:
        for spec in specs:
            try:
                rows.extend(run_scene(world, index, cfg, spec, out_dir))
            except Exception as exc:
                failures.append((spec[0], f"{type(exc).__name__}: {exc}"))
                if not cfg.keep_going:
                    break

    manifest = {
        "config": cfg.to_dict(),
        "package_version": "0.1.0",
        "gallery": {
            "patches": len(gallery),
            "grid_side": int(round(np.sqrt(len(gallery)))),
            "patch_m": cfg.patch_m,
            "stride_m": cfg.stride_m,
            "geotags": [[float(p.geotag[0]), float(p.geotag[1])]
                        for p in gallery],
        },
        "scenes": [{"scene_id": s, "geotag": [float(c[0]), float(c[1])],
                    "seed": int(sd)} for s, c, sd in specs],
        "failures": [{"scene_id": s, "error": e} for s, e in failures],
    }
    return rows, failures, manifest


def aggregate_table(rows) -> list[dict]:
    table = []
    for it in sorted({r["iteration"] for r in rows}):
        sub = [r for r in rows if r["iteration"] == it]
        table.append({
            "iteration": it,
            "r@1": float(np.mean([r["r@1"] for r in sub])),
            "r@5": float(np.mean([r["r@5"] for r in sub])),
            "r@10": float(np.mean([r["r@10"] for r in sub])),
            "ap": float(np.mean([r["ap"] for r in sub])),
            "mean_meter_error": float(np.nanmean([r["meter_error"]
                                                  for r in sub])),
            "scenes": len(sub),
        })
    return table


def _write_manifest(path, manifest) -> None:
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_bench(cfg: RunConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    rows, failures, manifest = run_benchmark(cfg, cfg.out)
    write_metrics_csv(os.path.join(cfg.out, "metrics.csv"), rows)
    _write_manifest(os.path.join(cfg.out, "manifest.json"), manifest)
    for scene_id, err in failures:
        print(f"FAILED {scene_id}: {err}", file=sys.stderr)
    for line in aggregate_table(rows):
        print("T={iteration}  R@1={r@1:.4f}  R@5={r@5:.4f}  "
              "R@10={r@10:.4f}  AP={ap:.4f}  meters={mean_meter_error:.2f}"
              .format(**line))
    if failures and not cfg.keep_going:
        return 1
    if not rows:
        print("no scene succeeded", file=sys.stderr)
        return 1
    return 0


def apply_module_preset(cfg: RunConfig, preset: str) -> RunConfig:
    """Pipeline-composition presets for the module ablation sweep."""
    if preset == "single":
        return cfg.replace(mode="single")
    if preset == "average":
        return cfg.replace(mode="average")
    if preset == "render":
        return cfg.replace(mode="pipeline", iters=0)
    if preset == "refine":
        # pose updates without the consistency fusion memory term
        return cfg.replace(mode="pipeline", lambda_s=0.0, fusion_mode="cross")
    if preset == "full":
        return cfg.replace(mode="pipeline")
    raise ValueError(f"unknown module preset '{preset}'")


def cmd_ablate(cfg: RunConfig, param: str, values: list[str]) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    world, gallery, index = prepare_benchmark(cfg)
    long_rows = []
    for value in values:
        if param == "T":
            sub = cfg.replace(iters=int(value))
        elif param == "nv":
            sub = cfg.replace(nv=int(value))
        elif param == "fusion_mode":
            if value not in FUSION_ALIASES:
                print(f"unknown fusion mode '{value}'", file=sys.stderr)
                return 2
            sub = cfg.replace(fusion_mode=FUSION_ALIASES[value])
        elif param == "modules":
            if value not in MODULE_PRESETS:
                print(f"unknown module preset '{value}'", file=sys.stderr)
                return 2
            sub = apply_module_preset(cfg, value)
        else:
            print(f"unknown sweep parameter '{param}'", file=sys.stderr)
            return 2
        sub = sub.replace(dump_trajectories=False)
        rows, failures, _ = run_benchmark(sub, None, world, gallery, index)
        if failures and not cfg.keep_going:
            for scene_id, err in failures:
                print(f"FAILED {scene_id}: {err}", file=sys.stderr)
            return 1
        final_it = max(r["iteration"] for r in rows)
        for line in aggregate_table(rows):
            long_rows.append({"param": param, "value": value,
                              "is_final": int(line["iteration"] == final_it),
                              **line})
    path = os.path.join(cfg.out, f"ablate_{param}.csv")
    cols = ["param", "value", "iteration", "is_final", "r@1", "r@5", "r@10",
            "ap", "mean_meter_error", "scenes"]
    with open(path, "w", newline="\n") as f:
        f.write(",".join(cols) + "\n")
        for r in long_rows:
            f.write(",".join(
                str(r[c]) if c in ("param", "value", "iteration", "is_final",
                                   "scenes")
                else f"{r[c]:.6f}" for c in cols) + "\n")
    for r in long_rows:
        if r["is_final"]:
            print(f"{param}={r['value']}  R@1={r['r@1']:.4f}  "
                  f"AP={r['ap']:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_render(cfg: RunConfig, scene_id: str, pose_patch=None) -> int:
    world, gallery, index = prepare_benchmark(cfg)
    specs = {s: (s, c, sd) for s, c, sd in scene_specs(cfg, gallery)}
    if scene_id not in specs:
        print(f"unknown scene id '{scene_id}'", file=sys.stderr)
        return 1
    _, center, seed = specs[scene_id]
    out_dir = os.path.join(cfg.out, scene_id)
    os.makedirs(out_dir, exist_ok=True)
    query = generate_query(world, center, cfg.nv, cfg.orbit_radius,
                           cfg.altitude, seed, cfg.drone_px, cfg.max_sparse,
                           scene_id)
    truth = truth_patch_id(index, query.geotag)
    truth_patch = gallery[index.position(truth)]
    imgio.write_ppm(os.path.join(out_dir, "satellite.ppm"),
                    truth_patch.image.pixels)

    if pose_patch is not None:
        try:
            patch = gallery[index.position(type(truth)(pose_patch))]
        except (KeyError, ValueError):
            print(f"unknown patch id '{pose_patch}'", file=sys.stderr)
            return 1
        from .refine import _refit_views
        from .splat import init_primitives_from_points, refit_colors, render
        scene = init_primitives_from_points(query.sparse_points,
                                            query.sparse_colors)
        scene = refit_colors(scene, _refit_views(query.drone_images))
        override = render(scene, patch.camera)
        imgio.write_ppm(os.path.join(out_dir, "override.ppm"), override.pixels)
        print(f"wrote {out_dir}/override.ppm and satellite.ppm")
        return 0

    result = run_pipeline(
        query, index, iters=cfg.iters, render_px=cfg.res,
        a=cfg.alpha_interp, lambda_s=cfg.lambda_s, lambda_m=cfg.lambda_m,
        k=cfg.k, n_m=cfg.nm, d_max=None if cfg.d_max <= 0 else cfg.d_max,
        theta_max=cfg.theta_max, ransac_tol=cfg.ransac_tol,
        plane_tol=cfg.plane_tol, fusion_mode=cfg.fusion_mode,
        temperature=cfg.temperature, seed=seed)
    strip = []
    for st in result.states:
        imgio.write_ppm(os.path.join(out_dir, f"render_t{st.iteration}.ppm"),
                        st.render.pixels)
        strip.append(st.render.pixels)
    side = truth_patch.image.pixels
    h = max(img.shape[0] for img in strip + [side])
    padded = []
    for img in strip + [side]:
        pad = np.full((h, img.shape[1], 3), 1.0)
        pad[:img.shape[0]] = img
        padded.append(pad)
    imgio.write_ppm(os.path.join(out_dir, "strip.ppm"), np.hstack(padded))
    print(f"wrote {len(strip)} iteration renders + satellite to {out_dir}")
    return 0


def cmd_gen_world(cfg: RunConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    world, gallery, index = prepare_benchmark(cfg)
    np.savez_compressed(os.path.join(cfg.out, "world.npz"),
                        points=world.points, colors=world.colors,
                        extent=world.extent, seed=world.seed)
    gdir = os.path.join(cfg.out, "gallery")
    os.makedirs(gdir, exist_ok=True)
    paths = []
    for p in gallery:
        path = os.path.join(gdir, f"patch_{p.patch_id:03d}.ppm")
        imgio.write_ppm(path, p.image.pixels)
        paths.append(path)
    embed.save_feature_file(
        os.path.join(cfg.out, "gallery_features.txt"),
        [(str(pid), index.features[i]) for i, pid in enumerate(index.ids)])
    manifest = {
        "config": cfg.to_dict(),
        "world": {"points": int(len(world.points)), "extent": world.extent},
        "gallery": {"patches": len(gallery),
                    "geotags": [[float(g.geotag[0]), float(g.geotag[1])]
                                for g in gallery],
                    "files": paths},
        "scenes": [{"scene_id": s, "geotag": [float(c[0]), float(c[1])],
                    "seed": int(sd)} for s, c, sd in scene_specs(cfg, gallery)],
    }
    _write_manifest(os.path.join(cfg.out, "manifest.json"), manifest)
    print(f"wrote world ({len(world.points)} points), {len(gallery)} gallery "
          f"patches, features, manifest to {cfg.out}")
    return 0


def cmd_ingest_colmap(points3d, images, cameras, out: str,
                      images_dir=None) -> int:
    from .scenegen import ingest_colmap

    try:
        query = ingest_colmap(points3d, images, cameras, images_dir)
    except Exception as exc:
        print(str(exc), file=sys.stderr)
        return 1
    os.makedirs(out, exist_ok=True)
    poses = np.array([np.concatenate([cam.pose.rotation.quat,
                                      cam.pose.translation])
                      for cam, _ in query.drone_images])
    intrinsics = np.array([[cam.fx, cam.fy, cam.cx, cam.cy,
                            cam.width, cam.height]
                           for cam, _ in query.drone_images])
    np.savez_compressed(os.path.join(out, "ingested.npz"),
                        points=query.sparse_points, colors=query.sparse_colors,
                        poses=poses, intrinsics=intrinsics)
    print(f"ingested {len(query.sparse_points)} points, "
          f"{len(query.drone_images)} cameras -> {out}/ingested.npz")
    return 0


def cmd_self_test() -> int:
    """Quick internal sanity battery (seconds, no benchmark)."""
    from .geo3d import Pose, Rotation, interpolate_pose
    from .splat import (GaussianScene, VirtualOrthoCamera, ortho_jacobian,
                        project_orthographic, render)

    ok = True

    def check(name, cond):
        nonlocal ok
        print(f"self-test {name}: {'PASS' if cond else 'FAIL'}")
        ok = ok and cond

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        s_w, s_h = rng.uniform(0.5, 20, size=2)
        x = rng.uniform(-5, 5, size=3)
        jac = ortho_jacobian(s_w, s_h)
        eps = 1e-6
        for axis in range(3):
            d = np.zeros(3)
            d[axis] = eps
            fd = (project_orthographic(x + d, s_w, s_h)
                  - project_orthographic(x - d, s_w, s_h)) / (2 * eps)
            worst = max(worst, float(np.abs(fd - jac[:2, axis]).max()))
    check("ortho-jacobian-fd", worst < 1e-6)

    n = 50
    quats = rng.normal(size=(n, 4))
    scene = GaussianScene(rng.uniform(-3, 3, (n, 3)),
                          rng.uniform(0.2, 0.8, (n, 3)), quats,
                          rng.uniform(0.3, 1.0, n), rng.uniform(0, 1, (n, 3)))
    cam = VirtualOrthoCamera(Pose.identity(), 8.0, 8.0, 32, 32)
    img = render(scene, cam)
    check("render-coverage-range",
          bool((img.coverage >= 0).all() and (img.coverage <= 1).all()))

    p = Pose(Rotation.from_axis_angle([0, 0, 1], 0.7), [1, 2, 3])
    q = Pose(Rotation.from_axis_angle([1, 0, 0], -0.4), [-2, 0, 5])
    same = interpolate_pose(p, q, 0.0)
    check("interp-endpoint",
          bool(np.allclose(same.translation, p.translation)))
    return 0 if ok else 1


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenes", type=int)
    p.add_argument("--nv", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--nm", type=int)
    p.add_argument("--lambda-s", dest="lambda_s", type=float)
    p.add_argument("--lambda-m", dest="lambda_m", type=float)
    p.add_argument("--alpha-interp", dest="alpha_interp", type=float)
    p.add_argument("--res", type=int)
    p.add_argument("--features", help="desk | file:PATH")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--extent", type=float)
    p.add_argument("--buildings", type=int)
    p.add_argument("--patch-m", dest="patch_m", type=float)
    p.add_argument("--stride-m", dest="stride_m", type=float)
    p.add_argument("--gallery-px", dest="gallery_px", type=int)
    p.add_argument("--drone-px", dest="drone_px", type=int)
    p.add_argument("--orbit-radius", dest="orbit_radius", type=float)
    p.add_argument("--altitude", type=float)
    p.add_argument("--max-sparse", dest="max_sparse", type=int)
    p.add_argument("--plane-tol", dest="plane_tol", type=float)
    p.add_argument("--ransac-tol", dest="ransac_tol", type=float)
    p.add_argument("--d-max", dest="d_max", type=float)
    p.add_argument("--theta-max", dest="theta_max", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--fusion-mode", dest="fusion_mode",
                   choices=("both", "self", "cross"))
    p.add_argument("--mode", choices=("pipeline", "single", "average"))
    p.add_argument("--keep-going", dest="keep_going", action="store_true",
                   default=None)
    p.add_argument("--no-dump", dest="dump_trajectories",
                   action="store_false", default=None)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Precedence: command line > config file > defaults."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config)
    overrides = {k: v for k, v in vars(args).items()
                 if k in RunConfig.__dataclass_fields__ and v is not None}
    return cfg.replace(**overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="orthosplat",
        description="drone-to-satellite geo-localization benchmark runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("bench", help="run the benchmark end to end")
    _add_config_flags(p_bench)

    p_abl = sub.add_parser("ablate", help="sweep one parameter")
    _add_config_flags(p_abl)
    p_abl.add_argument("param", choices=("T", "nv", "fusion_mode", "modules"))
    p_abl.add_argument("values", nargs="+")

    p_render = sub.add_parser("render", help="write per-iteration renders "
                                             "for one scene")
    _add_config_flags(p_render)
    p_render.add_argument("scene_id")
    p_render.add_argument("--pose-patch", dest="pose_patch",
                          help="render from this gallery patch's true camera")

    p_gen = sub.add_parser("gen-world", help="generate world + gallery "
                                             "artifacts")
    _add_config_flags(p_gen)

    p_ing = sub.add_parser("ingest-colmap", help="ingest a COLMAP text "
                                                 "reconstruction")
    p_ing.add_argument("--points3d", required=True)
    p_ing.add_argument("--images", required=True)
    p_ing.add_argument("--cameras", required=True)
    p_ing.add_argument("--images-dir", dest="images_dir")
    p_ing.add_argument("--out", default="out")

    sub.add_parser("self-test", help="run the quick sanity battery")

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        if args.command == "bench":
            return cmd_bench(resolve_config(args))
        if args.command == "ablate":
            return cmd_ablate(resolve_config(args), args.param, args.values)
        if args.command == "render":
            return cmd_render(resolve_config(args), args.scene_id,
                              args.pose_patch)
        if args.command == "gen-world":
            return cmd_gen_world(resolve_config(args))
        if args.command == "ingest-colmap":
            return cmd_ingest_colmap(args.points3d, args.images, args.cameras,
                                     args.out, args.images_dir)
        if args.command == "self-test":
            return cmd_self_test()
    except (BenchmarkError, PipelineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
