"""The rendering-retrieval refinement loop: virtual camera initialization
from the point histogram objective, candidate verification by 2D-3D
matching and pose gating, fractional pose interpolation, re-rendering, and
view-consistency-guided feature fusion."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import (gaussian_filter, map_coordinates, maximum_filter,
                           uniform_filter)

from . import embed
from .geo3d import (Correspondence2D3D, DegenerateGeometryError, Plane, Pose,
                    Rotation, fit_ground_plane, interpolate_pose, pose_offsets,
                    solve_orthographic_pose)
from .retrieve import GalleryIndex, RankedResult, rank
from .splat import (GaussianScene, RenderedImage, VirtualOrthoCamera,
                    init_primitives_from_points, refit_colors, render)


class PipelineError(RuntimeError):
    """A scene failed somewhere in the reconstruction/retrieval pipeline."""


@dataclass
class CameraInitResult:
    camera: VirtualOrthoCamera
    objective: float
    histogram: np.ndarray


@dataclass
class Candidate:
    """One retrieved gallery patch considered for the pose update."""

    patch_id: object
    gallery_feature: np.ndarray
    pose: Pose | None = None
    inliers: int = 0
    verified: bool = False
    camera: VirtualOrthoCamera | None = None
    image: RenderedImage | None = None
    feature: np.ndarray | None = None
    sim_prev: float = 0.0      # self-view consistency
    sim_gallery: float = 0.0   # cross-view consistency


@dataclass
class RefinementState:
    """Per-iteration bundle: virtual camera, fused feature, candidate set
    with consistency scores, and the current gallery ranking."""

    iteration: int
    camera: VirtualOrthoCamera
    feature: np.ndarray
    prev_feature: np.ndarray | None
    render: RenderedImage
    candidates: list
    ranking: RankedResult
    fusion_weights: np.ndarray | None = None
    stalled: bool = False


@dataclass
class PipelineResult:
    scene_id: str
    states: list

    @property
    def final_ranking(self) -> RankedResult:
        return self.states[-1].ranking


# ---------------------------------------------------------------------------
# virtual camera initialization

def _plane_frame(plane: Plane) -> np.ndarray:
    """World-to-camera rotation looking against the plane normal, x-axis
    the (deterministic) projection of world-x onto the plane."""
    n = plane.normal
    ex = np.array([1.0, 0.0, 0.0])
    x = ex - (ex @ n) * n
    if np.linalg.norm(x) < 1e-6:
        ey = np.array([0.0, 1.0, 0.0])
        x = ey - (ey @ n) * n
    x = x / np.linalg.norm(x)
    z = -n
    y = np.cross(z, x)
    return np.vstack([x, y, z])


def coverage_objective(hist_sat: np.ndarray, blank_sat: np.ndarray,
                       grid_min, cell, rect, lambda_m: float) -> float:
    """Histogram coverage ratio for one footprint rectangle.

    rect = (t_x, t_y, s_w, s_h) in plane coordinates. Cells whose centers
    fall inside the rectangle contribute; returns -inf for rectangles with
    no point mass. Summed-area tables make each evaluation O(1).
    """
    t_x, t_y, s_w, s_h = rect
    i0r = math.ceil((t_x - s_w / 2 - grid_min[0]) / cell[0] - 0.5 - 1e-12)
    i1r = math.floor((t_x + s_w / 2 - grid_min[0]) / cell[0] - 0.5 + 1e-12)
    j0r = math.ceil((t_y - s_h / 2 - grid_min[1]) / cell[1] - 0.5 - 1e-12)
    j1r = math.floor((t_y + s_h / 2 - grid_min[1]) / cell[1] - 0.5 + 1e-12)
    if i0r > i1r or j0r > j1r:
        return -np.inf
    i0, j0 = max(i0r, 0), max(j0r, 0)
    i1 = min(i1r, hist_sat.shape[0] - 2)
    j1 = min(j1r, hist_sat.shape[1] - 2)
    if i0 > i1 or j0 > j1:
        return -np.inf

    def box(sat):
        return (sat[i1 + 1, j1 + 1] - sat[i0, j1 + 1]
                - sat[i1 + 1, j0] + sat[i0, j0])

    denom = box(hist_sat)
    if denom <= 0:
        return -np.inf
    # rectangle parts beyond the histogram extent are blank cells (H = 0)
    outside = ((i1r - i0r + 1) * (j1r - j0r + 1)
               - (i1 - i0 + 1) * (j1 - j0 + 1))
    blank = max(box(blank_sat), 0.0) + outside
    # rounding collapses summed-area cancellation noise into exact ties,
    # letting the documented area tie-break act on blank-free rectangles
    return float(np.round((denom - lambda_m * blank) / denom, 12))


def _summed_area(grid: np.ndarray) -> np.ndarray:
    sat = np.zeros((grid.shape[0] + 1, grid.shape[1] + 1))
    sat[1:, 1:] = grid.cumsum(axis=0).cumsum(axis=1)
    return sat


def init_virtual_camera(points, plane: Plane, image_px: int,
                        lambda_m: float = 100.0, grid: int = 64,
                        coarse_steps: int = 16,
                        descent_rounds: int = 5) -> CameraInitResult:
    """Place the virtual satellite camera over the point cloud.

    The viewing direction is perpendicular to the ground plane; the
    footprint (t_x, t_y, s_w, s_h) maximizes coverage of the projected
    point histogram while penalizing blank cells (weight lambda_m), via
    a coarse lattice search followed by coordinate descent with halving
    steps. Ties prefer larger area, then smaller (t_x, t_y).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 10:
        raise DegenerateGeometryError("camera init needs at least 10 points")
    r = _plane_frame(plane)
    uv = pts @ r[:2].T
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    span = hi - lo
    if np.any(span < 1e-9):
        raise DegenerateGeometryError("projected cloud is degenerate")

    counts, _, _ = np.histogram2d(uv[:, 0], uv[:, 1], bins=grid,
                                  range=[[lo[0], hi[0]], [lo[1], hi[1]]])
    if counts.sum() <= 0:
        raise DegenerateGeometryError("empty point histogram")
    # density estimate: each cell carries its 5x5-neighborhood count, so a
    # solidly covered cell drives exp(-H) to zero and the blank penalty
    # fires only on genuinely empty or fringe regions
    hist = uniform_filter(counts, size=5, mode="constant") * 25.0
    hist_sat = _summed_area(hist)
    blank_sat = _summed_area(np.exp(-hist))
    cell = span / grid

    def key(rect):
        obj = coverage_objective(hist_sat, blank_sat, lo, cell, rect, lambda_m)
        return (obj, rect[2] * rect[3], -rect[0], -rect[1])

    # coarse lattice over footprint centers and sizes, evaluated in bulk
    txs = np.linspace(lo[0], hi[0], coarse_steps)
    tys = np.linspace(lo[1], hi[1], coarse_steps)
    sws = np.linspace(span[0] / coarse_steps, span[0], coarse_steps)
    shs = np.linspace(span[1] / coarse_steps, span[1], coarse_steps)
    tx_g, ty_g, sw_g, sh_g = [v.ravel() for v in
                              np.meshgrid(txs, tys, sws, shs, indexing="ij")]
    i0r = np.ceil((tx_g - sw_g / 2 - lo[0]) / cell[0] - 0.5 - 1e-12).astype(int)
    i1r = np.floor((tx_g + sw_g / 2 - lo[0]) / cell[0] - 0.5 + 1e-12).astype(int)
    j0r = np.ceil((ty_g - sh_g / 2 - lo[1]) / cell[1] - 0.5 - 1e-12).astype(int)
    j1r = np.floor((ty_g + sh_g / 2 - lo[1]) / cell[1] - 0.5 + 1e-12).astype(int)
    i0 = np.maximum(i0r, 0)
    i1 = np.minimum(i1r, grid - 1)
    j0 = np.maximum(j0r, 0)
    j1 = np.minimum(j1r, grid - 1)
    ok = (i0r <= i1r) & (j0r <= j1r) & (i0 <= i1) & (j0 <= j1)
    i0c, i1c, j0c, j1c = (np.where(ok, v, 0) for v in (i0, i1, j0, j1))

    def boxes(sat):
        return (sat[i1c + 1, j1c + 1] - sat[i0c, j1c + 1]
                - sat[i1c + 1, j0c] + sat[i0c, j0c])

    denom = boxes(hist_sat)
    ok &= denom > 0
    denom_safe = np.where(ok, denom, 1.0)
    outside = ((i1r - i0r + 1) * (j1r - j0r + 1)
               - (i1c - i0c + 1) * (j1c - j0c + 1))
    blank = np.maximum(boxes(blank_sat), 0.0) + outside
    obj = np.where(ok, np.round((denom - lambda_m * blank) / denom_safe, 12),
                   -np.inf)
    pick = np.lexsort((ty_g, tx_g, -sw_g * sh_g, -obj))[0]
    best_rect = (tx_g[pick], ty_g[pick], sw_g[pick], sh_g[pick])
    best_key = key(best_rect)

    # descent over rectangle edges: moving one edge changes center and size
    # together, so coverage can grow without passing through tied states;
    # acceptance is strict on (objective, area)
    t_x, t_y, s_w, s_h = best_rect
    edges = [t_x - s_w / 2, t_x + s_w / 2, t_y - s_h / 2, t_y + s_h / 2]

    def edge_key(e):
        rect = ((e[0] + e[1]) / 2, (e[2] + e[3]) / 2, e[1] - e[0], e[3] - e[2])
        obj = coverage_objective(hist_sat, blank_sat, lo, cell, rect, lambda_m)
        return (obj, rect[2] * rect[3])

    best_edge_key = edge_key(edges)
    steps = np.array([txs[1] - txs[0], txs[1] - txs[0],
                      tys[1] - tys[0], tys[1] - tys[0]]) / 2.0
    for _ in range(descent_rounds):
        for p in range(4):
            for delta in (+steps[p], -steps[p]):
                trial = list(edges)
                trial[p] += delta
                if trial[1] - trial[0] <= 0 or trial[3] - trial[2] <= 0:
                    continue
                kk = edge_key(trial)
                if kk > best_edge_key:
                    best_edge_key, edges = kk, trial
        steps /= 2.0
    if not np.isfinite(best_edge_key[0]):
        raise DegenerateGeometryError("no footprint with point mass found")

    t_x = (edges[0] + edges[1]) / 2
    t_y = (edges[2] + edges[3]) / 2
    s_w = edges[1] - edges[0]
    s_h = edges[3] - edges[2]
    best_key = key((t_x, t_y, s_w, s_h))
    t = np.array([-t_x, -t_y, -plane.offset])
    camera = VirtualOrthoCamera(Pose(Rotation.from_matrix(r), t),
                                float(s_w), float(s_h), image_px, image_px)
    return CameraInitResult(camera, float(best_key[0]), hist)


# ---------------------------------------------------------------------------
# correspondence mining

def harris_corners(gray: np.ndarray, max_corners: int = 512,
                   margin: int = 6, k: float = 0.06) -> np.ndarray:
    """Top Harris corner locations as (N, 2) integer (x, y) rows, ordered by
    response with deterministic tie-breaking."""
    gy, gx = np.gradient(gray)
    ixx = gaussian_filter(gx * gx, 1.5)
    ixy = gaussian_filter(gx * gy, 1.5)
    iyy = gaussian_filter(gy * gy, 1.5)
    resp = ixx * iyy - ixy * ixy - k * (ixx + iyy) ** 2
    peaks = (resp == maximum_filter(resp, size=3)) & (resp > 1e-10)
    peaks[:margin] = peaks[-margin:] = False
    peaks[:, :margin] = peaks[:, -margin:] = False
    ys, xs = np.nonzero(peaks)
    if ys.size == 0:
        return np.empty((0, 2), dtype=int)
    order = np.lexsort((xs, ys, -resp[ys, xs]))[:max_corners]
    return np.column_stack([xs[order], ys[order]])


def _descriptors(gray: np.ndarray, corners: np.ndarray,
                 step_px: float) -> np.ndarray:
    """8x8 normalized grayscale patches sampled step_px apart (bilinear)."""
    offs = (np.arange(8) - 3.5) * step_px
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    ys = corners[:, 1, None] + oy.ravel()[None, :]
    xs = corners[:, 0, None] + ox.ravel()[None, :]
    patches = map_coordinates(gray, [ys.ravel(), xs.ravel()], order=1,
                              mode="nearest").reshape(len(corners), 64)
    patches = patches - patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(patches, axis=1, keepdims=True)
    return patches / np.maximum(norms, 1e-9)


def _mutual_ratio_matches(d1: np.ndarray, d2: np.ndarray,
                          ratio: float = 0.8) -> list[tuple[int, int]]:
    """Mutual nearest neighbors passing the distance-ratio test."""
    if len(d1) == 0 or len(d2) == 0:
        return []
    sim = d1 @ d2.T
    dist = np.maximum(2.0 - 2.0 * sim, 0.0)  # squared L2 of unit vectors
    best2 = np.argmin(dist, axis=1)
    best1 = np.argmin(dist, axis=0)
    out = []
    for i, j in enumerate(best2):
        if best1[j] != i:
            continue
        row = dist[i].copy()
        d_best = row[j]
        row[j] = np.inf
        d_second = row.min() if row.size > 1 else np.inf
        if d_best <= (ratio ** 2) * d_second:
            out.append((i, int(j)))
    return out


def mine_correspondences(candidate_image, rendered_query: RenderedImage,
                         scene: GaussianScene, cand_gsd: float,
                         query_gsd: float, max_corners: int = 512,
                         window_m: float | None = None,
                         ratio: float = 0.8,
                         query_camera: VirtualOrthoCamera | None = None,
                         lift_tol: float | None = None) -> list[Correspondence2D3D]:
    """2D-3D matches between a candidate satellite patch and the rendered
    query view.

    Corners are detected and described on both images after low-passing to
    a common ground resolution; descriptors sample an 8x8 grid of fixed
    metric extent so differing ground sample distances still match.
    Matched query pixels are lifted to 3D through the visibility buffer;
    when the query camera is given, lifts whose primitive center
    reprojects more than lift_tol pixels from the corner are dropped
    (off-center splat centers would only add noise to the pose solve).
    Fewer than 4 matches yields an empty list (failed verification).
    """
    if rendered_query.visibility is None:
        raise ValueError("rendered query must carry a visibility buffer")
    cand_px = candidate_image.pixels if hasattr(candidate_image, "pixels") \
        else np.asarray(candidate_image)
    query_px = rendered_query.pixels

    if window_m is None:
        window_m = 32.0 * max(cand_gsd, query_gsd)
    step_m = window_m / 8.0
    band = 2.0 * max(cand_gsd, query_gsd)

    gray_c = embed.smooth_to_band(embed.grayscale(cand_px), cand_gsd, band)
    gray_q = embed.smooth_to_band(embed.grayscale(query_px), query_gsd, band)
    corners_c = harris_corners(gray_c, max_corners)
    corners_q = harris_corners(gray_q, max_corners)
    desc_c = _descriptors(gray_c, corners_c, step_m / cand_gsd) \
        if len(corners_c) else np.empty((0, 64))
    desc_q = _descriptors(gray_q, corners_q, step_m / query_gsd) \
        if len(corners_q) else np.empty((0, 64))

    matches = []
    for ic, iq in _mutual_ratio_matches(desc_c, desc_q, ratio):
        x, y = corners_q[iq]
        prim = int(rendered_query.visibility[y, x])
        if prim < 0:
            continue
        mean = scene.means[prim]
        if query_camera is not None and lift_tol is not None:
            p = query_camera.pose.apply(mean)
            rx = (p[0] / query_camera.s_w + 0.5) * query_camera.width - 0.5
            ry = (p[1] / query_camera.s_h + 0.5) * query_camera.height - 0.5
            if math.hypot(rx - x, ry - y) > lift_tol:
                continue
        matches.append(Correspondence2D3D(corners_c[ic].astype(float), mean))
    if len(matches) < 4:
        return []
    return matches


# ---------------------------------------------------------------------------
# candidate verification and the refinement step

def verify_candidate(cand: Candidate, prev_pose: Pose, n_m: int,
                     d_max: float, theta_max: float) -> bool:
    """Matching verification (inliers >= N_m) plus pose verification: the
    estimated camera must stay within d_max meters (x-y plane of the
    previous camera) and theta_max degrees of viewing direction."""
    if cand.pose is None or cand.inliers < n_m:
        return False
    delta_d, delta_theta = pose_offsets(prev_pose, cand.pose)
    return delta_d <= d_max and delta_theta <= theta_max


def refine_step(state: RefinementState, index: GalleryIndex,
                scene: GaussianScene, a: float = 0.8, lambda_s: float = 0.5,
                k: int = 10, n_m: int = 50, d_max: float | None = None,
                theta_max: float = 30.0, ransac_tol: float = 8.0,
                fusion_mode: str = "both", temperature: float = 0.002,
                rng: np.random.Generator | None = None) -> RefinementState:
    """One refinement iteration.

    Ranks the current feature, estimates and verifies candidate camera
    poses from 2D-3D matches, interpolates the virtual camera toward each
    verified candidate, re-renders, and fuses candidate features weighted
    by softmax of the (clamped) consistency products. The softmax
    temperature compensates for the compressed cosine range of the
    hand-crafted descriptor; without it near-tied products average the
    candidates uniformly. With zero verified candidates the state is
    carried over unchanged (stall).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if fusion_mode not in ("both", "self", "cross"):
        raise ValueError(f"unknown fusion mode '{fusion_mode}'")
    if rng is None:
        rng = np.random.default_rng(0)
    if d_max is None:
        d_max = 0.75 * math.hypot(state.camera.s_w, state.camera.s_h)

    ranked = rank(state.feature, index, k)
    have_images = index.images is not None and index.footprint_m is not None
    patch_gsd = (index.footprint_m / index.image_px) if have_images else None
    query_gsd = 0.5 * (state.camera.s_w / state.camera.width
                       + state.camera.s_h / state.camera.height)

    candidates = []
    for pid in ranked.ids:
        pos = index.position(pid)
        cand = Candidate(pid, index.features[pos])
        candidates.append(cand)
        if not have_images:
            continue
        matches = mine_correspondences(index.images[pos], state.render,
                                       scene, patch_gsd, query_gsd,
                                       query_camera=state.camera)
        if not matches:
            continue
        try:
            pose, inliers = solve_orthographic_pose(
                matches, (index.footprint_m, index.footprint_m), ransac_tol,
                (index.image_px, index.image_px), rng,
                prefer_axis=state.camera.pose.view_axis())
        except DegenerateGeometryError:
            continue
        cand.pose = pose
        cand.inliers = inliers
        cand.verified = verify_candidate(cand, state.camera.pose, n_m,
                                         d_max, theta_max)
        if not cand.verified:
            continue
        interp = interpolate_pose(state.camera.pose, pose, a)
        s_w = (1.0 - a) * state.camera.s_w + a * index.footprint_m
        s_h = (1.0 - a) * state.camera.s_h + a * index.footprint_m
        cand.camera = VirtualOrthoCamera(interp, s_w, s_h,
                                         state.camera.width,
                                         state.camera.height)
        cand.image = render(scene, cand.camera, want_visibility=True)
        cand.feature = embed.global_feature(cand.image.pixels)
        cand.sim_prev = float(cand.feature @ state.feature)
        cand.sim_gallery = float(cand.feature @ cand.gallery_feature)

    verified = [c for c in candidates if c.verified]
    if not verified:
        new_ranking = rank(state.feature, index)
        return RefinementState(state.iteration + 1, state.camera,
                               state.feature, state.feature, state.render,
                               candidates, new_ranking, None, stalled=True)

    if fusion_mode == "both":
        scores = np.array([c.sim_prev * c.sim_gallery for c in verified])
    elif fusion_mode == "self":
        scores = np.array([c.sim_prev for c in verified])
    else:
        scores = np.array([c.sim_gallery for c in verified])
    clamped = np.maximum(scores, 0.0)
    weights = np.exp((clamped - clamped.max()) / max(temperature, 1e-9))
    weights /= weights.sum()

    mixed = lambda_s * state.feature
    for w, c in zip(weights, verified):
        mixed = mixed + (1.0 - lambda_s) * w * c.feature
    feature = embed.normalize_feature(mixed) if np.linalg.norm(mixed) > 1e-12 \
        else state.feature

    best = verified[int(np.argmax(scores))]
    new_ranking = rank(feature, index)
    return RefinementState(state.iteration + 1, best.camera, feature,
                           state.feature, best.image, candidates,
                           new_ranking, weights, stalled=False)


# ---------------------------------------------------------------------------
# full pipeline

def _refit_views(drone_images, max_px: int = 64):
    """Color-refit targets at a coarser resolution: the fit only needs a
    few well-spread observations per primitive, and halving the target
    image side quarters the normal-equation assembly cost."""
    views = []
    for cam, img in drone_images:
        factor = 1
        while cam.width % (2 * factor) == 0 and cam.width // (2 * factor) >= max_px:
            factor *= 2
        if factor == 1:
            views.append((cam, img.pixels))
        else:
            small = embed.area_resize(img.pixels, cam.height // factor,
                                      cam.width // factor)
            views.append((cam.downsampled(factor), small))
    return views


def run_pipeline(query, index: GalleryIndex, iters: int = 2,
                 render_px: int = 256, a: float = 0.8, lambda_s: float = 0.5,
                 lambda_m: float = 100.0, k: int = 10, n_m: int = 50,
                 d_max: float | None = None, theta_max: float = 30.0,
                 ransac_tol: float = 8.0, plane_tol: float = 0.15,
                 fusion_mode: str = "both", temperature: float = 0.002,
                 seed: int = 0) -> PipelineResult:
    """Reconstruct, render, retrieve, and refine one query scene.

    Builds primitives from the sparse cloud, refits their colors against
    the drone views, estimates the ground plane, initializes the virtual
    satellite camera, fuses the anchor drone feature with the rendered
    feature for the initial retrieval, then applies `iters` refinement
    steps. Returns the full per-iteration trajectory.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x05]))
    scene_id = getattr(query, "scene_id", "scene")
    try:
        if len(index) == 0:
            raise ValueError("gallery index is empty")
        if len(query.sparse_points) < 10:
            raise PipelineError("sparse reconstruction too small")
        missing = [i for i, (_, img) in enumerate(query.drone_images)
                   if img is None]
        if missing:
            raise PipelineError(f"drone images without pixels: {missing}")

        scene = init_primitives_from_points(query.sparse_points,
                                            query.sparse_colors)
        scene = refit_colors(scene, _refit_views(query.drone_images))

        centers = np.array([cam.pose.center()
                            for cam, _ in query.drone_images])
        plane = fit_ground_plane(query.sparse_points, plane_tol, 512, rng,
                                 orient_toward=centers.mean(axis=0))
        init = init_virtual_camera(query.sparse_points, plane, render_px,
                                   lambda_m)
        render0 = render(scene, init.camera, want_visibility=True)

        anchor = embed.select_anchor_view([img for _, img in query.drone_images])
        f_anchor = embed.global_feature(anchor.pixels)
        f_rendered = embed.global_feature(render0.pixels)
        e0 = embed.fuse_initial(f_anchor, f_rendered)

        state = RefinementState(0, init.camera, e0, None, render0, [],
                                rank(e0, index))
        states = [state]
        for _ in range(iters):
            state = refine_step(state, index, scene, a=a, lambda_s=lambda_s,
                                k=k, n_m=n_m, d_max=d_max,
                                theta_max=theta_max, ransac_tol=ransac_tol,
                                fusion_mode=fusion_mode,
                                temperature=temperature, rng=rng)
            states.append(state)
        return PipelineResult(scene_id, states)
    except Exception as exc:
        if isinstance(exc, PipelineError):
            raise
        raise PipelineError(f"{scene_id}: {exc}") from exc


def dump_trajectory(result: PipelineResult, out_dir) -> None:
    """Write per-iteration renders and a JSON trace (poses, consistency
    tables, rankings) for one scene."""
    from .imgio import write_ppm

    os.makedirs(out_dir, exist_ok=True)
    trace = []
    for state in result.states:
        write_ppm(os.path.join(out_dir, f"render_t{state.iteration}.ppm"),
                  state.render.pixels)
        cam = state.camera
        trace.append({
            "iteration": state.iteration,
            "pose": {"quat": [float(x) for x in cam.pose.rotation.quat],
                     "t": [float(x) for x in cam.pose.translation]},
            "footprint": [cam.s_w, cam.s_h],
            "stalled": state.stalled,
            "candidates": [{
                "patch_id": c.patch_id if isinstance(c.patch_id, (int, str))
                            else str(c.patch_id),
                "inliers": c.inliers,
                "verified": c.verified,
                "self_consistency": c.sim_prev,
                "cross_consistency": c.sim_gallery,
            } for c in state.candidates],
            "ranking": [[pid if isinstance(pid, (int, str)) else str(pid),
                         float(s)]
                        for pid, s in zip(state.ranking.ids[:20],
                                          state.ranking.scores[:20])],
        })
    with open(os.path.join(out_dir, "trace.json"), "w") as f:
        json.dump({"scene_id": result.scene_id, "iterations": trace}, f,
                  indent=2, sort_keys=True)
