"""Deterministic synthetic benchmark worlds (procedural city blocks),
satellite gallery tiling, drone-orbit query scenes, and ingestion of real
reconstructions in COLMAP text format."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geo3d import Pose, Rotation
from .splat import (GaussianScene, PerspectiveCamera, RenderedImage,
                    VirtualOrthoCamera, init_primitives_from_points, render)

GROUND_DENSITY = 4.0     # points / m^2
BUILDING_DENSITY = 16.0  # points / m^2
DRONE_IMAGE_PX = 128
DRONE_FOCAL_FACTOR = 1.375   # focal = factor * width  (~40 deg FOV)


@dataclass
class Building:
    center: np.ndarray     # x, y
    size: np.ndarray       # width, depth (m)
    height: float


@dataclass
class SyntheticWorld:
    """Colored point cloud of a procedural city block on the z=0 plane."""

    points: np.ndarray
    colors: np.ndarray
    extent: float
    buildings: list[Building]
    seed: int
    _scene: GaussianScene | None = field(default=None, repr=False)

    def scene(self) -> GaussianScene:
        """Gaussian primitives for the whole world (built once, cached)."""
        if self._scene is None:
            self._scene = init_primitives_from_points(self.points, self.colors)
        return self._scene


@dataclass
class GalleryPatch:
    image: RenderedImage
    geotag: np.ndarray            # patch center, world meters
    gsd: float                    # meters / pixel
    patch_id: int
    camera: VirtualOrthoCamera


@dataclass
class QueryScene:
    """Multi-view drone observation of one scene: oblique images with their
    cameras, an SfM-style sparse colored cloud, and the true geotag
    (None for ingested real data)."""

    drone_images: list
    sparse_points: np.ndarray
    sparse_colors: np.ndarray
    geotag: np.ndarray | None
    scene_id: str


def _smooth_field(rng: np.random.Generator, xy: np.ndarray, n_waves: int = 4):
    """Sum of random plane waves in [0,1]; cheap deterministic texture."""
    out = np.full(xy.shape[0], 0.5)
    for _ in range(n_waves):
        freq = rng.uniform(0.02, 0.25)
        theta = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        k = freq * np.array([np.cos(theta), np.sin(theta)])
        out += rng.uniform(0.05, 0.2) * np.sin(xy @ k * 2 * np.pi + phase)
    return np.clip(out, 0.0, 1.0)


def generate_world(seed: int, extent: float = 80.0,
                   building_count: int = 8) -> SyntheticWorld:
    """Procedural city block: textured ground points on a jittered grid plus
    box buildings with per-face colors and checkered roof patterns.

    Same seed regenerates a bit-identical cloud. Ground density is 4 pts/m^2
    and building surfaces 16 pts/m^2.
    """
    if extent <= 0:
        raise ValueError("extent must be positive")
    if building_count < 1:
        raise ValueError("building_count must be >= 1")
    rng = np.random.default_rng(seed)

    # ground: jittered grid at 0.5 m spacing
    spacing = 1.0 / math.sqrt(GROUND_DENSITY)
    n_side = int(round(extent / spacing))
    gx, gy = np.meshgrid((np.arange(n_side) + 0.5) * spacing,
                         (np.arange(n_side) + 0.5) * spacing)
    ground_xy = np.column_stack([gx.ravel(), gy.ravel()])
    ground_xy = ground_xy + rng.uniform(-0.3, 0.3, ground_xy.shape) * spacing
    ground_xy = np.clip(ground_xy, 0.0, extent)
    ground = np.column_stack([ground_xy, np.zeros(len(ground_xy))])

    base = rng.uniform(0.15, 0.75, size=3)
    ground_col = np.empty((len(ground_xy), 3))
    for c in range(3):
        ground_col[:, c] = np.clip(
            base[c] * _smooth_field(rng, ground_xy) * 2.0, 0.0, 1.0)
    ground_col += rng.uniform(-0.03, 0.03, ground_col.shape)
    ground_col = np.clip(ground_col, 0.0, 1.0)

    # roads: a few gray bands along each axis
    road_col = np.array([0.32, 0.32, 0.34])
    for axis in (0, 1):
        for pos in rng.uniform(0.1 * extent, 0.9 * extent, size=3):
            mask = np.abs(ground_xy[:, axis] - pos) < 1.5
            ground_col[mask] = road_col + rng.uniform(-0.02, 0.02)

    # blotches: meter-scale colored patches (bushes, cars, court markings);
    # these give both views corner-like structure to match on
    n_blotch = max(8, int(extent * extent * 0.12))
    b_center = rng.uniform(0, extent, (n_blotch, 2))
    b_radius = rng.uniform(0.6, 1.8, n_blotch)
    b_color = rng.uniform(0.05, 0.95, (n_blotch, 3))
    tree = cKDTree(ground_xy)
    for i in range(n_blotch):
        hit = tree.query_ball_point(b_center[i], b_radius[i])
        if hit:
            ground_col[hit] = b_color[i]

    points = [ground]
    colors = [ground_col]

    # buildings: rejection-placed axis-aligned boxes
    buildings: list[Building] = []
    bspace = 1.0 / math.sqrt(BUILDING_DENSITY)
    for _ in range(building_count):
        placed = None
        for _attempt in range(100):
            size = rng.uniform(6.0, 12.0, size=2)
            margin = size / 2 + 2.0
            center = rng.uniform(margin, extent - margin)
            lo, hi = center - size / 2, center + size / 2
            if all(np.any(lo > b.center + b.size / 2 + 1.0)
                   or np.any(hi < b.center - b.size / 2 - 1.0)
                   for b in buildings):
                placed = (center, size)
                break
        if placed is None:
            placed = (center, size)  # accept the last try; overlap is harmless
        center, size = placed
        height = rng.uniform(3.0, 9.0)
        buildings.append(Building(center, size, height))

        wall_col = rng.uniform(0.25, 0.95, size=3)
        roof_a = rng.uniform(0.2, 0.95, size=3)
        roof_b = rng.uniform(0.2, 0.95, size=3)
        checker = rng.uniform(1.0, 3.0)

        # roof grid at z = height with checker pattern
        nx = max(2, int(round(size[0] / bspace)))
        ny = max(2, int(round(size[1] / bspace)))
        rx, ry = np.meshgrid(np.linspace(0, size[0], nx), np.linspace(0, size[1], ny))
        roof_xy = np.column_stack([rx.ravel(), ry.ravel()])
        roof_xy = roof_xy + rng.uniform(-0.3, 0.3, roof_xy.shape) * bspace
        roof_xy = np.clip(roof_xy, 0, size) + (center - size / 2)
        parity = (np.floor(roof_xy[:, 0] / checker)
                  + np.floor(roof_xy[:, 1] / checker)) % 2
        roof_col = np.where(parity[:, None] > 0.5, roof_a, roof_b)
        points.append(np.column_stack([roof_xy, np.full(len(roof_xy), height)]))
        colors.append(roof_col)

        # four walls
        nz = max(2, int(round(height / bspace)))
        for axis, side in ((0, 0), (0, 1), (1, 0), (1, 1)):
            along = size[1 - axis]
            na = max(2, int(round(along / bspace)))
            wa, wz = np.meshgrid(np.linspace(0, along, na),
                                 np.linspace(height / nz, height, nz))
            wall = np.empty((wa.size, 3))
            wall[:, 1 - axis] = wa.ravel() + (center[1 - axis] - along / 2)
            wall[:, axis] = center[axis] + (size[axis] / 2 if side else -size[axis] / 2)
            wall[:, 2] = wz.ravel()
            wall[:, :2] += rng.uniform(-0.2, 0.2, (wa.size, 2)) * bspace
            wall[:, :2] = np.clip(wall[:, :2], 0.0, extent)
            shade = 0.75 + 0.25 * rng.random(wa.size)
            points.append(wall)
            colors.append(np.clip(wall_col * shade[:, None]
                                  + rng.uniform(-0.02, 0.02, (wa.size, 3)), 0, 1))

    return SyntheticWorld(np.vstack(points), np.vstack(colors),
                          float(extent), buildings, int(seed))


def nadir_ortho_camera(center_xy, footprint_w: float, footprint_h: float,
                       image_px: int) -> VirtualOrthoCamera:
    """Straight-down orthographic camera over a world-plane footprint.

    North (+y) maps to the top image row; the rotation matrix is exact so
    renders are bitwise reproducible under view-axis translation.
    """
    r = np.array([[1.0, 0.0, 0.0],
                  [0.0, -1.0, 0.0],
                  [0.0, 0.0, -1.0]])
    t = np.array([-float(center_xy[0]), float(center_xy[1]), 0.0])
    return VirtualOrthoCamera(Pose(Rotation.from_matrix(r), t),
                              footprint_w, footprint_h, image_px, image_px)


def generate_gallery(world: SyntheticWorld, patch_size_m: float,
                     stride_m: float, image_px: int) -> list[GalleryPatch]:
    """Orthographic renders of the world on a regular grid of patch centers,
    ordered by (row, col). stride < patch size gives overlapping tiles."""
    if patch_size_m <= 0 or stride_m <= 0:
        raise ValueError("patch size and stride must be positive")
    scene = world.scene()
    max_scale = float(scene.scales.max()) if len(scene) else 0.0

    centers = []
    c = patch_size_m / 2.0
    while c + patch_size_m / 2.0 <= world.extent + 1e-9:
        centers.append(c)
        c += stride_m
    patches = []
    for row, cy in enumerate(centers):
        for col, cx in enumerate(centers):
            cam = nadir_ortho_camera((cx, cy), patch_size_m, patch_size_m,
                                     image_px)
            half = patch_size_m / 2.0 + 3.0 * max_scale
            mask = ((np.abs(scene.means[:, 0] - cx) <= half)
                    & (np.abs(scene.means[:, 1] - cy) <= half))
            image = render(scene.subset(mask), cam)
            patches.append(GalleryPatch(image, np.array([cx, cy]),
                                        patch_size_m / image_px,
                                        row * len(centers) + col, cam))
    return patches


def drone_orbit_cameras(scene_center, n_views: int, orbit_radius: float,
                        altitude: float, rng: np.random.Generator,
                        image_px: int = DRONE_IMAGE_PX) -> list[PerspectiveCamera]:
    """Cameras evenly spaced on a circular orbit, aimed at the scene center,
    pitched ~45 degrees down with +-5 degree seeded jitter."""
    center = np.asarray(scene_center, dtype=float)
    base_pitch = math.atan2(altitude, orbit_radius)
    cams = []
    for i in range(n_views):
        phi = 2.0 * math.pi * i / n_views
        pitch = base_pitch + math.radians(rng.uniform(-5.0, 5.0))
        z = orbit_radius * math.tan(pitch)
        pos = np.array([center[0] + orbit_radius * math.cos(phi),
                        center[1] + orbit_radius * math.sin(phi), z])
        target = np.array([center[0], center[1], 0.0])
        cams.append(PerspectiveCamera.looking_at(
            pos, target, image_px, image_px, DRONE_FOCAL_FACTOR * image_px))
    return cams


def _in_view_mask(points: np.ndarray, cam: PerspectiveCamera) -> np.ndarray:
    cam_pts = points @ cam.pose.rotation.as_matrix().T + cam.pose.translation
    z = cam_pts[:, 2]
    ok = z > 0.1
    zs = np.where(ok, z, 1.0)
    px = cam.fx * cam_pts[:, 0] / zs + cam.cx
    py = cam.fy * cam_pts[:, 1] / zs + cam.cy
    return ok & (px >= 0) & (px <= cam.width - 1) & (py >= 0) & (py <= cam.height - 1)


def generate_query(world: SyntheticWorld, scene_center, n_views: int,
                   orbit_radius: float = 22.0, altitude: float = 22.0,
                   seed: int = 0, image_px: int = DRONE_IMAGE_PX,
                   max_sparse: int = 0,
                   scene_id: str | None = None) -> QueryScene:
    """Render a drone orbit over scene_center and derive the SfM-style
    sparse cloud: world points visible in at least two views (subsampled
    when max_sparse > 0). The true geotag is the scene center.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(seed)
    cams = drone_orbit_cameras(scene_center, n_views, orbit_radius, altitude,
                               rng, image_px)
    scene = world.scene()

    vis_count = np.zeros(len(world.points), dtype=np.int32)
    cull_masks = []
    for cam in cams:
        m = _in_view_mask(world.points, cam)
        vis_count += m
        cull_masks.append(m)

    images = []
    for cam, m in zip(cams, cull_masks):
        image = render(scene.subset(m), cam)
        # per-view exposure/white-balance jitter: fewer views average out
        # less of it, which is what makes added views genuinely help
        gain = rng.uniform(0.93, 1.07, size=3)
        shift = rng.uniform(-0.02, 0.02, size=3)
        image.pixels = np.clip(image.pixels * gain + shift, 0.0, 1.0)
        images.append((cam, image))

    eligible = np.nonzero(vis_count >= 2)[0]
    if max_sparse > 0 and eligible.size > max_sparse:
        eligible = eligible[np.sort(rng.choice(eligible.size, size=max_sparse,
                                               replace=False))]
    sparse_pts = world.points[eligible].copy()
    sparse_col = world.colors[eligible].copy()
    return QueryScene(images, sparse_pts, sparse_col,
                      np.asarray(scene_center, dtype=float).reshape(2),
                      scene_id or f"scene_{seed}")


def subset_views(query: QueryScene, n_views: int,
                 seed: int = 0, max_sparse: int = 0) -> QueryScene:
    """Evenly select n_views images from a query's drone sequence and
    rebuild the sparse cloud from the surviving views' covisibility."""
    total = len(query.drone_images)
    if not (1 <= n_views <= total):
        raise ValueError(f"n_views must be in [1, {total}]")
    idx = np.linspace(0, total - 1, n_views).round().astype(int)
    images = [query.drone_images[i] for i in idx]
    vis = np.zeros(len(query.sparse_points), dtype=np.int32)
    for cam, _ in images:
        if len(query.sparse_points):
            vis += _in_view_mask(query.sparse_points, cam)
    keep = np.nonzero(vis >= 2)[0]
    rng = np.random.default_rng(seed)
    if max_sparse > 0 and keep.size > max_sparse:
        keep = keep[np.sort(rng.choice(keep.size, size=max_sparse, replace=False))]
    return QueryScene(images, query.sparse_points[keep],
                      query.sparse_colors[keep], query.geotag,
                      f"{query.scene_id}_nv{n_views}")


class ColmapParseError(ValueError):
    """Raised for malformed COLMAP text files; names file and line."""


class UnsupportedCameraModelError(ValueError):
    """Raised for COLMAP camera models other than PINHOLE / SIMPLE_PINHOLE."""


def _data_lines(path):
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if line.strip().startswith("#"):
                continue
            yield ln, line


def _parse_floats(path, ln, fields, count):
    try:
        return [float(x) for x in fields[:count]]
    except ValueError as exc:
        raise ColmapParseError(f"{path}:{ln}: {exc}") from None


def ingest_colmap(points3d_path, images_path, cameras_path,
                  images_dir=None) -> QueryScene:
    """Read a COLMAP text-format reconstruction into a QueryScene.

    points3D.txt supplies the sparse colored cloud, images.txt the
    world-to-camera poses (QW QX QY QZ TX TY TZ), cameras.txt the PINHOLE /
    SIMPLE_PINHOLE intrinsics. COLMAP's world-to-camera convention matches
    this package's Pose directly. The geotag is left unset. When images_dir
    is given, drone image pixels are loaded from the named files if present.
    """
    cameras = {}
    for ln, line in _data_lines(cameras_path):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 4:
            raise ColmapParseError(f"{cameras_path}:{ln}: expected "
                                   f"CAMERA_ID MODEL WIDTH HEIGHT PARAMS...")
        try:
            cam_id = int(fields[0])
            width, height = int(fields[2]), int(fields[3])
        except ValueError as exc:
            raise ColmapParseError(f"{cameras_path}:{ln}: {exc}") from None
        model = fields[1]
        params = _parse_floats(cameras_path, ln, fields[4:], len(fields) - 4)
        if model == "PINHOLE":
            if len(params) < 4:
                raise ColmapParseError(f"{cameras_path}:{ln}: PINHOLE needs "
                                       f"fx fy cx cy")
            fx, fy, cx, cy = params[:4]
        elif model == "SIMPLE_PINHOLE":
            if len(params) < 3:
                raise ColmapParseError(f"{cameras_path}:{ln}: SIMPLE_PINHOLE "
                                       f"needs f cx cy")
            fx = fy = params[0]
            cx, cy = params[1], params[2]
        else:
            raise UnsupportedCameraModelError(
                f"{cameras_path}:{ln}: unsupported camera model '{model}'")
        cameras[cam_id] = PerspectiveCamera(Pose.identity(), fx, fy, cx, cy,
                                            width, height)

    drone_images = []
    expect_points_line = False
    for ln, line in _data_lines(images_path):
        if expect_points_line:
            expect_points_line = False  # 2D observations; not needed here
            continue
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 10:
            raise ColmapParseError(
                f"{images_path}:{ln}: expected IMAGE_ID QW QX QY QZ TX TY TZ "
                f"CAMERA_ID NAME")
        vals = _parse_floats(images_path, ln, fields[1:9], 8)
        qw, qx, qy, qz, tx, ty, tz = vals[:7]
        try:
            cam_id = int(fields[8])
        except ValueError as exc:
            raise ColmapParseError(f"{images_path}:{ln}: {exc}") from None
        name = fields[9]
        if cam_id not in cameras:
            raise ColmapParseError(f"{images_path}:{ln}: unknown camera id "
                                   f"{cam_id}")
        intr = cameras[cam_id]
        pose = Pose(Rotation((qw, qx, qy, qz)), (tx, ty, tz))
        cam = PerspectiveCamera(pose, intr.fx, intr.fy, intr.cx, intr.cy,
                                intr.width, intr.height)
        image = None
        if images_dir is not None:
            candidate = os.path.join(images_dir, name)
            if os.path.exists(candidate):
                from .imgio import read_image
                pixels = read_image(candidate)
                image = RenderedImage(pixels, np.ones(pixels.shape[:2]))
        drone_images.append((cam, image))
        expect_points_line = True

    pts, cols = [], []
    for ln, line in _data_lines(points3d_path):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 7:
            raise ColmapParseError(
                f"{points3d_path}:{ln}: expected POINT3D_ID X Y Z R G B ...")
        vals = _parse_floats(points3d_path, ln, fields[1:7], 6)
        pts.append(vals[:3])
        cols.append([v / 255.0 for v in vals[3:6]])

    if not drone_images:
        raise ColmapParseError(f"{images_path}: no images found")
    return QueryScene(drone_images,
                      np.array(pts, dtype=float).reshape(-1, 3),
                      np.array(cols, dtype=float).reshape(-1, 3),
                      None, "colmap_ingest")
