"""Anisotropic 3D Gaussian scene representation and a tile-based software
rasterizer with perspective (oblique drone) and orthographic (satellite)
projection models."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geo3d import Pose, Rotation

COV_LOWPASS = 0.3          # px^2 added to the projected covariance diagonal
ALPHA_MAX = 0.999
ALPHA_SKIP = 1.0 / 255.0
CULL_SIGMA = 3.5           # > sqrt(2 ln 255): bbox cut is below the alpha skip
DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)
SCENE_MAGIC = b"OSPL"
SCENE_VERSION = 1


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic Gaussian: mean (m), per-axis stddev (m), orientation,
    opacity in (0, 1], and RGB color in [0, 1]."""

    mean: np.ndarray
    scale: np.ndarray
    rotation: Rotation
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(3)
        scale = np.asarray(self.scale, dtype=float).reshape(3)
        color = np.asarray(self.color, dtype=float).reshape(3)
        if np.any(scale <= 0):
            raise ValueError("scale components must be positive")
        if not (0.0 < self.opacity <= 1.0):
            raise ValueError("opacity must be in (0, 1]")
        if np.any(color < 0) or np.any(color > 1):
            raise ValueError("color components must be in [0, 1]")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "color", color)

    def covariance(self) -> np.ndarray:
        """3D covariance R diag(S)^2 R^T."""
        r = self.rotation.as_matrix()
        return (r * self.scale ** 2) @ r.T


class GaussianScene:
    """Immutable array-of-structs collection of Gaussian primitives."""

    def __init__(self, means, scales, quats, opacities, colors):
        self.means = np.ascontiguousarray(means, dtype=float).reshape(-1, 3)
        n = self.means.shape[0]
        self.scales = np.ascontiguousarray(scales, dtype=float).reshape(n, 3)
        self.quats = np.ascontiguousarray(quats, dtype=float).reshape(n, 4)
        self.opacities = np.ascontiguousarray(opacities, dtype=float).reshape(n)
        self.colors = np.ascontiguousarray(colors, dtype=float).reshape(n, 3)
        norms = np.linalg.norm(self.quats, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ValueError("zero quaternion in scene")
        # skip when already unit so rebuilt scenes stay bit-identical
        if not np.allclose(norms, 1.0, rtol=0.0, atol=1e-12):
            self.quats = self.quats / norms

    @staticmethod
    def from_primitives(prims) -> "GaussianScene":
        prims = list(prims)
        return GaussianScene(
            np.array([p.mean for p in prims]).reshape(-1, 3),
            np.array([p.scale for p in prims]).reshape(-1, 3),
            np.array([p.rotation.quat for p in prims]).reshape(-1, 4),
            np.array([p.opacity for p in prims], dtype=float),
            np.array([p.color for p in prims]).reshape(-1, 3),
        )

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.means[i], self.scales[i],
                                 Rotation(self.quats[i]),
                                 float(self.opacities[i]), self.colors[i])

    def subset(self, mask) -> "GaussianScene":
        return GaussianScene(self.means[mask], self.scales[mask],
                             self.quats[mask], self.opacities[mask],
                             self.colors[mask])

    def with_colors(self, colors) -> "GaussianScene":
        return GaussianScene(self.means, self.scales, self.quats,
                             self.opacities, colors)

    def translated(self, offset) -> "GaussianScene":
        off = np.asarray(offset, dtype=float).reshape(3)
        return GaussianScene(self.means + off, self.scales, self.quats,
                             self.opacities, self.colors)

    def rotation_matrices(self) -> np.ndarray:
        """(N, 3, 3) rotation matrices from the unit quaternions."""
        w, x, y, z = self.quats.T
        m = np.empty((len(self), 3, 3))
        m[:, 0, 0] = 1 - 2 * (y * y + z * z)
        m[:, 0, 1] = 2 * (x * y - w * z)
        m[:, 0, 2] = 2 * (x * z + w * y)
        m[:, 1, 0] = 2 * (x * y + w * z)
        m[:, 1, 1] = 1 - 2 * (x * x + z * z)
        m[:, 1, 2] = 2 * (y * z - w * x)
        m[:, 2, 0] = 2 * (x * z - w * y)
        m[:, 2, 1] = 2 * (y * z + w * x)
        m[:, 2, 2] = 1 - 2 * (x * x + y * y)
        return m

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) world-frame covariances R diag(S)^2 R^T."""
        r = self.rotation_matrices()
        return np.einsum("nij,nj,nkj->nik", r, self.scales ** 2, r)


@dataclass(frozen=True)
class VirtualOrthoCamera:
    """Orthographic camera: pose is world-to-camera; the footprint
    s_w x s_h meters maps onto the full image."""

    pose: Pose
    s_w: float
    s_h: float
    width: int
    height: int

    def __post_init__(self):
        if self.s_w <= 0 or self.s_h <= 0:
            raise ValueError("footprint scales must be positive")

    def gsd(self) -> tuple[float, float]:
        """Ground sample distance (meters/pixel) along x and y."""
        return self.s_w / self.width, self.s_h / self.height


@dataclass(frozen=True)
class PerspectiveCamera:
    """Pinhole camera: pose is world-to-camera, looking along +z."""

    pose: Pose
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def downsampled(self, factor: int) -> "PerspectiveCamera":
        """Same view at 1/factor resolution (pixel centers preserved)."""
        if factor < 1 or self.width % factor or self.height % factor:
            raise ValueError("factor must divide the image size")
        return PerspectiveCamera(self.pose, self.fx / factor,
                                 self.fy / factor,
                                 (self.cx + 0.5) / factor - 0.5,
                                 (self.cy + 0.5) / factor - 0.5,
                                 self.width // factor, self.height // factor)

    @staticmethod
    def looking_at(position, target, width: int, height: int,
                   focal: float) -> "PerspectiveCamera":
        """Camera at position aimed at target, world +z treated as up."""
        position = np.asarray(position, dtype=float)
        z = np.asarray(target, dtype=float) - position
        nz = np.linalg.norm(z)
        if nz < 1e-9:
            raise ValueError("camera position coincides with target")
        z = z / nz
        up = np.array([0.0, 0.0, 1.0])
        x = np.cross(z, up)
        nx = np.linalg.norm(x)
        if nx < 1e-9:  # looking straight up/down: pick world x
            x = np.array([1.0, 0.0, 0.0])
        else:
            x = x / nx
        y = np.cross(z, x)
        r = np.vstack([x, y, z])
        pose = Pose(Rotation.from_matrix(r), -r @ position)
        return PerspectiveCamera(pose, focal, focal,
                                 (width - 1) / 2.0, (height - 1) / 2.0,
                                 width, height)


@dataclass
class RenderedImage:
    """H x W x 3 float raster in [0, 1], per-pixel accumulated alpha, and an
    optional per-pixel primitive-ID buffer (front-most contributor, -1 none)."""

    pixels: np.ndarray
    coverage: np.ndarray
    visibility: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def project_orthographic(x_cam, s_w: float, s_h: float) -> np.ndarray:
    """Orthographic camera-to-ray-space projection (2 x/s_w, 2 y/s_h);
    depth is ignored. Results in [-1, 1] fall on the image."""
    if s_w <= 0 or s_h <= 0:
        raise ValueError("footprint scales must be positive")
    x = np.asarray(x_cam, dtype=float)
    return np.stack([2.0 * x[..., 0] / s_w, 2.0 * x[..., 1] / s_h], axis=-1)


def ortho_jacobian(s_w: float, s_h: float) -> np.ndarray:
    """Jacobian of the orthographic projection: diag(2/s_w, 2/s_h, 0)."""
    if s_w <= 0 or s_h <= 0:
        raise ValueError("footprint scales must be positive")
    return np.diag([2.0 / s_w, 2.0 / s_h, 0.0])


def project_covariance(prim: GaussianPrimitive, cam_pose: Pose,
                       jac: np.ndarray) -> np.ndarray:
    """Project a primitive's 3D covariance to the image plane:
    upper-left 2x2 of J W Sigma W^T J^T, low-pass regularized."""
    w = cam_pose.rotation.as_matrix()
    full = jac @ w @ prim.covariance() @ w.T @ np.asarray(jac).T
    cov2 = full[:2, :2].copy()
    cov2[0, 0] += COV_LOWPASS
    cov2[1, 1] += COV_LOWPASS
    return cov2


def _project_scene(scene: GaussianScene, camera):
    """Project all primitives; returns pixel centers, 2D covariance entries,
    depths, and a validity mask."""
    r = camera.pose.rotation.as_matrix()
    cam_pts = scene.means @ r.T + camera.pose.translation
    n = len(scene)
    if isinstance(camera, VirtualOrthoCamera):
        px = (cam_pts[:, 0] / camera.s_w + 0.5) * camera.width - 0.5
        py = (cam_pts[:, 1] / camera.s_h + 0.5) * camera.height - 0.5
        depth = cam_pts[:, 2]
        valid = np.ones(n, dtype=bool)
        j = np.array([[camera.width / camera.s_w, 0.0, 0.0],
                      [0.0, camera.height / camera.s_h, 0.0]])
        m = np.broadcast_to(j @ r, (n, 2, 3))
    elif isinstance(camera, PerspectiveCamera):
        z = cam_pts[:, 2]
        valid = z > 1e-2
        zs = np.where(valid, z, 1.0)
        px = camera.fx * cam_pts[:, 0] / zs + camera.cx
        py = camera.fy * cam_pts[:, 1] / zs + camera.cy
        depth = z
        j = np.zeros((n, 2, 3))
        j[:, 0, 0] = camera.fx / zs
        j[:, 0, 2] = -camera.fx * cam_pts[:, 0] / zs ** 2
        j[:, 1, 1] = camera.fy / zs
        j[:, 1, 2] = -camera.fy * cam_pts[:, 1] / zs ** 2
        m = j @ r
    else:
        raise TypeError(f"unsupported camera type: {type(camera).__name__}")

    cov3 = scene.covariances()
    cov2 = np.einsum("nij,njk,nlk->nil", m, cov3, m)
    a = cov2[:, 0, 0] + COV_LOWPASS
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + COV_LOWPASS
    return px, py, depth, a, b, c, valid


def _composite(scene: GaussianScene, camera, want_visibility: bool,
               background, tile: int, collect_weights: bool):
    """Shared tile-based compositing core.

    Front-to-back alpha compositing of depth-sorted primitives; returns the
    rendered image and, when collect_weights is set, the per-pixel
    compositing weight of every contributing primitive in COO form.
    """
    h, w = camera.height, camera.width
    bg = np.asarray(background, dtype=float).reshape(3)
    pixels = np.empty((h, w, 3))
    pixels[:] = bg
    final_t = np.ones((h, w))
    vis = np.full((h, w), -1, dtype=np.int32) if want_visibility else None
    coo_pix: list[np.ndarray] = []
    coo_prim: list[np.ndarray] = []
    coo_w: list[np.ndarray] = []

    if len(scene) > 0:
        px, py, depth, ca, cb, cc, valid = _project_scene(scene, camera)
        det = ca * cc - cb * cb
        mid = 0.5 * (ca + cc)
        lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        radius = CULL_SIGMA * np.sqrt(lam_max)
        valid &= (det > 1e-12)
        valid &= (px + radius >= -0.5) & (px - radius <= w - 0.5)
        valid &= (py + radius >= -0.5) & (py - radius <= h - 0.5)
        idx = np.nonzero(valid)[0]
        if idx.size:
            # depth sort, stable so equal depths keep scene order
            order = idx[np.argsort(depth[idx], kind="stable")]
            px, py, radius = px[order], py[order], radius[order]
            inv_det = 1.0 / det[order]
            conic_a = cc[order] * inv_det
            conic_b = -cb[order] * inv_det
            conic_c = ca[order] * inv_det
            opac = scene.opacities[order]
            col = scene.colors[order]

            tiles_x = (w + tile - 1) // tile
            tiles_y = (h + tile - 1) // tile
            tx0 = np.clip(np.floor((px - radius) / tile).astype(np.int64), 0, tiles_x - 1)
            tx1 = np.clip(np.floor((px + radius) / tile).astype(np.int64), 0, tiles_x - 1)
            ty0 = np.clip(np.floor((py - radius) / tile).astype(np.int64), 0, tiles_y - 1)
            ty1 = np.clip(np.floor((py + radius) / tile).astype(np.int64), 0, tiles_y - 1)
            wx = tx1 - tx0 + 1
            counts = wx * (ty1 - ty0 + 1)
            starts = np.concatenate(([0], np.cumsum(counts)))
            total = int(starts[-1])
            rank = np.repeat(np.arange(order.size), counts)
            within = np.arange(total) - starts[rank]
            tile_id = ((ty0[rank] + within // wx[rank]) * tiles_x
                       + tx0[rank] + within % wx[rank])
            pair_order = np.lexsort((rank, tile_id))
            tile_sorted = tile_id[pair_order]
            rank_sorted = rank[pair_order]
            bounds = np.searchsorted(tile_sorted,
                                     np.arange(tiles_x * tiles_y + 1))

            for t in range(tiles_x * tiles_y):
                lo, hi = bounds[t], bounds[t + 1]
                if lo == hi:
                    continue
                sel = rank_sorted[lo:hi]
                y0 = (t // tiles_x) * tile
                x0 = (t % tiles_x) * tile
                th = min(tile, h - y0)
                tw = min(tile, w - x0)
                gx = (x0 + np.arange(tw))[None, :].repeat(th, axis=0).ravel()
                gy = (y0 + np.arange(th))[:, None].repeat(tw, axis=1).ravel()
                dx = px[sel, None] - gx[None, :]
                dy = py[sel, None] - gy[None, :]
                power = (-0.5 * (conic_a[sel, None] * dx * dx
                                 + conic_c[sel, None] * dy * dy)
                         - conic_b[sel, None] * dx * dy)
                alpha = opac[sel, None] * np.exp(power)
                np.minimum(alpha, ALPHA_MAX, out=alpha)
                alpha[alpha < ALPHA_SKIP] = 0.0
                trans = np.cumprod(1.0 - alpha, axis=0)
                t_prev = np.vstack([np.ones((1, alpha.shape[1])), trans[:-1]])
                wgt = alpha * t_prev
                tile_rgb = wgt.T @ col[sel]
                t_last = trans[-1]
                tile_pix = tile_rgb + t_last[:, None] * bg
                pixels[y0:y0 + th, x0:x0 + tw] = tile_pix.reshape(th, tw, 3)
                final_t[y0:y0 + th, x0:x0 + tw] = t_last.reshape(th, tw)
                if want_visibility:
                    # front-most dominant contributor: the primitive whose
                    # cumulative coverage first reaches half the final value
                    cum = 1.0 - trans
                    cond = (alpha > 0) & (cum >= 0.5 * cum[-1][None, :])
                    first = np.argmax(cond, axis=0)
                    hit = cond.any(axis=0)
                    vtile = np.where(hit, order[sel][first], -1).astype(np.int32)
                    vis[y0:y0 + th, x0:x0 + tw] = vtile.reshape(th, tw)
                if collect_weights:
                    nz_p, nz_q = np.nonzero(alpha)
                    flat = (gy[nz_q] * w + gx[nz_q])
                    coo_pix.append(flat)
                    coo_prim.append(order[sel][nz_p])
                    coo_w.append(wgt[nz_p, nz_q])

    image = RenderedImage(np.clip(pixels, 0.0, 1.0), 1.0 - final_t, vis)
    if not collect_weights:
        return image
    if coo_pix:
        pix_idx = np.concatenate(coo_pix)
        prim_idx = np.concatenate(coo_prim)
        weights = np.concatenate(coo_w)
    else:
        pix_idx = np.empty(0, dtype=np.int64)
        prim_idx = np.empty(0, dtype=np.int64)
        weights = np.empty(0)
    return image, pix_idx, prim_idx, weights


def render(scene: GaussianScene, camera, want_visibility: bool = False,
           background=DEFAULT_BACKGROUND, tile: int = 16) -> RenderedImage:
    """Render the scene through an orthographic or perspective camera.

    Primitives are composited front-to-back per pixel with alpha
    o_i * exp(-0.5 d^T (Sigma2D)^-1 d), clamped at 0.999; contributions
    below 1/255 are skipped. Residual transmittance is filled with the
    background color; the coverage channel records accumulated alpha.
    """
    return _composite(scene, camera, want_visibility, background, tile, False)


def compositing_weights(scene: GaussianScene, camera, tile: int = 16):
    """Per-pixel compositing weights w_i = alpha_i * prod(1 - alpha_j).

    Returns (image, pixel_index, primitive_index, weight) where the last
    three are parallel COO arrays over flattened pixel indices. The weights
    reproduce the render exactly: pixel = sum w_i c_i + T_final * bg.
    """
    return _composite(scene, camera, False, DEFAULT_BACKGROUND, tile, True)


def init_primitives_from_points(points, colors, opacity: float = 0.8,
                                scale_clamp: tuple[float, float] = (0.01, 2.0)
                                ) -> GaussianScene:
    """One isotropic primitive per colored point.

    Scale is the mean distance to the 3 nearest neighbors, clamped to
    scale_clamp; orientation identity; opacity fixed.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    cols = np.asarray(colors, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    if n < 1:
        raise ValueError("need at least one point")
    if n == 1:
        mean_d = np.zeros(1)
    else:
        k = min(4, n)
        dist, _ = cKDTree(pts).query(pts, k=k)
        mean_d = dist[:, 1:k].mean(axis=1)
    scale = np.clip(mean_d, scale_clamp[0], scale_clamp[1])
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianScene(pts, np.repeat(scale[:, None], 3, axis=1), quats,
                         np.full(n, float(opacity)), cols)


def refit_colors(scene: GaussianScene, views, damping: float = 1e-4,
                 background=DEFAULT_BACKGROUND) -> GaussianScene:
    """Re-solve primitive colors against target images, geometry fixed.

    Compositing weights are computed once per view; colors then solve the
    damped normal equations sum_i w_i c_i ~= C_target - T_final * bg over
    all pixels of all views. Damping pulls toward the current colors, so
    the photometric L2 error cannot increase. Output clamped to [0, 1].
    """
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    views = list(views)
    if not views:
        raise ValueError("need at least one view")
    n = len(scene)
    bg = np.asarray(background, dtype=float).reshape(3)

    pix_parts, prim_parts, w_parts, rhs_rows = [], [], [], []
    row_base = 0
    for camera, target in views:
        target = np.asarray(target, dtype=float).reshape(camera.height,
                                                         camera.width, 3)
        image, pix_idx, prim_idx, weights = compositing_weights(scene, camera)
        resid = target - (1.0 - image.coverage)[:, :, None] * bg
        pix_parts.append(pix_idx + row_base)
        prim_parts.append(prim_idx)
        w_parts.append(weights)
        rhs_rows.append(resid.reshape(-1, 3))
        row_base += camera.height * camera.width
    a = sp.coo_matrix(
        (np.concatenate(w_parts),
         (np.concatenate(pix_parts), np.concatenate(prim_parts))),
        shape=(row_base, n)).tocsr()
    b_vec = np.vstack(rhs_rows)

    gram = (a.T @ a).tocsr() + damping * sp.identity(n, format="csr")
    rhs = a.T @ b_vec + damping * scene.colors
    if n <= 4000:
        solve = spla.splu(gram.tocsc())
        new_colors = np.column_stack([solve.solve(rhs[:, c])
                                      for c in range(3)])
    else:
        # Jacobi-preconditioned CG warm-started at the current colors: the
        # damped quadratic decreases monotonically from there, so the
        # photometric guarantee carries over to the iterative solve.
        precond = sp.diags(1.0 / gram.diagonal())
        new_colors = np.empty((n, 3))
        for c in range(3):
            new_colors[:, c], _ = spla.cg(gram, rhs[:, c],
                                          x0=scene.colors[:, c],
                                          rtol=1e-5, atol=0.0,
                                          maxiter=150, M=precond)
    return scene.with_colors(np.clip(new_colors, 0.0, 1.0))


def save_scene(path, scene: GaussianScene) -> None:
    """Write the versioned little-endian binary scene format: magic 'OSPL',
    u32 version, u64 count, then 14 float32 per primitive."""
    rec = np.hstack([scene.means, scene.scales, scene.quats,
                     scene.opacities[:, None], scene.colors]).astype("<f4")
    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<IQ", SCENE_VERSION, len(scene)))
        f.write(rec.tobytes())


def load_scene(path) -> GaussianScene:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SCENE_MAGIC:
            raise ValueError(f"not a scene file (bad magic {magic!r})")
        version, count = struct.unpack("<IQ", f.read(12))
        if version != SCENE_VERSION:
            raise ValueError(f"unsupported scene version {version}")
        data = np.frombuffer(f.read(count * 14 * 4), dtype="<f4")
    if data.size != count * 14:
        raise ValueError("truncated scene file")
    rec = data.reshape(count, 14).astype(float)
    return GaussianScene(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10],
                         rec[:, 10], rec[:, 11:14])
