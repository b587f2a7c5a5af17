"""Rigid-body geometry: rotations, poses, fractional pose interpolation,
robust plane fitting, and orthographic absolute-pose estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateGeometryError(ValueError):
    """A geometric estimation problem has no well-posed solution
    (collinear points, rank-deficient configuration, too few inliers)."""


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError("expected finite 3-vector")
    return a


@dataclass(frozen=True)
class Rotation:
    """3D rotation stored as a unit quaternion (w, x, y, z)."""

    quat: np.ndarray

    def __init__(self, quat) -> None:
        q = np.asarray(quat, dtype=float).reshape(4)
        if not np.all(np.isfinite(q)):
            raise ValueError("quaternion must be finite")
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("quaternion must be nonzero")
        object.__setattr__(self, "quat", q / n)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation((1.0, 0.0, 0.0, 0.0))

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Rotation":
        ax = _as_vec3(axis)
        n = np.linalg.norm(ax)
        if n < 1e-12:
            return Rotation.identity()
        ax = ax / n
        h = 0.5 * float(angle)
        return Rotation(np.concatenate(([math.cos(h)], math.sin(h) * ax)))

    @staticmethod
    def from_rotvec(vec) -> "Rotation":
        v = _as_vec3(vec)
        angle = float(np.linalg.norm(v))
        if angle < 1e-12:
            # first-order quaternion keeps exp(log(R)) exact for tiny angles
            return Rotation(np.concatenate(([1.0], 0.5 * v)))
        return Rotation.from_axis_angle(v / angle, angle)

    @staticmethod
    def from_matrix(m) -> "Rotation":
        """Shepperd's method; numerically stable for all rotation matrices."""
        m = np.asarray(m, dtype=float).reshape(3, 3)
        t = m[0, 0] + m[1, 1] + m[2, 2]
        if t > 0:
            s = math.sqrt(t + 1.0) * 2.0
            q = (0.25 * s,
                 (m[2, 1] - m[1, 2]) / s,
                 (m[0, 2] - m[2, 0]) / s,
                 (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = ((m[2, 1] - m[1, 2]) / s,
                 0.25 * s,
                 (m[0, 1] + m[1, 0]) / s,
                 (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = ((m[0, 2] - m[2, 0]) / s,
                 (m[0, 1] + m[1, 0]) / s,
                 0.25 * s,
                 (m[1, 2] + m[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = ((m[1, 0] - m[0, 1]) / s,
                 (m[0, 2] + m[2, 0]) / s,
                 (m[1, 2] + m[2, 1]) / s,
                 0.25 * s)
        return Rotation(q)

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.quat
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def as_rotvec(self) -> np.ndarray:
        """Rotation logarithm (axis * angle, angle in [0, pi]).

        Within 1e-7 of pi the axis sign is ambiguous; the canonical axis is
        taken from the largest diagonal element of the rotation matrix.
        """
        m = self.as_matrix()
        cos_angle = min(1.0, max(-1.0, 0.5 * (np.trace(m) - 1.0)))
        angle = math.acos(cos_angle)
        if angle < 1e-9:
            # first-order: skew part / 2
            return 0.5 * np.array([m[2, 1] - m[1, 2],
                                   m[0, 2] - m[2, 0],
                                   m[1, 0] - m[0, 1]])
        if math.pi - angle < 1e-7:
            diag = np.diag(m)
            i = int(np.argmax(diag))
            axis = np.zeros(3)
            axis[i] = math.sqrt(max(0.0, (diag[i] + 1.0) * 0.5))
            j, k = (i + 1) % 3, (i + 2) % 3
            axis[j] = m[i, j] / (2.0 * axis[i])
            axis[k] = m[i, k] / (2.0 * axis[i])
            return angle * axis / np.linalg.norm(axis)
        scale = angle / (2.0 * math.sin(angle))
        return scale * np.array([m[2, 1] - m[1, 2],
                                 m[0, 2] - m[2, 0],
                                 m[1, 0] - m[0, 1]])

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        w = min(1.0, abs(float(self.quat[0])))
        return 2.0 * math.acos(w)

    def compose(self, other: "Rotation") -> "Rotation":
        """Quaternion product: (self * other), applying other first."""
        w1, x1, y1, z1 = self.quat
        w2, x2, y2, z2 = other.quat
        return Rotation((
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.quat
        return Rotation((w, -x, -y, -z))

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return v @ self.as_matrix().T


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform: x_cam = R @ x_world + t."""

    rotation: Rotation
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", _as_vec3(self.translation))

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.as_matrix().T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """(self * other): apply other first, then self."""
        return Pose(self.rotation.compose(other.rotation),
                    self.rotation.apply(other.translation) + self.translation)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def center(self) -> np.ndarray:
        """Camera center in world coordinates: -R^T t."""
        return -self.rotation.inverse().apply(self.translation)

    def view_axis(self) -> np.ndarray:
        """Camera +z axis (viewing direction) in world coordinates."""
        return self.rotation.as_matrix()[2]


@dataclass(frozen=True)
class Plane:
    """Plane {x : normal . x + offset = 0} with unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = _as_vec3(self.normal)
        ln = np.linalg.norm(n)
        if ln < 1e-12:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "normal", n / ln)
        object.__setattr__(self, "offset", float(self.offset) / ln)

    def signed_distance(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.normal + self.offset


@dataclass(frozen=True)
class Correspondence2D3D:
    """A 2D image observation (pixels) of a 3D world point (meters)."""

    image_point: np.ndarray
    world_point: np.ndarray

    def __post_init__(self):
        ip = np.asarray(self.image_point, dtype=float).reshape(2)
        wp = _as_vec3(self.world_point)
        if not np.all(np.isfinite(ip)):
            raise ValueError("image point must be finite")
        object.__setattr__(self, "image_point", ip)
        object.__setattr__(self, "world_point", wp)


def interpolate_pose(prev: Pose, cand: Pose, a: float) -> Pose:
    """Fractional SE(3) interpolation from prev (a=0) to cand (a=1).

    The relative rotation is taken to the power a through the rotation
    log/exp map, and the camera center is blended linearly:

        R = (R_cand R_prev^T)^a R_prev
        t = R ((1-a) R_prev^T t_prev + a R_cand^T t_cand)
    """
    a = float(a)
    if not (0.0 <= a <= 1.0) or not math.isfinite(a):
        raise ValueError(f"interpolation weight must be in [0, 1], got {a}")
    if a == 0.0:
        return prev
    if a == 1.0:
        return cand
    rel = cand.rotation.compose(prev.rotation.inverse())
    r_bar = Rotation.from_rotvec(a * rel.as_rotvec()).compose(prev.rotation)
    c_blend = ((1.0 - a) * prev.rotation.inverse().apply(prev.translation)
               + a * cand.rotation.inverse().apply(cand.translation))
    return Pose(r_bar, r_bar.apply(c_blend))


def pose_offsets(prev: Pose, cand: Pose) -> tuple[float, float]:
    """Planar and angular offset of cand relative to prev.

    Returns (delta_d, delta_theta): the x-y distance of cand's camera
    center expressed in prev's camera frame (meters), and the angle
    between the two viewing directions (degrees).
    """
    center_in_prev = prev.apply(cand.center())
    delta_d = float(np.hypot(center_in_prev[0], center_in_prev[1]))
    cos_t = float(np.clip(np.dot(prev.view_axis(), cand.view_axis()), -1.0, 1.0))
    return delta_d, math.degrees(math.acos(cos_t))


def _plane_from_points_lsq(points: np.ndarray) -> Plane:
    """Least-squares plane through points (smallest singular direction)."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] < 1e-12 * max(s[0], 1.0):
        raise DegenerateGeometryError("points are collinear; plane is underdetermined")
    normal = vt[2]
    return Plane(normal, -float(normal @ centroid))


def fit_ground_plane(points, inlier_tol: float, iterations: int = 2048,
                     rng: np.random.Generator | None = None,
                     orient_toward=None) -> Plane:
    """RANSAC plane fit with least-squares refit over the consensus set.

    Args:
        points: (N, 3) array-like, N >= 3 and not all collinear.
        inlier_tol: max point-plane distance (meters) to count as inlier.
        iterations: iteration cap; the adaptive inlier-ratio rule may stop
            earlier once 99.9% confidence is reached.
        rng: seeded generator for reproducible sampling.
        orient_toward: optional 3-point; the returned normal is flipped to
            face the half-space containing it (e.g. mean drone camera
            center, so "up" faces the cameras).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise DegenerateGeometryError("plane fit needs at least 3 points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    if rng is None:
        rng = np.random.default_rng(0)
    n_pts = pts.shape[0]
    iterations = max(1, min(int(iterations), 2048))

    best_count = -1
    best_inliers = None
    max_iters = iterations
    it = 0
    while it < max_iters:
        it += 1
        idx = rng.choice(n_pts, size=3, replace=False)
        p0, p1, p2 = pts[idx]
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        dist = np.abs((pts - p0) @ normal)
        count = int(np.count_nonzero(dist <= inlier_tol))
        if count > best_count:
            best_count = count
            best_inliers = dist <= inlier_tol
            # adaptive stop: enough iterations to hit an all-inlier sample
            ratio = count / n_pts
            if ratio > 0:
                denom = math.log(max(1e-12, 1.0 - min(ratio, 1.0 - 1e-9) ** 3))
                needed = int(math.ceil(math.log(1e-3) / denom)) if denom < 0 else iterations
                max_iters = min(iterations, max(it, needed))
    if best_inliers is None or best_count < 3:
        raise DegenerateGeometryError("RANSAC found no valid plane sample")

    plane = _plane_from_points_lsq(pts[best_inliers])
    normal, offset = plane.normal, plane.offset
    if orient_toward is not None:
        if float(_as_vec3(orient_toward) @ normal + offset) < 0:
            normal, offset = -normal, -offset
    else:
        # canonical sign: largest-magnitude component positive
        i = int(np.argmax(np.abs(normal)))
        if normal[i] < 0:
            normal, offset = -normal, -offset
    return Plane(normal, offset)


def _kabsch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation minimizing ||R a_i - b_i||^2 over centered point sets."""
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def _ortho_residual(r: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(((a @ r[:2].T - b) ** 2).sum())


def _iterate_ortho_rotation(r: np.ndarray, a: np.ndarray, b: np.ndarray,
                            iters: int) -> np.ndarray:
    """Depth-completion iteration: fill the unobserved camera-space depth
    from the current rotation, re-solve the full 3D alignment (Kabsch),
    repeat. The projected residual is monotonically non-increasing."""
    best = _ortho_residual(r, a, b)
    for _ in range(iters):
        b3 = np.column_stack([b, a @ r[2]])
        r_new = _kabsch(a, b3)
        res = _ortho_residual(r_new, a, b)
        if res > best - 1e-15:
            if res < best:
                r = r_new
            break
        r, best = r_new, res
    return _polish_ortho_rotation(r, a, b)


def _polish_ortho_rotation(r: np.ndarray, a: np.ndarray, b: np.ndarray,
                           iters: int = 20) -> np.ndarray:
    """Gauss-Newton refinement of the projected alignment on SO(3); the
    alternation above converges only linearly for flat clouds."""
    best = _ortho_residual(r, a, b)
    for _ in range(iters):
        pa = a @ r.T
        res = pa[:, :2] - b
        n = pa.shape[0]
        jac = np.zeros((n, 2, 3))
        jac[:, 0, 1] = pa[:, 2]
        jac[:, 0, 2] = -pa[:, 1]
        jac[:, 1, 0] = -pa[:, 2]
        jac[:, 1, 2] = pa[:, 0]
        jtj = np.einsum("nij,nik->jk", jac, jac)
        jtr = np.einsum("nij,ni->j", jac, res)
        jtj += 1e-12 * max(np.trace(jtj), 1.0) * np.eye(3)
        try:
            omega = -np.linalg.solve(jtj, jtr)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        improved = False
        for _bt in range(8):
            r_new = Rotation.from_rotvec(step * omega).as_matrix() @ r
            res_new = _ortho_residual(r_new, a, b)
            if res_new < best:
                r, best = r_new, res_new
                improved = True
                break
            step *= 0.5
        if not improved or np.linalg.norm(omega) < 1e-13:
            break
    return r


def _ortho_procrustes(world: np.ndarray, target_xy: np.ndarray,
                      iters: int = 30, prefer_axis=None) -> Pose:
    """Rigid ortho pose aligning world points to camera-plane targets.

    Finds R in SO(3) minimizing ||P(R X + t) - y||^2 where P keeps the
    first two coordinates. Near-planar clouds admit a mirrored second
    solution; both basins are searched and ties are broken toward
    prefer_axis (a world-space viewing-direction hint) when given. The
    unobservable depth component of t is pinned so the centroid of the
    world points sits at camera depth 0.
    """
    wc = world.mean(axis=0)
    yc = target_xy.mean(axis=0)
    a = world - wc
    b = target_xy - yc
    c = a.T @ b  # 3x2
    u, s, vt = np.linalg.svd(c.T, full_matrices=False)
    if s[1] < 1e-9 * max(s[0], 1e-30):
        raise DegenerateGeometryError("rank-deficient point configuration")
    m = u @ vt  # polar init: 2x3 with orthonormal rows
    r1 = _iterate_ortho_rotation(np.vstack([m, np.cross(m[0], m[1])]),
                                 a, b, iters)

    # second basin: reflect about the cloud's best-fit plane
    _, _, avt = np.linalg.svd(a, full_matrices=False)
    n = avt[2]
    flip = np.diag([1.0, 1.0, -1.0]) @ r1 @ (np.eye(3) - 2.0 * np.outer(n, n))
    r2 = _iterate_ortho_rotation(flip, a, b, iters)

    res1, res2 = _ortho_residual(r1, a, b), _ortho_residual(r2, a, b)
    if abs(res1 - res2) <= 1e-9 * max(res1, res2, 1e-12) and prefer_axis is not None:
        axis = np.asarray(prefer_axis, dtype=float)
        r = r1 if float(r1[2] @ axis) >= float(r2[2] @ axis) else r2
    else:
        r = r1 if res1 <= res2 else r2
    t = np.zeros(3)
    t[:2] = yc - r[:2] @ wc
    t[2] = -float(r[2] @ wc)
    return Pose(Rotation.from_matrix(r), t)


def solve_orthographic_pose(matches, pixel_scale: tuple[float, float],
                            ransac_tol: float,
                            image_size: tuple[int, int],
                            rng: np.random.Generator | None = None,
                            confidence: float = 0.999,
                            prefer_axis=None) -> tuple[Pose, int]:
    """Recover an orthographic camera pose from 2D-3D matches by RANSAC.

    Minimal 3-point samples are scored by pixel reprojection error; the
    consensus set is refit with an orthographic Procrustes alignment.
    The scale of the camera plane is fixed by pixel_scale = (s_w, s_h)
    (footprint meters mapped onto [-1, 1]) and image_size = (H, W).
    prefer_axis optionally disambiguates the mirrored solution that
    near-planar clouds admit.

    Returns (pose, inlier_count). Raises DegenerateGeometryError when
    fewer than 3 inliers survive or the points are rank-deficient.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    matches = list(matches)
    if len(matches) < 3:
        raise DegenerateGeometryError("ortho pose needs at least 3 matches")
    s_w, s_h = float(pixel_scale[0]), float(pixel_scale[1])
    h, w = int(image_size[0]), int(image_size[1])
    px = np.array([m.image_point for m in matches], dtype=float)
    xw = np.array([m.world_point for m in matches], dtype=float)

    # pixels -> camera-plane coordinates (inverse of the ortho projection)
    cam_xy = np.empty_like(px)
    cam_xy[:, 0] = (2.0 * (px[:, 0] + 0.5) / w - 1.0) * s_w / 2.0
    cam_xy[:, 1] = (2.0 * (px[:, 1] + 0.5) / h - 1.0) * s_h / 2.0
    px_per_m = np.array([w / s_w, h / s_h])

    def reproj_err(pose: Pose) -> np.ndarray:
        proj = (xw @ pose.rotation.as_matrix().T + pose.translation)[:, :2]
        return np.linalg.norm((proj - cam_xy) * px_per_m, axis=1)

    n = len(matches)
    best_mask = None
    best_key = (-1, np.inf)
    max_iters = min(2048, max(32, n * 4))
    it = 0
    while it < max_iters:
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        try:
            pose = _ortho_procrustes(xw[idx], cam_xy[idx], iters=10,
                                     prefer_axis=prefer_axis)
        except DegenerateGeometryError:
            continue
        err = reproj_err(pose)
        mask = err <= ransac_tol
        count = int(np.count_nonzero(mask))
        key = (count, float(err[mask].sum()) if count else np.inf)
        if key[0] > best_key[0] or (key[0] == best_key[0] and key[1] < best_key[1]):
            best_key = key
            best_mask = mask
            ratio = count / n
            if ratio > 0:
                denom = math.log(max(1e-12, 1.0 - min(ratio, 1.0 - 1e-9) ** 3))
                needed = int(math.ceil(math.log(1.0 - confidence) / denom)) if denom < 0 else max_iters
                max_iters = min(2048, max(it, needed))
    if best_mask is None or best_key[0] < 3:
        raise DegenerateGeometryError("ortho pose RANSAC found fewer than 3 inliers")

    pose = _ortho_procrustes(xw[best_mask], cam_xy[best_mask],
                             prefer_axis=prefer_axis)
    final_count = int(np.count_nonzero(reproj_err(pose) <= ransac_tol))
    if final_count < 3:
        raise DegenerateGeometryError("ortho pose refit lost its consensus set")
    return pose, final_count
