"""Global image features: a deterministic hand-crafted extractor, GeM
pooling, feature fusion for the initial scene representation, and a text
interchange format so externally computed embeddings can be dropped in."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter

RESIZE_TO = 128
CELL_GRID = 16                 # cells per image side
GRAD_BINS = 8
CHANNELS = 3 + GRAD_BINS       # mean RGB + orientation histogram
POOL_REGIONS = 4               # GeM pooled per 4x4 block of cells
FEATURE_DIM = POOL_REGIONS * POOL_REGIONS * CHANNELS  # 176
GEM_P = 3.0
FEATURE_MAGIC = "OSFEAT"
FEATURE_VERSION = "v1"


def normalize_feature(vec: np.ndarray) -> np.ndarray:
    """L2-normalize to a unit-norm global feature."""
    v = np.asarray(vec, dtype=float).ravel()
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("cannot normalize a zero feature")
    return v / n


@lru_cache(maxsize=32)
def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    """weight[i, j] = overlap of input pixel j with output pixel i, in
    output-pixel units; rows sum to 1 so means are preserved exactly."""
    edges_in = np.arange(n_in + 1) * (n_out / n_in)
    wgt = np.zeros((n_out, n_in))
    for j in range(n_in):
        lo, hi = edges_in[j], edges_in[j + 1]
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_out)):
            wgt[i, j] = min(hi, i + 1) - max(lo, i)
    wgt.flags.writeable = False
    return wgt


def area_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-average resample (deterministic, any size ratio)."""
    img = np.asarray(image, dtype=float)
    h, w = img.shape[0], img.shape[1]
    if h == out_h and w == out_w:
        return img.copy()
    wy = _overlap_weights(h, out_h)
    wx = _overlap_weights(w, out_w)
    if img.ndim == 3:
        return np.einsum("yh,hwc,xw->yxc", wy, img, wx, optimize=True)
    return wy @ img @ wx.T


def grayscale(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    return img @ np.array([0.299, 0.587, 0.114])


def extract_feature_map(image) -> np.ndarray:
    """Hand-crafted dense descriptor grid.

    The image is area-resized to 128x128 and split into 16x16 cells; each
    cell emits 11 non-negative channels: mean R, G, B and an 8-bin
    gradient-orientation histogram weighted by gradient magnitude.
    """
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    img = area_resize(pixels, RESIZE_TO, RESIZE_TO)
    cell = RESIZE_TO // CELL_GRID

    fmap = np.zeros((CELL_GRID, CELL_GRID, CHANNELS))
    fmap[:, :, :3] = img.reshape(CELL_GRID, cell, CELL_GRID, cell, 3).mean(axis=(1, 3))

    gray = grayscale(img)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    bins = np.minimum((ang / (2.0 * np.pi / GRAD_BINS)).astype(np.int64),
                      GRAD_BINS - 1)
    for b in range(GRAD_BINS):
        m = np.where(bins == b, mag, 0.0)
        fmap[:, :, 3 + b] = m.reshape(CELL_GRID, cell, CELL_GRID, cell).mean(axis=(1, 3))
    return fmap


def gem_pool_raw(fmap: np.ndarray, p: float) -> np.ndarray:
    """Generalized-mean pool over all cells, one value per channel."""
    if p < 1:
        raise ValueError("GeM exponent must be >= 1")
    m = np.asarray(fmap, dtype=float)
    if np.any(m < 0):
        raise ValueError("GeM requires a non-negative feature map")
    flat = m.reshape(-1, m.shape[-1])
    return np.power(np.power(flat, p).mean(axis=0), 1.0 / p)


def gem_pool(fmap: np.ndarray, p: float = GEM_P) -> np.ndarray:
    """GeM pooling flattened to a unit-norm global feature."""
    return normalize_feature(gem_pool_raw(fmap, p))


GRAD_GAIN = 4.0   # orientation channels are small next to color means


def global_feature(image, p: float = GEM_P) -> np.ndarray:
    """Full descriptor: GeM-pool each 4x4 block of cells and concatenate.

    The 16x16x11 map pools to 4x4x11 = 176 dims, keeping coarse spatial
    layout. Gradient channels are rebalanced against the color means, a
    square root stabilizes bright regions, and each region is normalized
    on its own before the final L2 normalization (block-normalization in
    the HOG tradition; spreads the otherwise compressed cosine range).
    """
    fmap = extract_feature_map(image)
    fmap = np.concatenate([fmap[:, :, :3], GRAD_GAIN * fmap[:, :, 3:]],
                          axis=2)
    block = CELL_GRID // POOL_REGIONS
    pooled = np.empty((POOL_REGIONS, POOL_REGIONS, CHANNELS))
    for by in range(POOL_REGIONS):
        for bx in range(POOL_REGIONS):
            sub = fmap[by * block:(by + 1) * block, bx * block:(bx + 1) * block]
            pooled[by, bx] = gem_pool_raw(sub, p)
    pooled = np.sqrt(pooled)
    flat = pooled.reshape(POOL_REGIONS * POOL_REGIONS, CHANNELS)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    return normalize_feature(flat / np.maximum(norms, 1e-9))


def fuse_initial(f_anchor: np.ndarray, f_rendered: np.ndarray) -> np.ndarray:
    """Trust-weighted blend of the anchor drone feature and the rendered
    virtual-view feature.

    s = max(0, <f_anchor, f_rendered>) gates how much the rendered view is
    trusted; the blend s*f_rendered + (1-s)*f_anchor is re-normalized. A
    distorted render (low similarity) therefore cannot corrupt the query.
    """
    f0 = normalize_feature(f_anchor)
    fr = normalize_feature(f_rendered)
    s = max(0.0, float(f0 @ fr))
    return normalize_feature(s * fr + (1.0 - s) * f0)


def select_anchor_view(images: list, rng: np.random.Generator | None = None):
    """Pick the anchor drone image: middle of the sequence by default, or a
    seeded-random choice when rng is given."""
    if not images:
        raise ValueError("need at least one image")
    if rng is not None:
        return images[int(rng.integers(len(images)))]
    return images[len(images) // 2]


def save_feature_file(path, entries) -> None:
    """Write the text interchange format: header 'OSFEAT v1 D=<dim>', then
    one '<id> <f1> ... <fD>' record per line at full precision."""
    entries = list(entries)
    dim = len(np.asarray(entries[0][1]).ravel()) if entries else FEATURE_DIM
    with open(path, "w") as f:
        f.write(f"{FEATURE_MAGIC} {FEATURE_VERSION} D={dim}\n")
        for ident, vec in entries:
            v = np.asarray(vec, dtype=float).ravel()
            if v.size != dim:
                raise ValueError(f"feature '{ident}' has dimension {v.size}, "
                                 f"expected {dim}")
            f.write(str(ident) + " " + " ".join(repr(float(x)) for x in v) + "\n")


def load_feature_file(path) -> list[tuple[str, np.ndarray]]:
    """Read the interchange format; rows are re-normalized to unit norm.

    Raises ValueError on a malformed header, a dimension mismatch, or a
    duplicate id (message names the offending line).
    """
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty feature file (missing header)")
    head = lines[0].split()
    if (len(head) != 3 or head[0] != FEATURE_MAGIC
            or head[1] != FEATURE_VERSION or not head[2].startswith("D=")):
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    dim = int(head[2][2:])
    out: list[tuple[str, np.ndarray]] = []
    seen: set[str] = set()
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        ident, values = parts[0], parts[1:]
        if len(values) != dim:
            raise ValueError(f"{path}:{ln}: record has {len(values)} values, "
                             f"header says D={dim}")
        if ident in seen:
            raise ValueError(f"{path}:{ln}: duplicate id '{ident}'")
        seen.add(ident)
        out.append((ident, normalize_feature(np.array(values, dtype=float))))
    return out


def smooth_to_band(image: np.ndarray, gsd: float, target_gsd: float) -> np.ndarray:
    """Low-pass an ortho image so its effective resolution matches
    target_gsd meters/pixel; used before cross-resolution matching."""
    img = np.asarray(image, dtype=float)
    if target_gsd <= gsd:
        return img
    sigma = 0.5 * target_gsd / gsd
    if img.ndim == 3:
        return np.stack([gaussian_filter(img[:, :, c], sigma) for c in range(3)],
                        axis=-1)
    return gaussian_filter(img, sigma)
