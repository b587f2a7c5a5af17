"""Gallery index, cosine-similarity ranking, and retrieval metrics
(Recall@K, average precision, meter-level error)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed import normalize_feature


@dataclass
class GalleryIndex:
    """Ordered gallery of unit-norm features with geotags.

    ids are unique and index-aligned with the feature matrix rows and
    geotags. images / footprint_m / image_px are optional extras needed by
    the pose-refinement loop (absent for feature-file galleries).
    """

    ids: list
    features: np.ndarray
    geotags: np.ndarray
    images: list | None = None
    footprint_m: float | None = None
    image_px: int | None = None
    _pos: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.geotags = np.asarray(self.geotags, dtype=float).reshape(-1, 2)
        if len(self.ids) != self.features.shape[0]:
            raise ValueError("ids and features disagree in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("gallery ids must be unique")
        norms = np.linalg.norm(self.features, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ValueError("gallery features must be nonzero")
        self.features = self.features / norms
        self._pos = {pid: i for i, pid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, patch_id) -> int:
        return self._pos[patch_id]

    def geotag_of(self, patch_id) -> np.ndarray:
        return self.geotags[self._pos[patch_id]]


@dataclass
class RankedResult:
    """Patch ids with non-increasing similarity scores; ties broken by
    ascending id."""

    ids: list
    scores: np.ndarray

    def rank_of(self, patch_id) -> int | None:
        """1-based rank of patch_id, or None if absent."""
        for i, pid in enumerate(self.ids):
            if pid == patch_id:
                return i + 1
        return None


def rank(query: np.ndarray, index: GalleryIndex, k: int | None = None) -> RankedResult:
    """Exact top-k of the gallery by cosine similarity (dot product of
    unit-norm vectors). k beyond the gallery returns the full ranking."""
    if len(index) == 0:
        raise ValueError("gallery index is empty")
    if k is None:
        k = len(index)
    if k < 1:
        raise ValueError("k must be >= 1")
    q = normalize_feature(query)
    scores = index.features @ q
    # sort by descending score, ties broken by ascending id
    id_order = sorted(range(len(index)), key=lambda i: index.ids[i])
    id_rank = np.empty(len(index), dtype=int)
    id_rank[id_order] = np.arange(len(index))
    order = np.lexsort((id_rank, -scores))
    top = order[:min(k, len(index))]
    return RankedResult([index.ids[i] for i in top], scores[top])


def recall_at_k(results, truths, k: int) -> float:
    """Fraction of queries whose truth id appears in the top-k."""
    results = list(results)
    truths = list(truths)
    if len(results) != len(truths):
        raise ValueError("one truth label per query required")
    if not results:
        raise ValueError("no queries")
    hits = sum(1 for res, truth in zip(results, truths)
               if truth in res.ids[:k])
    return hits / len(results)


def average_precision(result: RankedResult, relevant) -> float:
    """Mean precision at each relevant rank (standard retrieval AP)."""
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set must not be empty")
    precisions = []
    seen_relevant = 0
    for i, pid in enumerate(result.ids, start=1):
        if pid in relevant:
            seen_relevant += 1
            precisions.append(seen_relevant / i)
    if not precisions:
        raise ValueError("no relevant id present in the ranking")
    return float(np.mean(precisions))


def meter_error(retrieved_geotag, true_geotag) -> float | None:
    """Planar Euclidean distance between geotags; None when either geotag
    is unset (real-data ingestion has no ground truth)."""
    if retrieved_geotag is None or true_geotag is None:
        return None
    a = np.asarray(retrieved_geotag, dtype=float).reshape(2)
    b = np.asarray(true_geotag, dtype=float).reshape(2)
    return float(np.linalg.norm(a - b))


def neighbor_relevant_ids(index: GalleryIndex, truth_id, stride_m: float) -> set:
    """Neighbor-tolerant relevance: all patches whose center lies within
    one stride of the truth patch center (overlap-ambiguity mode)."""
    center = index.geotag_of(truth_id)
    dist = np.linalg.norm(index.geotags - center, axis=1)
    return {pid for pid, d in zip(index.ids, dist) if d <= stride_m + 1e-9}


METRIC_COLUMNS = ("scene_id", "rank_of_truth", "r@1", "r@5", "r@10",
                  "ap", "meter_error", "iteration")


def metrics_row(scene_id, result: RankedResult, truth_id, index: GalleryIndex,
                true_geotag, iteration: int, relevant=None) -> dict:
    """One metrics record for a scene at one refinement iteration."""
    r = result.rank_of(truth_id)
    retrieved_geotag = index.geotag_of(result.ids[0]) if result.ids else None
    err = meter_error(retrieved_geotag, true_geotag)
    return {
        "scene_id": scene_id,
        "rank_of_truth": r if r is not None else -1,
        "r@1": 1.0 if r == 1 else 0.0,
        "r@5": 1.0 if r is not None and r <= 5 else 0.0,
        "r@10": 1.0 if r is not None and r <= 10 else 0.0,
        "ap": average_precision(result, relevant or {truth_id})
              if r is not None else 0.0,
        "meter_error": err if err is not None else float("nan"),
        "iteration": iteration,
    }


def write_metrics_csv(path, rows) -> None:
    """Write per-scene rows plus one aggregate row per iteration, with
    fixed float formatting so identical runs byte-match."""
    rows = sorted(rows, key=lambda r: (str(r["scene_id"]), r["iteration"]))

    def fmt(key, value):
        if key in ("scene_id",):
            return str(value)
        if key in ("rank_of_truth", "iteration"):
            return str(int(value))
        return f"{float(value):.6f}"

    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(fmt(c, row[c]) for c in METRIC_COLUMNS))
    for it in sorted({r["iteration"] for r in rows}):
        sub = [r for r in rows if r["iteration"] == it]
        agg = {
            "scene_id": "aggregate",
            "rank_of_truth": -1,
            "r@1": float(np.mean([r["r@1"] for r in sub])),
            "r@5": float(np.mean([r["r@5"] for r in sub])),
            "r@10": float(np.mean([r["r@10"] for r in sub])),
            "ap": float(np.mean([r["ap"] for r in sub])),
            "meter_error": float(np.nanmean([r["meter_error"] for r in sub])),
            "iteration": it,
        }
        lines.append(",".join(fmt(c, agg[c]) for c in METRIC_COLUMNS))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
