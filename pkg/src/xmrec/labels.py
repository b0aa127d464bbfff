"""Per-modality K-means pseudo-labels for contrastive positives."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import EmbeddingTable
from .errors import DataError


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float]
    n_iters: int


@dataclass
class PseudoLabels:
    modality: str
    labels: np.ndarray
    centroids: np.ndarray
    k: int = field(default=0)

    def __post_init__(self):
        if not self.k:
            self.k = int(self.centroids.shape[0])


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (N, K) squared Euclidean distances, clipped against rounding
    d = (np.sum(x * x, axis=1)[:, None] + np.sum(centroids * centroids, axis=1)[None, :]
         - 2.0 * (x @ centroids.T))
    return np.maximum(d, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=x.dtype)
    centroids[0] = x[rng.integers(n)]
    closest = np.sum((x - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a centroid; pick uniformly
            centroids[c] = x[rng.integers(n)]
            continue
        probs = closest / total
        pick = rng.choice(n, p=probs)
        centroids[c] = x[pick]
        closest = np.minimum(closest, np.sum((x - centroids[c]) ** 2, axis=1))
    return centroids


def kmeans(x: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
           n_init: int = 10) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding, best of `n_init` restarts.

    Empty clusters are reseeded to the point farthest from its assigned
    centroid. Each restart stops when assignments are stable or at
    max_iters and records the post-assignment inertia of every iteration;
    the restart with the lowest final inertia wins.
    """
    best: KMeansResult | None = None
    for restart in range(max(1, n_init)):
        res = _kmeans_once(x, k, max_iters, seed + 7919 * restart)
        if best is None or res.inertia_history[-1] < best.inertia_history[-1]:
            best = res
    return best


def _kmeans_once(x: np.ndarray, k: int, max_iters: int, seed: int) -> KMeansResult:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise DataError(f"kmeans: K={k} exceeds number of points {n}")
    if max_iters < 1:
        raise DataError("kmeans: max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)
    labels = np.full(n, -1)
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        dists = _sq_dists(x, centroids)
        new_labels = dists.argmin(axis=1)
        point_d = dists[np.arange(n), new_labels]
        history.append(float(point_d.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            taken: set[int] = set()
            order = np.argsort(-point_d, kind="stable")
            cursor = 0
            for c in empties:
                while order[cursor] in taken:
                    cursor += 1
                far = int(order[cursor])
                taken.add(far)
                centroids[c] = x[far]
    return KMeansResult(labels=labels, centroids=centroids,
                        inertia_history=history, n_iters=it)


def gen_pseudo_labels(text_table: EmbeddingTable, vision_table: EmbeddingTable,
                      k: int, seed: int) -> tuple[PseudoLabels, PseudoLabels]:
    """Independent clusterings of the two modality embedding tables."""
    if text_table.ids != vision_table.ids:
        raise DataError("pseudo-labels need identical item sets and ordering "
                        "in both modality tables")
    res_t = kmeans(text_table.matrix, k, seed=seed)
    res_v = kmeans(vision_table.matrix, k, seed=seed + 1)
    return (PseudoLabels("text", res_t.labels, res_t.centroids),
            PseudoLabels("vision", res_v.labels, res_v.centroids))


def save_labels(path, items: list[str], text: PseudoLabels, vision: PseudoLabels):
    with open(path, "w", encoding="utf-8") as fh:
        for i, item in enumerate(items):
            fh.write(json.dumps({"item": item,
                                 "text_label": int(text.labels[i]),
                                 "vision_label": int(vision.labels[i])}) + "\n")


def load_labels(path, items: list[str]) -> tuple[np.ndarray, np.ndarray]:
    by_item: dict[str, tuple[int, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            by_item[rec["item"]] = (rec["text_label"], rec["vision_label"])
    missing = [i for i in items if i not in by_item]
    if missing:
        raise DataError(f"label cache missing {len(missing)} items, "
                        f"e.g. {missing[:3]}")
    text = np.array([by_item[i][0] for i in items])
    vision = np.array([by_item[i][1] for i in items])
    return text, vision
