"""Lloyd's k-means over per-pixel 4-band color vectors (the baseline)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ParamError, as_generator
from .masks import ClassMap


@dataclass
class KMeansModel:
    k: int
    centroids: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: list


def _plus_plus_init(pixels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = pixels.shape[0]
    centroids = np.empty((k, pixels.shape[1]), dtype=np.float64)
    centroids[0] = pixels[rng.integers(n)]
    d2 = ((pixels - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = pixels[rng.integers(n)]
        else:
            centroids[i] = pixels[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pixels - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _assign(pixels: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Squared distances via expansion; ties resolve to the lowest index.
    d2 = (
        (pixels * pixels).sum(axis=1)[:, None]
        - 2.0 * pixels @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    labels = np.argmin(d2, axis=1)
    return labels, np.maximum(d2[np.arange(len(labels)), labels], 0.0)


def kmeans_fit(
    pixels: np.ndarray,
    k: int,
    seed=0,
    max_iter: int = 300,
    tol: float = 1e-6,
    init: np.ndarray | None = None,
) -> KMeansModel:
    """Seeded k-means++ then Lloyd iterations until the centroid shift < tol.

    Empty clusters are re-seeded to the point farthest from its assigned
    centroid. `init` overrides the k-means++ seeding (used by tests).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise ParamError(f"pixels must be (n, bands), got {pixels.shape}")
    n = pixels.shape[0]
    if k < 1:
        raise ParamError("k must be >= 1")
    if n < k:
        raise ParamError(f"need at least k={k} pixels, got {n}")
    rng = as_generator(seed)
    centroids = np.array(init, dtype=np.float64) if init is not None else _plus_plus_init(pixels, k, rng)
    if centroids.shape != (k, pixels.shape[1]):
        raise ParamError(f"init centroids must be ({k}, {pixels.shape[1]})")

    history = []
    labels, d2 = _assign(pixels, centroids)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        history.append(float(d2.sum()))
        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = pixels[members].mean(axis=0)
            else:
                new_centroids[j] = pixels[int(np.argmax(d2))]
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        labels, d2 = _assign(pixels, centroids)
        if shift < tol:
            break
    history.append(float(d2.sum()))
    return KMeansModel(
        k=k,
        centroids=centroids.astype(np.float32),
        inertia=history[-1],
        iterations_run=iterations,
        inertia_history=history,
    )


def kmeans_assign(model: KMeansModel, pixels: np.ndarray, shape=None):
    """Nearest-centroid labels; reshaped into a ClassMap when `shape` given."""
    pixels = np.asarray(pixels, dtype=np.float64)
    labels, _ = _assign(pixels, model.centroids.astype(np.float64))
    labels = labels.astype(np.int32)
    if shape is not None:
        return ClassMap(labels=labels.reshape(shape), k=model.k)
    return labels


def kmeans_reconstruct(model: KMeansModel, class_map) -> np.ndarray:
    """Replace each pixel by its centroid color (the comparison raster)."""
    labels = class_map.labels if isinstance(class_map, ClassMap) else np.asarray(class_map)
    if labels.size and labels.max() >= model.k:
        raise ParamError(f"label {labels.max()} out of range for k={model.k}")
    return model.centroids[labels].astype(np.float32)
