"""Reference propagators used to put learned features in context."""

from __future__ import annotations

import numpy as np

from .colour import upsample_bilinear
from .encoder import TOTAL_STRIDE
from .propagation import mask_to_labelmap, pixel_features


def identity_propagation(frames: np.ndarray, mask: np.ndarray) -> list[np.ndarray]:
    """Copy the first-frame mask to every frame."""
    return [np.asarray(mask).copy() for _ in range(len(frames))]


def pixel_nn_propagation(frames: np.ndarray, mask: np.ndarray, M: int = 6, stride: int = TOTAL_STRIDE) -> list[np.ndarray]:
    """Brute-force nearest-neighbour matching on each cell's mean colour.

    Every target cell copies the label distribution of the reference cell
    (within ``M`` cells) whose mean RGB is closest; ties go to the first
    candidate in row-major window order.
    """
    frames = np.asarray(frames)
    feats = pixel_features(frames, stride)
    K = int(mask.max()) + 1
    dist = mask_to_labelmap(mask, K, stride)
    h, w = dist.shape[:2]
    out = [np.asarray(mask).copy()]
    for t in range(1, len(frames)):
        prev, cur = feats[t - 1], feats[t]
        new = np.empty_like(dist)
        for i in range(h):
            for j in range(w):
                best, best_d = None, np.inf
                for di in range(-M, M + 1):
                    for dj in range(-M, M + 1):
                        r, c = i + di, j + dj
                        if 0 <= r < h and 0 <= c < w:
                            d = float(((prev[r, c] - cur[i, j]) ** 2).sum())
                            if d < best_d:
                                best, best_d = (r, c), d
                new[i, j] = dist[best]
        dist = new
        out.append(upsample_bilinear(dist, stride).argmax(-1).astype(np.uint8))
    return out
