"""Propagate a first-frame annotation (masks or keypoints) through a video.

Each step soft-copies the previous frame's label distribution with the
restricted affinity between consecutive frames.  Distributions stay soft
between steps; argmax is taken only when emitting outputs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .attention import AffinityVolume, restricted_affinity, soft_copy
from .autodiff import Tensor
from .colour import upsample_bilinear
from .encoder import TOTAL_STRIDE, EncoderParams, encode

FeatureFn = Callable[[np.ndarray], np.ndarray]


def mask_to_labelmap(mask: np.ndarray, K: int, stride: int = TOTAL_STRIDE) -> np.ndarray:
    """Per-cell normalized histogram of object ids: ``(h, w, K)``."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % stride or w % stride:
        raise ValueError(f"mask extents {h}x{w} not divisible by {stride}")
    onehot = np.eye(K)[mask.astype(np.int64)]
    return onehot.reshape(h // stride, stride, w // stride, stride, K).mean(axis=(1, 3))


def keypoints_to_labelmap(keypoints: np.ndarray, h: int, w: int, stride: int = TOTAL_STRIDE) -> np.ndarray:
    """One spatial one-hot channel per visible keypoint; invisible ones are all zero.

    ``keypoints`` is ``(K, 3)`` rows of ``(x, y, visible)`` in pixels.
    """
    K = len(keypoints)
    out = np.zeros((h, w, K))
    for k, (x, y, vis) in enumerate(keypoints):
        if vis:
            r = min(max(int(y) // stride, 0), h - 1)
            c = min(max(int(x) // stride, 0), w - 1)
            out[r, c, k] = 1.0
    return out


def propagate_step(
    f_prev: np.ndarray,
    f_next: np.ndarray,
    labels_prev: np.ndarray,
    M: int,
    mode: str = "mask",
    tau: float = 1.0,
    normalize: bool = False,
) -> np.ndarray:
    aff = restricted_affinity(Tensor(f_prev), Tensor(f_next), M, tau=tau, normalize=normalize)
    return _apply(aff, labels_prev, mode)


def _apply(aff: AffinityVolume, labels: np.ndarray, mode: str) -> np.ndarray:
    out = soft_copy(aff, labels.astype(aff.weights.dtype)).data.astype(np.float64)
    if mode == "mask":
        out /= out.sum(-1, keepdims=True)
    elif mode == "keypoint":
        mass = out.sum(axis=(0, 1), keepdims=True)
        out = np.divide(out, mass, out=np.zeros_like(out), where=mass > 0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


def labelmap_to_mask(dist: np.ndarray, stride: int = TOTAL_STRIDE) -> np.ndarray:
    """Bilinearly upsample the distribution, then per-pixel argmax."""
    return upsample_bilinear(dist, stride).argmax(-1).astype(np.uint8)


def labelmap_to_keypoints(dist: np.ndarray, visible: np.ndarray, stride: int = TOTAL_STRIDE) -> np.ndarray:
    """Per-channel spatial argmax (first in row-major order), mapped to pixel coordinates."""
    h, w, K = dist.shape
    out = np.zeros((K, 3))
    for k in range(K):
        if not visible[k]:
            continue
        idx = int(dist[..., k].argmax())
        r, c = divmod(idx, w)
        out[k] = (c * stride + stride // 2, r * stride + stride // 2, 1)
    return out


def params_feature_fn(params: EncoderParams) -> FeatureFn:
    return lambda frames: encode(Tensor(np.asarray(frames, dtype=np.float32)), params, "eval").data


def propagate_video(
    frames: np.ndarray,
    annotation: np.ndarray,
    features: FeatureFn | EncoderParams,
    M: int = 6,
    mode: str = "mask",
    tau: float = 1.0,
    normalize: bool = False,
    num_labels: int | None = None,
) -> list[np.ndarray]:
    """Carry the first-frame annotation through ``frames`` (full colour, no bottleneck).

    ``annotation`` is an ``(H, W)`` id mask in mask mode or a ``(K, 3)``
    array of ``(x, y, visible)`` in keypoint mode.  Returns one annotation
    per frame; the first is the input unchanged.
    """
    frames = np.asarray(frames)
    T, H, W = frames.shape[:3]
    if mode == "mask":
        annotation = np.asarray(annotation)
        if annotation.shape != (H, W):
            raise ValueError(f"annotation extents {annotation.shape} do not match frames {(H, W)}")
    elif mode == "keypoint":
        annotation = np.asarray(annotation, dtype=np.float64)
        vis = annotation[:, 2] > 0
        xs, ys = annotation[vis, 0], annotation[vis, 1]
        if ((xs < 0) | (xs >= W) | (ys < 0) | (ys >= H)).any():
            raise ValueError(f"visible keypoints fall outside the {W}x{H} frame")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    outputs = [annotation.copy()]
    if T == 1:
        return outputs

    feature_fn = params_feature_fn(features) if isinstance(features, EncoderParams) else features
    feats = np.concatenate([feature_fn(frames[t : t + 1]) for t in range(T)])
    h, w = feats.shape[1:3]
    if mode == "mask":
        K = num_labels or int(annotation.max()) + 1
        dist = mask_to_labelmap(annotation, K, H // h)
    else:
        dist = keypoints_to_labelmap(annotation, h, w, H // h)
    for t in range(1, T):
        dist = propagate_step(feats[t - 1], feats[t], dist, M, mode, tau, normalize)
        if mode == "mask":
            outputs.append(labelmap_to_mask(dist, H // h))
        else:
            outputs.append(labelmap_to_keypoints(dist, vis, H // h))
    return outputs


def pixel_features(frames: np.ndarray, stride: int = TOTAL_STRIDE) -> np.ndarray:
    """Raw-colour baseline features: each cell's mean RGB."""
    frames = np.asarray(frames, dtype=np.float64)
    *lead, H, W, C = frames.shape
    return frames.reshape(*lead, H // stride, stride, W // stride, stride, C).mean(axis=(-4, -2))
