"""Full and restricted (windowed) affinity, the soft-copy operator, and
memory accounting for both.

Window layout: ``weights[..., i, j, k, l]`` is the weight target cell
``(i, j)`` puts on reference cell ``(i + k - M, j + l - M)``.  Offsets that
fall outside the frame are masked out of the softmax and are exactly 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

FULL_AFFINITY_MAX_CELLS = 4096


@lru_cache(maxsize=64)
def valid_mask(h: int, w: int, M: int) -> np.ndarray:
    """Boolean ``(h, w, 2M+1, 2M+1)`` marking in-frame window offsets."""
    off = np.arange(-M, M + 1)
    rows = np.arange(h)[:, None] + off[None, :]
    cols = np.arange(w)[:, None] + off[None, :]
    rv = (rows >= 0) & (rows < h)
    cv = (cols >= 0) & (cols < w)
    mask = rv[:, None, :, None] & cv[None, :, None, :]
    mask.setflags(write=False)
    return mask


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _pad_spatial(a: np.ndarray, M: int) -> np.ndarray:
    widths = [(0, 0)] * a.ndim
    widths[-3] = widths[-2] = (M, M)
    return np.pad(a, widths)


def window_correlation(f_ref: Tensor, f_tgt: Tensor, M: int) -> Tensor:
    """Dot products between each target cell and every reference cell in its window.

    Out-of-frame offsets read zero padding; callers mask them.
    """
    if f_ref.shape != f_tgt.shape:
        raise ShapeError(f"window_correlation: feature maps {f_ref.shape} vs {f_tgt.shape}")
    *lead, h, w, _ = f_tgt.shape
    K = 2 * M + 1
    refp = _pad_spatial(f_ref.data, M)
    tgt = f_tgt.data
    out = np.empty((*lead, h, w, K, K), dtype=tgt.dtype)
    for k in range(K):
        for l in range(K):
            out[..., k, l] = np.einsum("...c,...c->...", refp[..., k : k + h, l : l + w, :], tgt)

    def grad_fn(g):
        d_refp = np.zeros_like(refp)
        d_tgt = np.zeros_like(tgt)
        for k in range(K):
            for l in range(K):
                gk = g[..., k, l, None]
                d_tgt += gk * refp[..., k : k + h, l : l + w, :]
                d_refp[..., k : k + h, l : l + w, :] += gk * tgt
        return d_refp[..., M : M + h, M : M + w, :], d_tgt

    return ad._make(out, (f_ref, f_tgt), grad_fn)


@dataclass
class AffinityVolume:
    weights: Tensor  # (..., h, w, 2M+1, 2M+1)
    M: int

    @property
    def extent(self) -> tuple[int, int]:
        return self.weights.shape[-4], self.weights.shape[-3]

    @property
    def mask(self) -> np.ndarray:
        return valid_mask(*self.extent, self.M)

    def argmax_offsets(self) -> np.ndarray:
        """``(..., h, w, 2)`` window offset ``(dy, dx)`` of each cell's strongest match.

        Ties resolve to the first offset in row-major window order.
        """
        K = 2 * self.M + 1
        flat = self.weights.data.reshape(*self.weights.shape[:-2], K * K)
        idx = flat.argmax(-1)
        return np.stack([idx // K - self.M, idx % K - self.M], axis=-1)


def restricted_affinity(
    f_ref: Tensor | np.ndarray,
    f_tgt: Tensor | np.ndarray,
    M: int,
    tau: float = 1.0,
    normalize: bool = False,
) -> AffinityVolume:
    """Masked softmax over the ``(2M+1)^2`` window of ``<f_ref, f_tgt> / tau``."""
    if M < 0:
        raise ValueError("restricted_affinity: M must be non-negative")
    f_ref, f_tgt = _as_tensor(f_ref), _as_tensor(f_tgt)
    if f_ref.shape != f_tgt.shape:
        raise ShapeError(f"restricted_affinity: reference {f_ref.shape} vs target {f_tgt.shape}")
    if normalize:
        f_ref, f_tgt = ad.l2_normalize(f_ref), ad.l2_normalize(f_tgt)
    logits = window_correlation(f_ref, f_tgt, M)
    if tau != 1.0:
        logits = ad.scale(logits, 1.0 / tau)
    h, w = f_tgt.shape[-3], f_tgt.shape[-2]
    weights = ad.softmax_over(logits, axes=(-2, -1), mask=valid_mask(h, w, M))
    return AffinityVolume(weights, M)


def soft_copy(aff: AffinityVolume, source: Tensor | np.ndarray) -> Tensor:
    """Affinity-weighted sum of reference values: ``(..., h, w, D) -> (..., h, w, D)``."""
    src = _as_tensor(source)
    A = aff.weights
    M = aff.M
    h, w = aff.extent
    if src.shape[:-1] != A.shape[:-2]:
        raise ShapeError(f"soft_copy: source extents {src.shape[:-1]} vs affinity {A.shape[:-2]}")
    K = 2 * M + 1
    srcp = _pad_spatial(src.data, M)
    a = A.data
    out = np.zeros(src.shape, dtype=np.result_type(a.dtype, src.dtype))
    for k in range(K):
        for l in range(K):
            out += a[..., k, l, None] * srcp[..., k : k + h, l : l + w, :]

    def grad_fn(g):
        dA = np.empty_like(a)
        d_srcp = np.zeros_like(srcp)
        for k in range(K):
            for l in range(K):
                sl = srcp[..., k : k + h, l : l + w, :]
                dA[..., k, l] = np.einsum("...d,...d->...", g, sl)
                d_srcp[..., k : k + h, l : l + w, :] += a[..., k, l, None] * g
        return dA, d_srcp[..., M : M + h, M : M + w, :]

    return ad._make(out, (A, src), grad_fn)


def full_affinity(
    f_ref: Tensor | np.ndarray,
    f_tgt: Tensor | np.ndarray,
    tau: float = 1.0,
    max_cells: int = FULL_AFFINITY_MAX_CELLS,
) -> Tensor:
    """Dense ``(hw, hw)`` affinity; column ``j`` is a softmax over all reference cells."""
    f_ref, f_tgt = _as_tensor(f_ref), _as_tensor(f_tgt)
    if f_ref.shape != f_tgt.shape or f_ref.data.ndim != 3:
        raise ShapeError(f"full_affinity: expects two equal (h, w, C) maps, got {f_ref.shape}, {f_tgt.shape}")
    h, w, c = f_ref.shape
    n = h * w
    if n > max_cells:
        est = resource_estimate(h, w, 0)["full_elements"] * f_ref.data.itemsize
        raise MemoryError(
            f"full_affinity: {h}x{w} map needs a {n}x{n} matrix "
            f"(~{est / 2**20:.1f} MiB); limit is {max_cells} cells"
        )
    fr = ad.reshape(f_ref, (n, c))
    ft = ad.reshape(f_tgt, (n, c))
    logits = ad.matmul(fr, ad.transpose(ft))
    if tau != 1.0:
        logits = ad.scale(logits, 1.0 / tau)
    return ad.softmax_over(logits, axes=0)


def restricted_as_full(aff: AffinityVolume) -> np.ndarray:
    """Scatter a single (unbatched) affinity volume into the dense ``(ref, tgt)`` layout."""
    h, w = aff.extent
    M = aff.M
    out = np.zeros((h * w, h * w), dtype=aff.weights.dtype)
    ii, jj, kk, ll = np.nonzero(aff.mask)
    ref = (ii + kk - M) * w + (jj + ll - M)
    tgt = ii * w + jj
    out[ref, tgt] = aff.weights.data[ii, jj, kk, ll]
    return out


def resource_estimate(h: int, w: int, M: int) -> dict:
    """Element counts of the restricted volume vs the dense affinity matrix."""
    if h <= 0 or w <= 0:
        raise ValueError("resource_estimate: extents must be positive")
    restricted = h * w * (2 * M + 1) ** 2
    full = (h * w) ** 2
    return {"restricted_elements": restricted, "full_elements": full, "ratio": restricted / full}


def feature_extent(pixels: int, stride: int = 4) -> int:
    return math.ceil(pixels / stride)
