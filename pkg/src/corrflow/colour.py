"""Colour conversion, palette quantization and the input bottleneck."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NUM_CLASSES = 16

# sRGB (D65) -> XYZ
_RGB2XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_WHITE = _RGB2XYZ.sum(axis=1)  # D65 white point of the matrix above
_DELTA = 6.0 / 29.0


def _srgb_to_linear(c):
    return np.where(c > 0.04045, ((c + 0.055) / 1.055) ** 2.4, c / 12.92)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    # 0.04045 / 12.92 rather than the rounded 0.0031308, so both directions switch branch at the same point
    return np.where(c > 0.04045 / 12.92, 1.055 * np.power(c, 1 / 2.4) - 0.055, 12.92 * c)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] (last axis = channels) to CIELAB under D65."""
    rgb = np.asarray(rgb, dtype=np.float64)
    xyz = _srgb_to_linear(rgb) @ _RGB2XYZ.T / _WHITE
    f = np.where(xyz > _DELTA**3, np.cbrt(xyz), xyz / (3 * _DELTA**2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut results are clipped to [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    f = np.stack([fy + lab[..., 1] / 500.0, fy, fy - lab[..., 2] / 200.0], axis=-1)
    xyz = np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0)) * _WHITE
    return np.clip(_linear_to_srgb(xyz @ _XYZ2RGB.T), 0.0, 1.0)


# ---------------------------------------------------------------------------
# palette


@dataclass(frozen=True)
class Palette:
    centroids: np.ndarray  # (k, 3) Lab
    seed: int = 0
    iterations: int = 0
    inertia: float = 0.0
    inertia_history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def assign(self, lab: np.ndarray) -> np.ndarray:
        """Nearest centroid per Lab point; ties go to the lowest index."""
        pts = np.asarray(lab, dtype=np.float64)
        d = _sq_dists(pts.reshape(-1, 3), self.centroids)
        return d.argmin(axis=1).reshape(pts.shape[:-1])


def _sq_dists(pts: np.ndarray, cents: np.ndarray) -> np.ndarray:
    # explicit differences keep exact ties exact (no expansion round-off)
    return ((pts[:, None, :] - cents[None, :, :]) ** 2).sum(-1)


def fit_palette(
    lab_points: np.ndarray,
    k: int = NUM_CLASSES,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> Palette:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``
    iterations.  Deterministic for a fixed ``(lab_points, seed)``.
    """
    pts = np.asarray(lab_points, dtype=np.float64).reshape(-1, 3)
    if len(np.unique(pts, axis=0)) < k:
        raise ValueError(f"fit_palette: need at least {k} distinct Lab points")
    rng = np.random.default_rng(seed)

    cents = np.empty((k, 3))
    cents[0] = pts[rng.integers(len(pts))]
    closest = ((pts - cents[0]) ** 2).sum(-1)
    for c in range(1, k):
        probs = closest / closest.sum()
        cents[c] = pts[rng.choice(len(pts), p=probs)]
        closest = np.minimum(closest, ((pts - cents[c]) ** 2).sum(-1))

    history = []
    it = 0
    pts_sq = (pts**2).sum(-1)
    for it in range(1, max_iter + 1):
        d = np.maximum(pts_sq[:, None] - 2 * pts @ cents.T + (cents**2).sum(-1)[None, :], 0.0)
        labels = d.argmin(1)
        history.append(float(d[np.arange(len(pts)), labels].sum()))
        counts = np.bincount(labels, minlength=k)
        sums = np.stack([np.bincount(labels, weights=pts[:, i], minlength=k) for i in range(3)], axis=1)
        new = cents.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for c in np.flatnonzero(~filled):
            # re-seed an empty cluster at the worst-fit point
            new[c] = pts[d[np.arange(len(pts)), labels].argmax()]
        shift = np.sqrt(((new - cents) ** 2).sum(-1)).max()
        cents = new
        if shift < tol:
            break
    d = _sq_dists(pts, cents)
    inertia = float(d.min(1).sum())
    history.append(inertia)
    return Palette(cents, seed=seed, iterations=it, inertia=inertia, inertia_history=tuple(history))


def sample_pixels(frames: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Uniform random sample (without replacement when possible) of RGB pixels."""
    flat = np.asarray(frames).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    if n >= len(flat):
        return flat.copy()
    return flat[rng.choice(len(flat), size=n, replace=False)]


def avg_pool(x: np.ndarray, stride: int) -> np.ndarray:
    """Average-pool the two axes before the channel axis by ``stride``."""
    *lead, h, w, c = x.shape
    if h % stride or w % stride:
        raise ValueError(f"avg_pool: extents {h}x{w} not divisible by {stride}")
    return x.reshape(*lead, h // stride, stride, w // stride, stride, c).mean(axis=(-4, -2))


def upsample_bilinear(x: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling of ``(..., h, w, C)`` by an integer factor.

    Pixel centres are aligned (half-pixel convention); samples beyond the
    outermost cell centres are clamped to the edge.
    """
    x = np.asarray(x)
    h, w = x.shape[-3], x.shape[-2]

    def axis_weights(n):
        pos = (np.arange(n * factor) + 0.5) / factor - 0.5
        pos = np.clip(pos, 0, n - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, pos - lo

    y0, y1, ty = axis_weights(h)
    x0, x1, tx = axis_weights(w)
    ty = ty[:, None, None].astype(x.dtype)
    tx = tx[None, :, None].astype(x.dtype)
    rows0 = x[..., y0, :, :]
    rows1 = x[..., y1, :, :]
    top = rows0[..., x0, :] * (1 - tx) + rows0[..., x1, :] * tx
    bot = rows1[..., x0, :] * (1 - tx) + rows1[..., x1, :] * tx
    return top * (1 - ty) + bot * ty


def quantize(lab: np.ndarray, palette: Palette, stride: int = 4) -> np.ndarray:
    """Pool Lab by ``stride`` then assign each cell to its nearest centroid."""
    return palette.assign(avg_pool(np.asarray(lab, dtype=np.float64), stride))


def one_hot(ids: np.ndarray, k: int = NUM_CLASSES, dtype=np.float32) -> np.ndarray:
    return np.eye(k, dtype=dtype)[np.asarray(ids)]


# ---------------------------------------------------------------------------
# bottleneck


@dataclass
class BottleneckConfig:
    drop_count_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    jitter_range: float = 0.10
    per_clip_dropout: bool = True
    per_frame_jitter: bool = True

    def __post_init__(self):
        if len(self.drop_count_probs) != 3 or abs(sum(self.drop_count_probs) - 1.0) > 1e-6:
            raise ValueError("drop_count_probs must be a distribution over {0, 1, 2}")
        if not 0.0 <= self.jitter_range <= 0.5:
            raise ValueError("jitter_range must lie in [0, 0.5]")

    @classmethod
    def disabled(cls) -> "BottleneckConfig":
        return cls(drop_count_probs=(1.0, 0.0, 0.0), jitter_range=0.0)


def sample_dropout_mask(cfg: BottleneckConfig, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask over the 3 colour channels."""
    n_drop = rng.choice(3, p=np.asarray(cfg.drop_count_probs))
    keep = np.ones(3, dtype=bool)
    if n_drop:
        keep[rng.choice(3, size=n_drop, replace=False)] = False
    return keep


@dataclass(frozen=True)
class Jitter:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0

    @classmethod
    def sample(cls, jitter_range: float, rng: np.random.Generator) -> "Jitter":
        if jitter_range == 0:
            return cls()
        lo, hi = 1 - jitter_range, 1 + jitter_range
        return cls(*rng.uniform(lo, hi, size=3))


def _gray(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.299, 0.587, 0.114], dtype=rgb.dtype)


def jitter_frame(rgb: np.ndarray, jit: Jitter) -> np.ndarray:
    """Brightness, contrast, saturation in that order; no clamping."""
    out = rgb
    if jit.brightness != 1.0:
        out = out * jit.brightness
    if jit.contrast != 1.0:
        m = _gray(out).mean()
        out = m + (out - m) * jit.contrast
    if jit.saturation != 1.0:
        g = _gray(out)[..., None]
        out = g + (out - g) * jit.saturation
    return out


def apply_bottleneck(
    frame: np.ndarray,
    cfg: BottleneckConfig,
    rng: np.random.Generator,
    clip_dropout_mask: np.ndarray | None = None,
    jitter: Jitter | None = None,
) -> np.ndarray:
    """Channel dropout then colour jitter, clamped to [0, 1].

    With ``cfg.per_clip_dropout`` the caller passes the mask shared by the
    clip; otherwise one is drawn here.
    """
    frame = np.asarray(frame)
    keep = clip_dropout_mask if clip_dropout_mask is not None else sample_dropout_mask(cfg, rng)
    out = frame * keep.astype(frame.dtype)
    if jitter is None:
        jitter = Jitter.sample(cfg.jitter_range, rng)
    out = jitter_frame(out, jitter)
    return np.clip(out, 0.0, 1.0).astype(frame.dtype, copy=False)
