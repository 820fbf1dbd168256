"""ResNet-18-style feature encoder producing stride-4 feature maps.

Layout: a 7x7 stride-2 stem conv followed by four 3x3 residual blocks with
strides (1, 2, 1, 1).  Each block is conv-norm-relu-conv-norm added to a
shortcut (1x1 conv + norm when the shape changes).  There is no activation
after the addition, so features are signed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor

STAGE_STRIDES = (2, 1, 2, 1, 1)
TOTAL_STRIDE = 4

PRESETS = {
    "paper": (64, 64, 128, 256, 256),
    "tiny": (8, 8, 16, 32, 32),
}


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...] = PRESETS["tiny"]
    norm: str = "batch"  # "batch" | "frozen"

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ValueError("EncoderConfig.widths needs exactly 5 stage widths")
        if self.norm not in ("batch", "frozen"):
            raise ValueError(f"unknown norm mode {self.norm!r}")

    @classmethod
    def preset(cls, name: str, norm: str = "batch") -> "EncoderConfig":
        return cls(PRESETS[name], norm)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every learned tensor, in a fixed order."""
    w = cfg.widths
    shapes: dict[str, tuple[int, ...]] = {
        "stem.conv": (7, 7, 3, w[0]),
        "stem.bn.scale": (w[0],),
        "stem.bn.shift": (w[0],),
    }
    for b in range(1, 5):
        cin, cout = w[b - 1], w[b]
        p = f"block{b}"
        shapes[f"{p}.conv1"] = (3, 3, cin, cout)
        shapes[f"{p}.bn1.scale"] = (cout,)
        shapes[f"{p}.bn1.shift"] = (cout,)
        shapes[f"{p}.conv2"] = (3, 3, cout, cout)
        shapes[f"{p}.bn2.scale"] = (cout,)
        shapes[f"{p}.bn2.shift"] = (cout,)
        if _needs_projection(cin, cout, STAGE_STRIDES[b]):
            shapes[f"{p}.proj"] = (1, 1, cin, cout)
            shapes[f"{p}.bnp.scale"] = (cout,)
            shapes[f"{p}.bnp.shift"] = (cout,)
    return shapes


def norm_names(cfg: EncoderConfig) -> list[str]:
    return sorted({k.rsplit(".", 1)[0] for k in param_shapes(cfg) if k.endswith(".scale")})


def _needs_projection(cin: int, cout: int, stride: int) -> bool:
    return cin != cout or stride != 1


@dataclass
class EncoderParams:
    config: EncoderConfig
    weights: dict[str, Tensor]
    norm_stats: dict[str, RunningStats] = field(default_factory=dict)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.weights.values())

    def astype(self, dtype) -> "EncoderParams":
        weights = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k) for k, v in self.weights.items()}
        stats = {k: RunningStats(s.mean.astype(dtype), s.var.astype(dtype)) for k, s in self.norm_stats.items()}
        return EncoderParams(self.config, weights, stats)

    def copy(self) -> "EncoderParams":
        return self.astype(next(iter(self.weights.values())).dtype)

    def zero_grad(self) -> None:
        for t in self.weights.values():
            t.grad = None

    def all_finite(self) -> bool:
        arrays = [t.data for t in self.weights.values()]
        arrays += [a for s in self.norm_stats.values() for a in (s.mean, s.var)]
        return all(np.isfinite(a).all() for a in arrays)


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> EncoderParams:
    """Fan-in scaled normal conv kernels; norms start at scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".scale"):
            data = np.ones(shape)
        elif name.endswith(".shift"):
            data = np.zeros(shape)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        weights[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    stats = {}
    for n in norm_names(cfg):
        stats[n] = RunningStats.fresh(weights[f"{n}.scale"].shape[0], dtype)
    return EncoderParams(cfg, weights, stats)


def _norm(x: Tensor, params: EncoderParams, name: str, mode: str) -> Tensor:
    w = params.weights
    if params.config.norm == "frozen":
        mode = "eval"
    return ad.batch_norm(x, w[f"{name}.scale"], w[f"{name}.shift"], params.norm_stats[name], mode)


def _block(x: Tensor, params: EncoderParams, b: int, mode: str) -> Tensor:
    w = params.weights
    p = f"block{b}"
    stride = STAGE_STRIDES[b]
    h = ad.conv2d(x, w[f"{p}.conv1"], stride=stride)
    h = ad.relu(_norm(h, params, f"{p}.bn1", mode))
    h = ad.conv2d(h, w[f"{p}.conv2"], stride=1)
    h = _norm(h, params, f"{p}.bn2", mode)
    if f"{p}.proj" in w:
        short = ad.conv2d(x, w[f"{p}.proj"], stride=stride, pad=0)
        short = _norm(short, params, f"{p}.bnp", mode)
    else:
        short = x
    return ad.add(h, short)


def encode(frames: Tensor | np.ndarray, params: EncoderParams, mode: str = "eval") -> Tensor:
    """Map ``(B, H, W, 3)`` (or ``(H, W, 3)``) frames to stride-4 features.

    ``mode`` is ``"train"`` (batch statistics, running stats updated) or
    ``"eval"``.  With a frozen-norm config the running stats are always used.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
    h, w = x.shape[-3], x.shape[-2]
    if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
        raise ValueError(
            f"encode: frame extents {h}x{w} must be divisible by {TOTAL_STRIDE}; "
            f"resize to {h - h % TOTAL_STRIDE}x{w - w % TOTAL_STRIDE} or pad first"
        )
    squeeze = x.data.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1, *x.shape))
    wts = params.weights
    x = ad.conv2d(x, wts["stem.conv"], stride=STAGE_STRIDES[0])
    x = ad.relu(_norm(x, params, "stem.bn", mode))
    for b in range(1, 5):
        x = _block(x, params, b, mode)
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x
