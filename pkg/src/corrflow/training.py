"""Recursive reconstruction training with scheduled sampling and a
forward-backward cycle.

A clip of ``n`` frames is reconstructed frame by frame: frame ``k`` is a
soft copy of a reference, which is the true frame ``k-1`` with probability
``p`` and otherwise the model's own reconstruction of it.  The backward
path then walks from the last reconstruction back to frame 1.  Targets are
16-class Lab quantizations at feature resolution.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attention import AffinityVolume, restricted_affinity, soft_copy
from .autodiff import AdamState, Tensor
from .colour import (
    NUM_CLASSES,
    BottleneckConfig,
    Jitter,
    Palette,
    apply_bottleneck,
    avg_pool,
    fit_palette,
    lab_to_rgb,
    one_hot,
    quantize,
    rgb_to_lab,
    sample_dropout_mask,
    sample_pixels,
    upsample_bilinear,
)
from .encoder import TOTAL_STRIDE, EncoderConfig, EncoderParams, encode, init_params

logger = logging.getLogger(__name__)

EncodeFn = Callable[[np.ndarray], Tensor]


@dataclass
class TrainConfig:
    n: int = 3
    M: int = 6
    alpha1: float = 1.0
    alpha2: float = 0.1
    ss_start: float = 0.9
    ss_end: float = 0.6
    total_steps: int = 1_000_000
    lr: float = 2e-4
    lr_milestones: tuple[float, ...] = (0.4, 0.6, 0.8)
    batch_size: int = 8
    seed: int = 0
    temporal_stride: int = 1
    tau: float = 1.0
    l2_normalize: bool = False
    cycle_start: str = "prediction"  # or "ground_truth"
    palette_sample: int = 100_000
    checkpoint_every: int = 0
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig.preset("paper"))

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not 0 <= self.ss_end <= self.ss_start <= 1:
            raise ValueError("need 0 <= ss_end <= ss_start <= 1")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.cycle_start not in ("prediction", "ground_truth"):
            raise ValueError(f"unknown cycle_start {self.cycle_start!r}")


def ss_probability(step: int, total_steps: int, ss_start: float = 0.9, ss_end: float = 0.6) -> float:
    """Probability of using the ground-truth reference, annealed linearly."""
    if total_steps <= 0:
        return ss_start
    if step >= total_steps:
        return ss_end
    return ss_start + (ss_end - ss_start) * step / total_steps


def learning_rate(step: int, cfg: TrainConfig) -> float:
    halvings = sum(step >= m * cfg.total_steps for m in cfg.lr_milestones)
    return cfg.lr * 0.5**halvings


# ---------------------------------------------------------------------------
# data


@dataclass
class Clip:
    frames: np.ndarray  # (n, H, W, 3) RGB in [0, 1]
    class_ids: np.ndarray  # (n, h, w) palette ids
    lab: np.ndarray  # (n, h, w, 3) Lab pooled to feature resolution
    dropout_mask: np.ndarray  # (3,) bool keep-mask shared by the clip

    @property
    def n(self) -> int:
        return len(self.frames)


class TrainingData:
    """Videos plus their palette, with targets precomputed at feature resolution."""

    def __init__(self, videos: Sequence[np.ndarray], palette: Palette):
        self.videos = [np.asarray(v, dtype=np.float32) for v in videos]
        for v in self.videos:
            h, w = v.shape[1:3]
            if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
                raise ValueError(f"frame extents {h}x{w} not divisible by {TOTAL_STRIDE}")
        self.palette = palette
        self.lab = [avg_pool(rgb_to_lab(v), TOTAL_STRIDE) for v in self.videos]
        self.ids = [palette.assign(lab) for lab in self.lab]

    @classmethod
    def fit(cls, videos: Sequence[np.ndarray], sample_size: int = 100_000, seed: int = 0) -> "TrainingData":
        pixels = sample_pixels(np.concatenate([np.asarray(v).reshape(-1, 3) for v in videos]), sample_size, seed)
        return cls(videos, fit_palette(rgb_to_lab(pixels), NUM_CLASSES, seed))

    def make_clip(self, video: int, indices: Sequence[int], dropout_mask: np.ndarray) -> Clip:
        idx = list(indices)
        return Clip(self.videos[video][idx], self.ids[video][idx], self.lab[video][idx], dropout_mask)

    def sample_clip(self, n: int, stride: int, rng: np.random.Generator, cfg: BottleneckConfig) -> Clip:
        span = (n - 1) * stride
        candidates = [i for i, v in enumerate(self.videos) if len(v) > span]
        if not candidates:
            raise ValueError(f"no video is long enough for n={n}, stride={stride}")
        v = candidates[int(rng.integers(len(candidates)))]
        start = int(rng.integers(len(self.videos[v]) - span))
        return self.make_clip(v, range(start, start + span + 1, stride), sample_dropout_mask(cfg, rng))


# ---------------------------------------------------------------------------
# recursion


@dataclass
class ForwardResult:
    class_preds: list[Tensor]  # predictions for frames 2..n (0-based 1..n-1)
    colour_preds: list[np.ndarray]  # Lab at feature resolution
    losses: list[Tensor]
    used_ground_truth: list[bool]
    features: Tensor  # (n, h, w, C) features of the true frames


def encoder_fn(params: EncoderParams, mode: str = "train") -> EncodeFn:
    return lambda x: encode(Tensor(np.asarray(x, dtype=_dtype(params))), params, mode)


def _dtype(params: EncoderParams):
    return next(iter(params.weights.values())).dtype


def _degrade(rgb: np.ndarray, clip: Clip, cfg: BottleneckConfig, rng: np.random.Generator, jitter=None) -> np.ndarray:
    if not cfg.per_clip_dropout:
        return apply_bottleneck(rgb, cfg, rng, None, jitter)
    return apply_bottleneck(rgb, cfg, rng, clip.dropout_mask, jitter)


def _frame_jitters(n: int, cfg: BottleneckConfig, rng) -> list[Jitter]:
    if cfg.per_frame_jitter:
        return [Jitter.sample(cfg.jitter_range, rng) for _ in range(n)]
    return [Jitter.sample(cfg.jitter_range, rng)] * n


def _encode_prediction(lab: np.ndarray, clip: Clip, encode_fn: EncodeFn, cfg: TrainConfig, rng) -> Tensor:
    """Re-encode a reconstructed frame: Lab -> RGB, upsample, bottleneck, encode."""
    rgb = upsample_bilinear(lab_to_rgb(lab), TOTAL_STRIDE).astype(np.float32)
    degraded = _degrade(rgb, clip, cfg.bottleneck, rng)
    return ad.take(encode_fn(degraded[None]), 0)


def _affinity(f_ref: Tensor, f_tgt: Tensor, cfg: TrainConfig) -> AffinityVolume:
    return restricted_affinity(f_ref, f_tgt, cfg.M, tau=cfg.tau, normalize=cfg.l2_normalize)


def _copy_colour(aff: AffinityVolume, lab: np.ndarray, cache: dict | None, key) -> np.ndarray:
    """Soft copy of Lab colours; no gradient flows through this path.

    With a ``cache`` the first computed value per key is reused on later
    calls, which pins the stop-gradient inputs during finite differencing.
    """
    if cache is not None and key in cache:
        return cache[key]
    frozen = AffinityVolume(Tensor(aff.weights.data), aff.M)
    out = soft_copy(frozen, lab.astype(aff.weights.dtype)).data
    if cache is not None:
        cache[key] = out
    return out


def forward_pass(
    clip: Clip,
    encode_fn: EncodeFn,
    p: float,
    rng: np.random.Generator,
    cfg: TrainConfig,
    colour_cache: dict | None = None,
) -> ForwardResult:
    """Reconstruct frames 2..n recursively; returns predictions and per-frame losses."""
    jitters = _frame_jitters(clip.n, cfg.bottleneck, rng)
    degraded = np.stack([_degrade(f, clip, cfg.bottleneck, rng, j) for f, j in zip(clip.frames, jitters)])
    feats = encode_fn(degraded)
    dtype = feats.dtype
    f = [ad.take(feats, t) for t in range(clip.n)]

    class_preds, colour_preds, losses, used_gt = [], [], [], []
    for k in range(1, clip.n):
        ground_truth = k == 1 or rng.random() < p
        if ground_truth:
            ref_feat = f[k - 1]
            ref_labels = Tensor(one_hot(clip.class_ids[k - 1], NUM_CLASSES, dtype))
            ref_lab = clip.lab[k - 1]
        else:
            ref_feat = _encode_prediction(colour_preds[-1], clip, encode_fn, cfg, rng)
            ref_labels = class_preds[-1]
            ref_lab = colour_preds[-1]
        aff = _affinity(ref_feat, f[k], cfg)
        pred = soft_copy(aff, ref_labels)
        class_preds.append(pred)
        colour_preds.append(_copy_colour(aff, ref_lab, colour_cache, ("fwd", k)))
        losses.append(ad.nll_of_probs(pred, clip.class_ids[k]))
        used_gt.append(ground_truth)
    return ForwardResult(class_preds, colour_preds, losses, used_gt, feats)


def cycle_pass(
    clip: Clip,
    fwd: ForwardResult,
    encode_fn: EncodeFn,
    rng: np.random.Generator,
    cfg: TrainConfig,
    colour_cache: dict | None = None,
) -> list[Tensor]:
    """Walk back from frame n to frame 1; losses are ordered n-1, ..., 1."""
    n = clip.n
    f = [ad.take(fwd.features, t) for t in range(n)]
    if cfg.cycle_start == "prediction":
        ref_lab = fwd.colour_preds[-1]
        ref_labels = fwd.class_preds[-1]
        ref_feat = _encode_prediction(ref_lab, clip, encode_fn, cfg, rng)
    else:
        ref_lab = clip.lab[n - 1]
        ref_labels = Tensor(one_hot(clip.class_ids[n - 1], NUM_CLASSES, fwd.features.dtype))
        ref_feat = f[n - 1]
    losses = []
    for j in range(n - 2, -1, -1):
        aff = _affinity(ref_feat, f[j], cfg)
        pred = soft_copy(aff, ref_labels)
        losses.append(ad.nll_of_probs(pred, clip.class_ids[j]))
        if j > 0:
            ref_lab = _copy_colour(aff, ref_lab, colour_cache, ("bwd", j))
            ref_labels = pred
            ref_feat = _encode_prediction(ref_lab, clip, encode_fn, cfg, rng)
    return losses


def total_loss(l1s: Sequence[Tensor], l2s: Sequence[Tensor], alpha1: float = 1.0, alpha2: float = 0.1) -> Tensor:
    """Weighted sum ``alpha1 * sum(l1s) + alpha2 * sum(l2s)``."""
    terms = [ad.scale(l, alpha1) for l in l1s] + [ad.scale(l, alpha2) for l in l2s]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def clip_loss(
    clip: Clip, encode_fn: EncodeFn, p: float, rng, cfg: TrainConfig, colour_cache: dict | None = None
) -> tuple[Tensor, list[Tensor], list[Tensor]]:
    fwd = forward_pass(clip, encode_fn, p, rng, cfg, colour_cache)
    l2s = cycle_pass(clip, fwd, encode_fn, rng, cfg, colour_cache) if cfg.alpha2 > 0 else []
    return total_loss(fwd.losses, l2s, cfg.alpha1, cfg.alpha2), fwd.losses, l2s


# ---------------------------------------------------------------------------
# loop


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, lr: float, p: float, value: float):
        super().__init__(f"non-finite loss {value} at step {step} (lr={lr:g}, p={p:.4f})")
        self.step, self.lr, self.p, self.value = step, lr, p, value


@dataclass
class StepReport:
    step: int
    l1: list[float]
    l2: list[float]
    total: float
    p: float
    lr: float

    def to_record(self) -> dict:
        return {"step": self.step, "p": self.p, "lr": self.lr, "L1": self.l1, "L2": self.l2, "L": self.total}


@dataclass
class TrainResult:
    params: EncoderParams
    opt_state: AdamState
    palette: Palette
    reports: list[StepReport]


def train_step(
    params: EncoderParams,
    opt_state: AdamState,
    data: TrainingData,
    step: int,
    rng: np.random.Generator,
    cfg: TrainConfig,
) -> StepReport:
    p = ss_probability(step, cfg.total_steps, cfg.ss_start, cfg.ss_end)
    lr = learning_rate(step, cfg)
    params.zero_grad()
    enc = encoder_fn(params, "train")
    l1_sum = np.zeros(cfg.n - 1)
    l2_sum = np.zeros(cfg.n - 1 if cfg.alpha2 > 0 else 0)
    for _ in range(cfg.batch_size):
        clip = data.sample_clip(cfg.n, cfg.temporal_stride, rng, cfg.bottleneck)
        loss, l1s, l2s = clip_loss(clip, enc, p, rng, cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(step, lr, p, value)
        l1_sum += [float(l.data) for l in l1s]
        l2_sum += [float(l.data) for l in l2s]
        ad.backward(ad.scale(loss, 1.0 / cfg.batch_size))
    grads = {k: t.grad for k, t in params.weights.items() if t.grad is not None}
    ad.adam_step(params.weights, grads, opt_state, lr)
    l1 = (l1_sum / cfg.batch_size).tolist()
    l2 = (l2_sum / cfg.batch_size).tolist()
    tot = cfg.alpha1 * sum(l1) + cfg.alpha2 * sum(l2)
    return StepReport(step, l1, l2, tot, p, lr)


def train(
    data: TrainingData,
    cfg: TrainConfig,
    params: EncoderParams | None = None,
    log_path: Path | None = None,
    checkpoint_dir: Path | None = None,
    config_snapshot: dict[str, str] | None = None,
) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps; deterministic for a fixed seed."""
    from .checkpoint import Checkpoint, save_checkpoint

    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(cfg.encoder, cfg.seed)
    opt_state = AdamState.zeros_like(params.weights)
    reports = []
    log = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.total_steps):
            report = train_step(params, opt_state, data, step, rng, cfg)
            reports.append(report)
            if log:
                log.write(json.dumps(report.to_record()) + "\n")
                log.flush()
            if step % 10 == 0:
                logger.info("step %d  L=%.4f  p=%.3f  lr=%.2e", step, report.total, report.p, report.lr)
            done = step + 1
            if checkpoint_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.total_steps:
                ckpt = Checkpoint(config_snapshot or {}, data.palette, params, opt_state, done)
                save_checkpoint(Path(checkpoint_dir) / f"step_{done:07d}.cflw", ckpt)
    finally:
        if log:
            log.close()
    return TrainResult(params, opt_state, data.palette, reports)
