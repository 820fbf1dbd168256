"""Shared experiment drivers: held-out propagation benchmark and the DAVIS identity check."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .baselines import identity_propagation, pixel_nn_propagation
from .colour import Jitter, jitter_frame
from .encoder import EncoderParams
from .metrics import SegScore, davis_aggregate, score_sequence
from .propagation import propagate_video
from .synthetic import SyntheticClip, SyntheticSpec, generate_clip

HELD_OUT_SEED = 10_000


def held_out_clips(num_clips: int = 20, spec: SyntheticSpec = SyntheticSpec(), base_seed: int = HELD_OUT_SEED) -> list[SyntheticClip]:
    """Clips seeded ``base_seed + i``; training data uses ``SeedSequence`` states, which never collide in practice."""
    return [generate_clip(spec, base_seed + i) for i in range(num_clips)]


def illumination_jitter(frames: np.ndarray, jitter_range: float, seed: int) -> np.ndarray:
    """Independent brightness/contrast/saturation factors per frame, clamped to [0, 1]."""
    rng = np.random.default_rng(seed)
    out = [np.clip(jitter_frame(f.astype(np.float64), Jitter.sample(jitter_range, rng)), 0, 1) for f in frames]
    return np.stack(out).astype(np.float32)


@dataclass
class BenchmarkResult:
    model: float
    identity: float
    pixel_nn: float
    per_clip: list[tuple[float, float, float]]

    def line(self) -> str:
        return f"J-mean  model {self.model:.3f}  identity {self.identity:.3f}  pixel-NN {self.pixel_nn:.3f}"


def _j_mean(preds, masks) -> float:
    return davis_aggregate(*score_sequence(np.stack(preds), masks)).j_mean


def propagation_benchmark(
    params: EncoderParams,
    clips: list[SyntheticClip],
    M: int = 6,
    tau: float = 1.0,
    jitter_range: float = 0.0,
) -> BenchmarkResult:
    """Mean J of the learned features, identity copy and raw-colour nearest neighbour."""
    rows = []
    for c, clip in enumerate(clips):
        frames = illumination_jitter(clip.frames, jitter_range, c) if jitter_range else clip.frames
        first = clip.masks[0]
        rows.append(
            (
                _j_mean(propagate_video(frames, first, params, M=M, tau=tau), clip.masks),
                _j_mean(identity_propagation(frames, first), clip.masks),
                _j_mean(pixel_nn_propagation(frames, first, M=M), clip.masks),
            )
        )
    mean = np.mean(rows, axis=0)
    return BenchmarkResult(float(mean[0]), float(mean[1]), float(mean[2]), rows)


def davis_identity(root: Path, split: str = "val", resolution: str = "480p") -> SegScore:
    """Copy each sequence's first annotation forward and score it.

    ``root`` is an unpacked DAVIS-2017 trainval directory (``Annotations/``
    and ``ImageSets/2017/``).  Objects from all sequences are pooled before
    averaging, as the DAVIS toolkit does.
    """
    root = Path(root)
    names = (root / "ImageSets" / "2017" / f"{split}.txt").read_text().split()
    J, F = [], []
    for name in names:
        gts = fileio.read_mask_sequence(root / "Annotations" / resolution / name)
        preds = np.stack(identity_propagation(gts, gts[0]))
        j, f = score_sequence(preds, gts)
        J += j
        F += f
    return davis_aggregate(J, F)
