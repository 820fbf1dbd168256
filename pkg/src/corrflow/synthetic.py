"""Synthetic videos of textured patches translating over a textured background.

Every clip comes with exact ground truth: per-frame object masks, dense
integer flow and patch-centre keypoint tracks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 32
    width: int = 32
    num_patches: int = 2
    patch_size: int = 12
    max_speed: int = 4  # px/frame per axis
    velocities: tuple[tuple[int, int], ...] | None = None  # explicit (dy, dx) per patch
    clip_length: int = 8
    background: bool = True
    texture_cell: int = 4
    stride: int = 4
    M: int = 6
    align: bool = True  # patch size and first-frame position on the stride grid
    velocity_step: int = 1  # random velocities are multiples of this (use ``stride`` for whole-cell motion)

    def __post_init__(self):
        bound = self.stride * self.M
        speeds = [abs(c) for v in (self.velocities or ()) for c in v] + [self.max_speed]
        if max(speeds) > bound:
            raise ValueError(f"velocity {max(speeds)} px/frame exceeds stride*M = {bound}")
        if self.patch_size > min(self.height, self.width):
            raise ValueError("patch_size larger than the canvas")
        if self.velocities is not None and len(self.velocities) != self.num_patches:
            raise ValueError("need one velocity per patch")
        if self.clip_length < 1:
            raise ValueError("clip_length must be positive")
        if self.velocity_step < 1:
            raise ValueError("velocity_step must be positive")


@dataclass
class SyntheticClip:
    frames: np.ndarray  # (T, H, W, 3) float32, multiples of 1/255
    masks: np.ndarray  # (T, H, W) uint8, 0 = background, i+1 = patch i
    flow: np.ndarray  # (T-1, H, W, 2) int, forward (dy, dx)
    keypoints: np.ndarray  # (T, P, 3) float: x, y, visible
    velocities: np.ndarray  # (P, 2) (dy, dx)


def value_noise(h: int, w: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Random colours on a lattice of spacing ``cell``, bilinearly interpolated."""
    gh, gw = h // cell + 2, w // cell + 2
    lattice = rng.uniform(0.0, 1.0, size=(gh, gw, 3))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    ty, tx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c00 = lattice[y0][:, x0]
    c01 = lattice[y0][:, x0 + 1]
    c10 = lattice[y0 + 1][:, x0]
    c11 = lattice[y0 + 1][:, x0 + 1]
    img = (1 - ty) * ((1 - tx) * c00 + tx * c01) + ty * ((1 - tx) * c10 + tx * c11)
    return np.round(img * 255) / 255


def generate_clip(spec: SyntheticSpec, seed: int) -> SyntheticClip:
    rng = np.random.default_rng(seed)
    H, W, T, ps = spec.height, spec.width, spec.clip_length, spec.patch_size
    if spec.background:
        bg = value_noise(H, W, spec.texture_cell * 2, rng)
    else:
        bg = np.full((H, W, 3), 128 / 255)

    textures, positions, vels = [], [], []
    for i in range(spec.num_patches):
        textures.append(value_noise(ps, ps, spec.texture_cell, rng))
        if spec.velocities is not None:
            v = np.array(spec.velocities[i])
        else:
            top = spec.max_speed // spec.velocity_step
            v = rng.integers(-top, top + 1, size=2) * spec.velocity_step
        y = int(rng.integers(0, H - ps + 1))
        x = int(rng.integers(0, W - ps + 1))
        if spec.align:
            y, x = y - y % spec.stride, x - x % spec.stride
        positions.append(np.array([y, x]))
        vels.append(v)
    vels = np.array(vels, dtype=int).reshape(spec.num_patches, 2)

    frames = np.empty((T, H, W, 3))
    masks = np.zeros((T, H, W), dtype=np.uint8)
    keypoints = np.zeros((T, spec.num_patches, 3))
    for t in range(T):
        img = bg.copy()
        for i, (tex, pos) in enumerate(zip(textures, positions)):
            y, x = pos + t * vels[i]
            ya, yb = max(y, 0), min(y + ps, H)
            xa, xb = max(x, 0), min(x + ps, W)
            if ya < yb and xa < xb:
                img[ya:yb, xa:xb] = tex[ya - y : yb - y, xa - x : xb - x]
                masks[t, ya:yb, xa:xb] = i + 1
            cy, cx = y + ps // 2, x + ps // 2
            visible = 0 <= cy < H and 0 <= cx < W
            keypoints[t, i] = (cx, cy, float(visible))
        frames[t] = img

    flow = np.zeros((max(T - 1, 0), H, W, 2), dtype=int)
    for t in range(T - 1):
        for i in range(spec.num_patches):
            flow[t][masks[t] == i + 1] = vels[i]
    return SyntheticClip(frames.astype(np.float32), masks, flow, keypoints, vels)


def write_clip(clip: SyntheticClip, root: Path) -> None:
    root = Path(root)
    for t, (frame, mask) in enumerate(zip(clip.frames, clip.masks)):
        fileio.write_ppm(root / "frames" / f"{t:05d}.ppm", frame)
        fileio.write_pgm(root / "masks" / f"{t:05d}.pgm", mask)
    records = [
        fileio.KeypointRecord(t, k, float(x), float(y), int(v))
        for t in range(len(clip.keypoints))
        for k, (x, y, v) in enumerate(clip.keypoints[t])
    ]
    fileio.write_keypoints(root / "keypoints.csv", records)


def write_dataset(spec: SyntheticSpec, out_dir: Path, num_clips: int, seed: int) -> list[Path]:
    """Write ``num_clips`` clips as ``clip_%05d/{frames,masks,keypoints.csv}``."""
    out_dir = Path(out_dir)
    seeds = np.random.SeedSequence(seed).generate_state(num_clips)
    paths = []
    for c in range(num_clips):
        path = out_dir / f"clip_{c:05d}"
        write_clip(generate_clip(spec, int(seeds[c])), path)
        paths.append(path)
    logger.info("wrote %d clips to %s", num_clips, out_dir)
    return paths
