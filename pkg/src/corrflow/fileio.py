"""Binary PPM/PGM frames and masks, keypoint CSV, and sequence directories.

Layout of a sequence directory::

    frames/%05d.ppm    8-bit RGB (PNG accepted when Pillow is installed)
    masks/%05d.pgm     8-bit, pixel value = object id
    keypoints.csv      lines "frame,keypoint_id,x,y,visible"
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FRAME_SUFFIXES = (".ppm", ".png")


class FormatError(ValueError):
    pass


def _read_header(buf: bytes, n_fields: int) -> tuple[list[bytes], int]:
    """Parse whitespace-separated header tokens (with # comments) from a netpbm file."""
    tokens, pos = [], 0
    while len(tokens) < n_fields:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError("truncated netpbm header")
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def _read_netpbm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    (m, w, h, maxval), offset = _read_header(buf, 4)
    if m != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, found {m!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    n = w * h * channels
    if len(buf) - offset < n:
        raise FormatError(f"{path}: raster truncated")
    raster = np.frombuffer(buf, dtype=np.uint8, count=n, offset=offset)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return raster.reshape(shape), maxval


def read_ppm(path: Path) -> np.ndarray:
    """P6 file -> ``(H, W, 3)`` float32 in [0, 1]."""
    raster, maxval = _read_netpbm(path, b"P6", 3)
    return (raster.astype(np.float32) / maxval).astype(np.float32)


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)
    h, w, _ = rgb.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raster, _ = _read_netpbm(path, b"P5", 1)
    return raster.copy()


def write_pgm(path: Path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) > 255:
        raise FormatError("mask ids must fit in 8 bits")
    h, w = ids.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + ids.astype(np.uint8).tobytes())


def remap_contiguous(masks: np.ndarray) -> np.ndarray:
    """Map the ids present to 0..K-1 (0 stays background if present)."""
    ids = np.unique(masks)
    if np.array_equal(ids, np.arange(len(ids))):
        return masks
    if 0 not in ids:
        ids = np.concatenate([[0], ids])
    logger.warning("non-contiguous mask ids %s remapped to 0..%d", ids.tolist(), len(ids) - 1)
    lut = np.zeros(int(ids.max()) + 1, dtype=np.uint8)
    lut[ids] = np.arange(len(ids))
    return lut[masks]


def read_mask(path: Path, remap: bool = True) -> np.ndarray:
    mask = read_pgm(path)
    return remap_contiguous(mask) if remap else mask


def write_mask(path: Path, mask: np.ndarray) -> None:
    write_pgm(path, mask)


def _indexed_files(directory: Path, suffixes) -> list[Path]:
    files = [p for p in Path(directory).iterdir() if p.suffix.lower() in suffixes]

    def key(p: Path):
        m = re.search(r"(\d+)$", p.stem)
        return (int(m.group(1)) if m else -1, p.name)

    return sorted(files, key=key)


def _read_png(path: Path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow ships in the dev env
        raise FormatError(f"{path}: PNG input needs Pillow") from exc
    with Image.open(path) as im:
        if im.mode == "P":
            return np.asarray(im)
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_frames(directory: Path, allow_png: bool = True) -> np.ndarray:
    """All frames in a directory, ordered by trailing index: ``(T, H, W, 3)``."""
    suffixes = FRAME_SUFFIXES if allow_png else (".ppm",)
    files = _indexed_files(directory, suffixes)
    if not files:
        raise FileNotFoundError(f"no frames in {directory}")
    frames = [read_ppm(p) if p.suffix.lower() == ".ppm" else _read_png(p) for p in files]
    extents = {f.shape for f in frames}
    if len(extents) > 1:
        raise FormatError(f"{directory}: mixed frame extents {sorted(extents)}")
    return np.stack(frames).astype(np.float32)


def read_mask_sequence(directory: Path, allow_png: bool = True) -> np.ndarray:
    """``(T, H, W)`` masks with ids remapped to be contiguous over the whole sequence."""
    suffixes = (".pgm", ".png") if allow_png else (".pgm",)
    files = _indexed_files(directory, suffixes)
    if not files:
        raise FileNotFoundError(f"no masks in {directory}")
    masks = [read_pgm(p) if p.suffix.lower() == ".pgm" else _read_png(p) for p in files]
    if len({m.shape for m in masks}) > 1:
        raise FormatError(f"{directory}: mixed mask extents")
    return remap_contiguous(np.stack(masks))


def palette_png_to_pgm(src: Path, dst: Path) -> None:
    """Convert a palette-indexed PNG mask to PGM; palette indices become ids."""
    arr = _read_png(src)
    if arr.ndim != 2:
        raise FormatError(f"{src}: not a palette-indexed mask")
    write_pgm(dst, arr)


@dataclass(frozen=True)
class KeypointRecord:
    frame: int
    keypoint_id: int
    x: float
    y: float
    visible: int


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_keypoints(path: Path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{r.frame},{r.keypoint_id},{_fmt(r.x)},{_fmt(r.y)},{int(r.visible)}" for r in records]
    path.write_text("".join(line + "\n" for line in lines))


def read_keypoints(path: Path) -> list[KeypointRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("frame"):
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        f, k, x, y, v = parts
        records.append(KeypointRecord(int(f), int(k), float(x), float(y), int(v)))
    return records


def keypoints_to_array(records, num_frames: int | None = None, num_keypoints: int | None = None) -> np.ndarray:
    """``(T, K, 3)`` array of (x, y, visible); missing entries are invisible."""
    T = num_frames if num_frames is not None else max(r.frame for r in records) + 1
    K = num_keypoints if num_keypoints is not None else max(r.keypoint_id for r in records) + 1
    out = np.zeros((T, K, 3))
    for r in records:
        if r.frame < T and r.keypoint_id < K:
            out[r.frame, r.keypoint_id] = (r.x, r.y, r.visible)
    return out


def array_to_keypoints(arr: np.ndarray) -> list[KeypointRecord]:
    return [
        KeypointRecord(t, k, float(arr[t, k, 0]), float(arr[t, k, 1]), int(arr[t, k, 2]))
        for t in range(arr.shape[0])
        for k in range(arr.shape[1])
    ]


@dataclass
class Sequence:
    frames: np.ndarray
    masks: np.ndarray | None
    keypoints: np.ndarray | None
    path: Path | None = None


def read_sequence(directory: Path) -> Sequence:
    directory = Path(directory)
    frames = read_frames(directory / "frames")
    masks = read_mask_sequence(directory / "masks") if (directory / "masks").is_dir() else None
    kp_path = directory / "keypoints.csv"
    keypoints = keypoints_to_array(read_keypoints(kp_path), len(frames)) if kp_path.exists() else None
    return Sequence(frames, masks, keypoints, directory)


def read_dataset(root: Path) -> list[Sequence]:
    """Every sequence directory under ``root`` (or ``root`` itself)."""
    root = Path(root)
    if (root / "frames").is_dir():
        return [read_sequence(root)]
    seqs = [read_sequence(p) for p in sorted(root.iterdir()) if (p / "frames").is_dir()]
    if not seqs:
        raise FileNotFoundError(f"no sequences (subdirectories with frames/) under {root}")
    return seqs
