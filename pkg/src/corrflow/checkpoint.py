"""Binary checkpoint format (little-endian throughout).

::

    b"CFLW"  u32 version
    u32 len, utf-8 config text (sorted "key=value" lines)
    u32 k, k*3 f32 palette centroids (Lab)
    u32 count, then per tensor: u16 name len, name, u8 rank, rank*u32 extents, f32 data
    u8 has_optimizer [u64 adam step, then m and v tensors in the same record layout]
    u64 training step
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState, RunningStats, Tensor
from .colour import Palette
from .encoder import EncoderConfig, EncoderParams, norm_names, param_shapes

MAGIC = b"CFLW"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class ExtentMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, str]
    palette: Palette
    params: EncoderParams
    opt_state: AdamState | None
    step: int


def config_text(config: dict[str, str]) -> str:
    return "".join(f"{k}={config[k]}\n" for k in sorted(config))


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def encoder_config_from(config: dict[str, str]) -> EncoderConfig:
    if "widths" not in config:
        raise CheckpointError("config snapshot lacks 'widths'")
    widths = tuple(int(w) for w in config["widths"].split(","))
    return EncoderConfig(widths, config.get("norm", "batch"))


def _tensor_records(params: EncoderParams) -> list[tuple[str, np.ndarray]]:
    recs = [(k, t.data) for k, t in params.weights.items()]
    for n in sorted(params.norm_stats):
        s = params.norm_stats[n]
        recs += [(f"{n}.running_mean", s.mean), (f"{n}.running_var", s.var)]
    return recs


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    cfg = config_text(ckpt.config).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg]
    cents = np.asarray(ckpt.palette.centroids, dtype="<f4")
    parts += [struct.pack("<I", len(cents)), cents.tobytes()]
    recs = _tensor_records(ckpt.params)
    parts.append(struct.pack("<I", len(recs)))
    parts += [_pack_tensor(n, a) for n, a in recs]
    if ckpt.opt_state is None:
        parts.append(struct.pack("<B", 0))
    else:
        st = ckpt.opt_state
        parts.append(struct.pack("<BQ", 1, st.step))
        names = list(ckpt.params.weights)
        parts += [_pack_tensor(f"m.{n}", st.m[n]) for n in names]
        parts += [_pack_tensor(f"v.{n}", st.v[n]) for n in names]
    parts.append(struct.pack("<Q", ckpt.step))
    return b"".join(parts)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpoint(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode()
        (rank,) = self.unpack("<B")
        shape = self.unpack(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        return name, data


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagic(f"not a checkpoint: magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint format version {version} unsupported (expected {VERSION})")
    (clen,) = r.unpack("<I")
    config = parse_config_text(r.take(clen).decode())
    (k,) = r.unpack("<I")
    cents = np.frombuffer(r.take(12 * k), dtype="<f4").astype(np.float64).reshape(k, 3)
    (count,) = r.unpack("<I")
    tensors = dict(r.tensor() for _ in range(count))

    enc_cfg = encoder_config_from(config)
    expected = dict(param_shapes(enc_cfg))
    for n in norm_names(enc_cfg):
        c = expected[f"{n}.scale"]
        expected[f"{n}.running_mean"] = c
        expected[f"{n}.running_var"] = c
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise ExtentMismatch(f"tensor names disagree with config: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tensors[name].shape != tuple(shape):
            raise ExtentMismatch(f"{name}: stored extents {tensors[name].shape}, config implies {tuple(shape)}")

    weights = {n: Tensor(tensors[n], requires_grad=True, name=n) for n in param_shapes(enc_cfg)}
    stats = {n: RunningStats(tensors[f"{n}.running_mean"], tensors[f"{n}.running_var"]) for n in norm_names(enc_cfg)}
    params = EncoderParams(enc_cfg, weights, stats)

    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        (astep,) = r.unpack("<Q")
        m = dict(r.tensor() for _ in weights)
        v = dict(r.tensor() for _ in weights)
        opt = AdamState({n: m[f"m.{n}"] for n in weights}, {n: v[f"v.{n}"] for n in weights}, astep)
    (step,) = r.unpack("<Q")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config, Palette(cents), params, opt, step)


def load_checkpoint(path: Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
