"""Flat ``key=value`` run configuration shared by the command-line tools.

A file holds one ``key=value`` per line (``#`` starts a comment).  The
``preset`` key selects a base (``paper`` or ``tiny``); every other key
then overrides that base, and ``--key value`` flags override the file.
``RunConfig.echo()`` prints the keys sorted, and parsing that text again
yields the same config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

from .colour import BottleneckConfig
from .encoder import PRESETS, EncoderConfig
from .training import TrainConfig

PAPER = "paper value"
CHOSEN = "chosen default"


def _key(default, help: str, source: str = CHOSEN):
    return field(default=default, metadata={"help": help, "source": source})


@dataclass(frozen=True)
class RunConfig:
    preset: str = _key("paper", "base values: paper | tiny")
    data: str = _key("", "dataset directory (sequences with frames/)")
    out: str = _key("runs/corrflow", "output directory for checkpoints and logs")
    n: int = _key(3, "forward clip length", PAPER)
    M: int = _key(6, "maximum disparity in feature cells", PAPER)
    alpha1: float = _key(1.0, "weight of the forward reconstruction loss", PAPER)
    alpha2: float = _key(0.1, "weight of the backward cycle loss", PAPER)
    ss_start: float = _key(0.9, "ground-truth reference probability at step 0", PAPER)
    ss_end: float = _key(0.6, "ground-truth reference probability at the last step", PAPER)
    total_steps: int = _key(1_000_000, "optimizer steps", PAPER)
    lr: float = _key(2e-4, "initial Adam learning rate", PAPER)
    lr_milestones: tuple = _key((0.4, 0.6, 0.8), "fractions of total_steps where lr halves", PAPER)
    batch_size: int = _key(8, "clips per optimizer step", PAPER)
    seed: int = _key(0, "seed for initialisation, sampling and the palette")
    temporal_stride: int = _key(1, "frame gap inside a training clip")
    tau: float = _key(1.0, "softmax temperature of the affinity")
    l2_normalize: bool = _key(False, "unit-normalize features before correlation")
    cycle_start: str = _key("prediction", "cycle reference: prediction | ground_truth")
    palette_sample: int = _key(100_000, "pixels sampled to fit the colour palette")
    checkpoint_every: int = _key(10_000, "steps between intermediate checkpoints (0 = final only)")
    widths: tuple = _key(PRESETS["paper"], "encoder stage widths", PAPER)
    norm: str = _key("batch", "normalization: batch | frozen")
    drop_count_probs: tuple = _key((1 / 3, 1 / 3, 1 / 3), "probabilities of dropping 0, 1 or 2 channels")
    jitter_range: float = _key(0.1, "half-width of brightness/contrast/saturation factors")
    per_clip_dropout: bool = _key(True, "share the channel-dropout mask across a clip")
    per_frame_jitter: bool = _key(True, "draw colour jitter independently per frame")

    def __post_init__(self):
        if self.preset not in PRESET_OVERRIDES:
            raise ConfigError(f"unknown preset {self.preset!r} (choose from {', '.join(PRESET_OVERRIDES)})")
        try:
            self.to_train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def for_preset(cls, name: str) -> "RunConfig":
        if name not in PRESET_OVERRIDES:
            raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESET_OVERRIDES)})")
        return cls(preset=name, **PRESET_OVERRIDES[name])

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            n=self.n,
            M=self.M,
            alpha1=self.alpha1,
            alpha2=self.alpha2,
            ss_start=self.ss_start,
            ss_end=self.ss_end,
            total_steps=self.total_steps,
            lr=self.lr,
            lr_milestones=tuple(self.lr_milestones),
            batch_size=self.batch_size,
            seed=self.seed,
            temporal_stride=self.temporal_stride,
            tau=self.tau,
            l2_normalize=self.l2_normalize,
            cycle_start=self.cycle_start,
            palette_sample=self.palette_sample,
            checkpoint_every=self.checkpoint_every,
            bottleneck=BottleneckConfig(
                drop_count_probs=tuple(self.drop_count_probs),
                jitter_range=self.jitter_range,
                per_clip_dropout=self.per_clip_dropout,
                per_frame_jitter=self.per_frame_jitter,
            ),
            encoder=EncoderConfig(tuple(self.widths), self.norm),
        )

    def as_strings(self) -> dict[str, str]:
        return {f.name: format_value(getattr(self, f.name)) for f in fields(self)}

    def echo(self) -> str:
        items = sorted(self.as_strings().items())
        return "".join(f"{k}={v}\n" for k, v in items)


PRESET_OVERRIDES: dict[str, dict[str, Any]] = {
    "paper": {},
    "tiny": {"total_steps": 200, "lr": 2e-3, "widths": PRESETS["tiny"], "checkpoint_every": 0, "out": "runs/tiny"},
}


class ConfigError(ValueError):
    pass


def _fields() -> dict[str, dataclasses.Field]:
    return {f.name: f for f in fields(RunConfig)}


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v) if not isinstance(v, float) else repr(v)


def parse_value(key: str, text: str) -> Any:
    f = _fields().get(key)
    if f is None:
        raise ConfigError(f"unknown config key {key!r}")
    default = f.default
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            elem = type(default[0])
            return tuple(elem(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key} (expected {type(default).__name__})") from None
    return text


def parse_lines(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in _fields():
            raise ConfigError(f"{origin}:{lineno}: unknown config key {k!r}")
        out[k] = v
    return out


def parse_overrides(args: Iterable[str]) -> dict[str, str]:
    """``["--lr", "1e-3", "--n=4"]`` -> ``{"lr": "1e-3", "n": "4"}``."""
    args = list(args)
    out: dict[str, str] = {}
    i = 0
    while i < len(args):
        a = args[i]
        if not a.startswith("--"):
            raise ConfigError(f"unexpected argument {a!r}")
        key = a[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"--{key} needs a value")
            i += 1
            val = args[i]
        if key not in _fields():
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = val
        i += 1
    return out


def build(text_values: dict[str, str]) -> RunConfig:
    """Apply string values on top of the preset they name (default ``paper``)."""
    preset = text_values.get("preset", "paper")
    base = RunConfig.for_preset(preset)
    updates = {k: parse_value(k, v) for k, v in text_values.items() if k != "preset"}
    try:
        return dataclasses.replace(base, **updates)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load(path: Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    values = parse_lines(Path(path).read_text(), str(path)) if path else {}
    values.update(parse_overrides(overrides))
    return build(values)


def parse_echo(text: str) -> RunConfig:
    return build(parse_lines(text))


def help_text() -> str:
    """One line per key: default, provenance, and the tiny preset value when it differs."""
    tiny = RunConfig.for_preset("tiny")
    lines = []
    for f in fields(RunConfig):
        default = format_value(f.default)
        line = f"  --{f.name:<18} {f.metadata['help']}; default {default} ({f.metadata['source']})"
        if f.name in PRESET_OVERRIDES["tiny"]:
            line += f"; tiny preset {format_value(getattr(tiny, f.name))} ({CHOSEN})"
        lines.append(line)
    return "\n".join(lines)
