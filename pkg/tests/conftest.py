import time
from dataclasses import dataclass

import numpy as np
import pytest

from corrflow.checkpoint import Checkpoint, save_checkpoint
from corrflow.config import RunConfig
from corrflow.synthetic import SyntheticSpec, generate_clip
from corrflow.training import TrainConfig, TrainingData, TrainResult, train


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@dataclass
class TrainedFixture:
    config: RunConfig
    train_config: TrainConfig
    data: TrainingData
    result: TrainResult
    seconds: float
    checkpoint_path: object


def desk_clips(num_clips=100, seed=0, spec=SyntheticSpec()):
    """The same clips ``corrflow synth --seed <seed>`` writes to disk."""
    seeds = np.random.SeedSequence(seed).generate_state(num_clips)
    return [generate_clip(spec, int(s)) for s in seeds]


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Tiny preset trained once for 200 steps on 100 synthetic 32x32 clips."""
    cfg = RunConfig.for_preset("tiny")
    tcfg = cfg.to_train_config()
    clips = desk_clips()
    t0 = time.perf_counter()
    data = TrainingData.fit([c.frames for c in clips], tcfg.palette_sample, tcfg.seed)
    result = train(data, tcfg)
    seconds = time.perf_counter() - t0
    path = tmp_path_factory.mktemp("trained") / "final.cflw"
    save_checkpoint(path, Checkpoint(cfg.as_strings(), result.palette, result.params, result.opt_state, tcfg.total_steps))
    return TrainedFixture(cfg, tcfg, data, result, seconds, path)
