import os
import sys
from pathlib import Path

import hypothesis

sys.path.insert(0, str(Path(__file__).parent))

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.register_profile("ci", deadline=None, max_examples=200)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))

import pytest

from flowplan import acoustic as A
from flowplan import planner as P
from flowplan import world as W
from flowplan.training import TrainConfig

SMALL = TrainConfig(steps=300, batch_size=32, base_lr=2e-3, warmup_steps=30, decay_interval=150, seed=0)


@pytest.fixture(scope="session")
def shard():
    return W.build_dataset(256, 0)


@pytest.fixture(scope="session")
def heldout():
    return W.build_dataset(64, 1)


@pytest.fixture(scope="session")
def vae(shard):
    return A.train_vae(shard, A.VaeConfig(train=SMALL))[0]


@pytest.fixture(scope="session")
def synth(shard, vae):
    cfg = A.SynthConfig(d=4, head_hidden=16, width=32, depth=2, train=SMALL)
    return A.train_synthesizer(shard, vae, cfg)


@pytest.fixture(scope="session")
def planner(shard, synth):
    return P.train_planner(shard, synth[1], P.PlannerConfig(width=32, depth=2, train=SMALL))


# one line per acceptance criterion, printed after the run even when output is captured
VERDICTS: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> bool:
    VERDICTS.append(f"criterion {number} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
