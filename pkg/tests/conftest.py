import os
from pathlib import Path

import pytest

from absorber.checkpoint import load_checkpoint, save_checkpoint
from absorber.corpus import pretrain_toy, pretraining_corpus
from absorber.model import ModelConfig

# The pretrained toy model used by the acceptance suite. Building it takes a
# while on one core, so it is cached; delete the file to rebuild.
TOY_PRETRAIN = {"steps": 3000, "seed": 0, "batch_size": 16, "lr": 2e-3, "docs": 6000}

_RESULTS: list[str] = []


def toy_checkpoint_path() -> Path:
    override = os.environ.get("ABSORBER_TOY_CHECKPOINT")
    if override:
        return Path(override)
    tag = "_".join(f"{k}{v}" for k, v in TOY_PRETRAIN.items())
    return Path(__file__).parent / ".cache" / f"toy_{tag}.absb"


def build_toy_model():
    corpus = pretraining_corpus(TOY_PRETRAIN["docs"], TOY_PRETRAIN["seed"])
    return pretrain_toy(ModelConfig(), corpus, TOY_PRETRAIN["steps"], TOY_PRETRAIN["seed"],
                        batch_size=TOY_PRETRAIN["batch_size"], lr=TOY_PRETRAIN["lr"])


@pytest.fixture(scope="session")
def pretrained():
    path = toy_checkpoint_path()
    if not path.exists():
        save_checkpoint(build_toy_model(), path, dict(TOY_PRETRAIN))
    return load_checkpoint(path)[0]


@pytest.fixture(scope="session")
def record():
    def add(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _RESULTS.append(line)
        print(line)
        return passed
    return add


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
