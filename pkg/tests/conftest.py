"""Shared fixtures: desk-scale pipeline runs and the acceptance report."""
import shutil
from dataclasses import dataclass
from pathlib import Path

import pytest

from epcdiff.cli import cmd_eval, cmd_sample, cmd_train_diffusion, run_pipeline
from epcdiff.config import RunConfig

DESK_SEEDS = (0, 1, 2)

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, name: str, passed: bool, detail: str) -> None:
    """Store one acceptance line; printed again in the terminal summary."""
    ACCEPTANCE[number] = (name, bool(passed), detail)
    print(f"criterion {number:2d} {name}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:2d} {name}: {'PASS' if passed else 'FAIL'} ({detail})")


@dataclass
class DeskRun:
    seed: int
    out: Path
    result: dict  # return value of run_pipeline, or the sample/eval pair for variants


def desk_config(seed: int, eq: float = 0.1) -> RunConfig:
    cfg = RunConfig(seed=seed)
    cfg.loss.eq = eq
    return cfg


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="session")
def desk_runs(desk_root) -> dict[int, DeskRun]:
    """Full default pipeline (8/2 pairs, 64x64x8, 200 epochs) for each seed."""
    runs = {}
    for seed in DESK_SEEDS:
        out = desk_root / f"seed{seed}"
        runs[seed] = DeskRun(seed, out, run_pipeline(desk_config(seed), out))
    return runs


@pytest.fixture(scope="session")
def desk_runs_no_eq(desk_runs, desk_root) -> dict[int, DeskRun]:
    """Same seeds, data and autoencoder with the equivariance weight set to zero."""
    runs = {}
    for seed, run in desk_runs.items():
        cfg = desk_config(seed, eq=0.0)
        out = desk_root / f"seed{seed}_eq0"
        for sub in ("data", "ae"):
            shutil.copytree(run.out / sub, out / sub)
        cmd_train_diffusion(cfg, out)
        sampled = cmd_sample(cfg, out)
        runs[seed] = DeskRun(seed, out, {"sample": sampled, "eval": cmd_eval(cfg, out)})
    return runs


@pytest.fixture(scope="session")
def desk_rerun(desk_runs, desk_root) -> DeskRun:
    """Second independent full pipeline with the configuration and seed of the first run."""
    seed = DESK_SEEDS[0]
    out = desk_root / f"seed{seed}_again"
    return DeskRun(seed, out, run_pipeline(desk_config(seed), out))
