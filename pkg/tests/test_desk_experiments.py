"""Desk-scale training runs; deselected by default, run with ``pytest -m slow``."""

from pathlib import Path

import pytest

from mutualattack.cli import main as cli_main
from mutualattack.config import load_config
from mutualattack.data import load_dataset
from mutualattack.generator import load_generator
from mutualattack.harness import TargetModel, transfer_matrix
from mutualattack.rundir import RunDirectory, read_jsonl
from mutualattack.targets import load_target

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)

DESK_CONFIG = """\
class_names: [airplane, automobile, bird, cat, deer]
synthetic_per_class: 400
targets:
  cnn: cnn
group_map:
  surrogate: [surrogate]
  cnn: [cnn]
"""


def train(tmp_path: Path, command: str, seed: int) -> Path:
    out = tmp_path / f"{command}_{seed}"
    cfg = tmp_path / f"{command}_{seed}.yaml"
    cfg.write_text(DESK_CONFIG + f"seed: {seed}\noutput_dir: {out}\n", encoding="utf-8")
    assert cli_main([command, "--config", str(cfg), "--quiet"]) == 0
    return cfg


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("desk")
    return {seed: (train(base, "train", seed), train(base, "attack-only", seed)) for seed in SEEDS}


def held_out_adv_acc(cfg_path: Path, target_run: RunDirectory) -> float:
    cfg = load_config(cfg_path, apply_env=False)
    run_dir = RunDirectory(cfg.output_dir)
    state = load_generator(run_dir.latest_checkpoint())
    target = TargetModel.from_module("cnn", "cnn", load_target(target_run.target_path("cnn")))
    report = transfer_matrix([target], load_dataset(cfg).val, generator=state, epsilon=cfg.epsilon)
    return report.adversarial_accuracies()["cnn"]


@pytest.mark.parametrize("seed", SEEDS)
def test_attack_halves_surrogate_accuracy(desk_runs, seed):
    iterative, _ = desk_runs[seed]
    records = read_jsonl(RunDirectory(load_config(iterative, apply_env=False).output_dir).iterations_log)
    assert len(records) == 10
    last = records[-1]
    assert last["surrogate_clean_acc"] > 0.5
    assert last["surrogate_adv_acc"] <= 0.5 * last["surrogate_clean_acc"]


def test_iterative_training_transfers_at_least_as_well(desk_runs):
    wins = 0
    for iterative, attack_only in desk_runs.values():
        # both generators face the same locally trained target
        targets = RunDirectory(load_config(iterative, apply_env=False).output_dir)
        if held_out_adv_acc(iterative, targets) <= held_out_adv_acc(attack_only, targets):
            wins += 1
    assert wins >= 2
