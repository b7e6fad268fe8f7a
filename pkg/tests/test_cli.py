import json
import runpy
from pathlib import Path

import pytest
import torch

from mutualattack import __version__
from mutualattack.cli import main as cli_main
from mutualattack.encoders.tiny import TinyDualEncoder
from mutualattack.generator import forward, load_generator
from mutualattack.rundir import LOCK_NAME, RunDirectory, read_jsonl
from mutualattack.targets import load_target

# ---------- helpers ----------

TINY_CONFIG = """\
class_names: [cat, dog, ship, truck]
synthetic_per_class: 10
image_size: 8
tiny_dim: 16
tiny_hidden: 16
tiny_token_dim: 8
generator_ngf: 4
generator_blocks: 1
outer_iterations: 2
num_g: 1
batch_size: 16
defense_batch_size: 16
target_epochs: 1
targets:
  mlp: mlp
group_map:
  surrogate: [surrogate]
  mlp: [mlp]
"""


def write(p: Path, content: str) -> Path:
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(content, encoding="utf-8")
    return p


@pytest.fixture
def tiny_config(tmp_path) -> Path:
    return write(tmp_path / "tiny.yaml", TINY_CONFIG + f"output_dir: {tmp_path / 'run'}\n")


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One tiny training run shared by the read-only tests below."""
    base = tmp_path_factory.mktemp("cli")
    cfg = write(base / "tiny.yaml", TINY_CONFIG + f"output_dir: {base / 'run'}\n")
    assert cli_main(["train", "--config", str(cfg), "--quiet"]) == 0
    return cfg, RunDirectory(base / "run")


# ---------- tests ----------


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli_main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli_main(["explode"])
    assert exc.value.code == 2


def test_unknown_defense_is_usage_error(tiny_config):
    with pytest.raises(SystemExit) as exc:
        cli_main(["train", "--config", str(tiny_config), "--defense", "magic"])
    assert exc.value.code == 2


def test_missing_config_exits_one(tmp_path, capsys):
    missing = tmp_path / "absent.yaml"
    assert cli_main(["train", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_invalid_config_exits_one(tmp_path, capsys):
    cfg = write(tmp_path / "bad.yaml", "epsilon: -1\n")
    assert cli_main(["train", "--config", str(cfg)]) == 1
    assert "epsilon" in capsys.readouterr().err


def test_locked_run_directory_exits_one(tiny_config, tmp_path, capsys):
    write(tmp_path / "run" / LOCK_NAME, "12345")
    assert cli_main(["train", "--config", str(tiny_config), "--quiet"]) == 1
    assert "in use" in capsys.readouterr().err


def test_selfcheck_passes(capsys):
    assert cli_main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert "PASS group-overall" in out
    assert "All 9 checks passed" in out


def test_train_writes_run_directory(trained_run):
    _, run_dir = trained_run
    assert run_dir.config_path.is_file()
    assert run_dir.surrogate_path.is_file()
    assert run_dir.target_path("mlp").is_file()
    assert run_dir.checkpoint_path(2).is_file()
    assert run_dir.prompt_path(2).is_file()
    records = read_jsonl(run_dir.iterations_log)
    assert [r["iteration"] for r in records] == [1, 2]
    assert set(records[-1]["target_adv_acc"]) == {"mlp"}
    assert not (run_dir.root / LOCK_NAME).exists()


def test_evaluate_and_report(trained_run, capsys):
    cfg, run_dir = trained_run
    assert cli_main(["evaluate", "--config", str(cfg), "--quiet"]) == 0
    for split in ("train", "val"):
        data = json.loads((run_dir.reports_dir / f"transfer_{split}.json").read_text(encoding="utf-8"))
        assert [r["name"] for r in data["results"]] == ["surrogate", "mlp"]
        assert data["epsilon"] == 0.04
    csv_lines = (run_dir.reports_dir / "transfer_val.csv").read_text(encoding="utf-8").splitlines()
    assert csv_lines[0] == "split,target,group,clean_acc,adv_acc,attack_success_rate"
    assert csv_lines[-1].startswith("val,overall,,")

    capsys.readouterr()
    assert cli_main(["report", "--config", str(cfg)]) == 0
    assert "transfer_val.json" in capsys.readouterr().out


def test_report_detects_inconsistent_overall(trained_run, tmp_path):
    cfg, run_dir = trained_run
    assert cli_main(["evaluate", "--config", str(cfg), "--quiet", "--no-attack"]) == 0
    copy = RunDirectory(tmp_path / "copy")
    copy.reports_dir.mkdir(parents=True)
    data = json.loads((run_dir.reports_dir / "transfer_val.json").read_text(encoding="utf-8"))
    data["overall"] = data["overall"] + 0.5
    write(copy.reports_dir / "transfer_val.json", json.dumps(data))
    assert cli_main(["report", "--config", str(cfg), "--output-dir", str(copy.root)]) == 1


def test_no_attack_gives_equal_accuracies(trained_run):
    cfg, run_dir = trained_run
    assert cli_main(["evaluate", "--config", str(cfg), "--quiet", "--no-attack"]) == 0
    data = json.loads((run_dir.reports_dir / "transfer_val.json").read_text(encoding="utf-8"))
    assert all(r["clean_acc"] == r["adv_acc"] for r in data["results"])
    assert data["overall"] == data["clean_overall"]


def test_defend_writes_report(trained_run):
    cfg, run_dir = trained_run
    assert cli_main(["defend", "--config", str(cfg), "--quiet"]) == 0
    data = json.loads((run_dir.reports_dir / "defense.json").read_text(encoding="utf-8"))
    assert data["p_true_after"] >= data["p_true_before"] - 1e-6
    assert len(data["prompt"].split()) == 4


def test_evaluate_without_checkpoint_exits_one(tiny_config, capsys):
    assert cli_main(["evaluate", "--config", str(tiny_config), "--quiet"]) == 1
    assert "no generator checkpoint" in capsys.readouterr().err


def test_report_on_empty_run_exits_one(tiny_config, capsys):
    assert cli_main(["report", "--config", str(tiny_config)]) == 1
    assert "nothing to report" in capsys.readouterr().err


def test_attack_only_keeps_prompt(tiny_config, tmp_path):
    other = tmp_path / "attack_only"
    assert cli_main(["attack-only", "--config", str(tiny_config), "--output-dir", str(other), "--quiet"]) == 0
    records = read_jsonl(RunDirectory(other).iterations_log)
    assert {r["prompt"] for r in records} == {"a photo of a"}
    assert all(r["defense_strategy"] == "none" for r in records)


def test_module_entrypoint(monkeypatch):
    monkeypatch.setattr("sys.argv", ["mutualattack", "selfcheck"])
    with pytest.raises(SystemExit) as exc:
        runpy.run_module("mutualattack", run_name="__main__")
    assert exc.value.code == 0


def test_retraining_replaces_the_earlier_run(tiny_config, tmp_path):
    run_dir = RunDirectory(tmp_path / "run")
    text = tiny_config.read_text(encoding="utf-8")
    longer = write(tmp_path / "longer.yaml", text.replace("outer_iterations: 2", "outer_iterations: 3"))
    assert cli_main(["train", "--config", str(longer), "--quiet"]) == 0
    assert run_dir.latest_checkpoint() == run_dir.checkpoint_path(3)

    shorter = write(tmp_path / "shorter.yaml", text.replace("outer_iterations: 2", "outer_iterations: 1"))
    assert cli_main(["train", "--config", str(shorter), "--quiet"]) == 0
    assert run_dir.latest_checkpoint() == run_dir.checkpoint_path(1)
    assert not run_dir.checkpoint_path(3).exists()
    assert not run_dir.prompt_path(3).exists()
    assert [r["iteration"] for r in read_jsonl(run_dir.iterations_log)] == [1]


def test_changed_classes_rebuild_cached_models(tiny_config, tmp_path):
    run_dir = RunDirectory(tmp_path / "run")
    assert cli_main(["train", "--config", str(tiny_config), "--quiet"]) == 0
    assert load_target(run_dir.target_path("mlp"))(torch.zeros(1, 3, 8, 8)).shape == (1, 4)

    five = tiny_config.read_text(encoding="utf-8").replace(
        "class_names: [cat, dog, ship, truck]", "class_names: [cat, dog, ship, truck, gizmo]"
    )
    changed = write(tmp_path / "five.yaml", five)
    assert cli_main(["train", "--config", str(changed), "--quiet"]) == 0
    assert TinyDualEncoder.load(run_dir.surrogate_path).has_token("gizmo")
    assert load_target(run_dir.target_path("mlp"))(torch.zeros(1, 3, 8, 8)).shape == (1, 5)


def test_same_config_and_seed_reproduce_the_run(tmp_path):
    runs = []
    for name in ("first", "second"):
        cfg = write(tmp_path / f"{name}.yaml", TINY_CONFIG + f"output_dir: {tmp_path / name}\n")
        assert cli_main(["train", "--config", str(cfg), "--quiet"]) == 0
        runs.append(RunDirectory(tmp_path / name))
    first, second = runs

    assert first.iterations_log.read_bytes() == second.iterations_log.read_bytes()
    assert first.train_log.read_bytes() == second.train_log.read_bytes()

    images = torch.rand(6, 3, 8, 8, generator=torch.Generator().manual_seed(123))
    with torch.no_grad():
        out_first = forward(load_generator(first.latest_checkpoint()), images)
        out_second = forward(load_generator(second.latest_checkpoint()), images)
    assert torch.equal(out_first, out_second)
