from __future__ import annotations

import argparse
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from . import __version__, console, registry
from .config import SURROGATE_FIELDS, TARGET_FIELDS, RunConfig, load_config, save_config
from .data import DatasetSplits, load_adversarial_pairs, load_dataset, sample_batch
from .defense.candidates import CandidateProvider
from .defense.prompts import build_head
from .desk import align_tiny_surrogate, desk_vocabulary
from .encoders.base import DualEncoder
from .encoders.tiny import TinyDualEncoder
from .errors import ConfigurationError, MutualAttackError, TrainingDivergenceError
from .generator import adversarial_batch, load_generator, new_generator_state
from .harness import SURROGATE_TARGET, TargetModel, transfer_matrix
from .models import PromptTemplate
from .reporting import plot_iteration_curves, read_report, recompute_overall, render_table, write_report
from .rundir import RunDirectory, read_jsonl
from .selfcheck import run_checks
from .targets import build_target, load_target, save_target, train_target
from .trainer import DefenseContext, MutualTrainer, prompt_defense, seed_everything

logger = logging.getLogger(__name__)

SPLITS = ("train", "val")


@dataclass
class Session:
    """Everything a command needs, built once from the configuration."""

    cfg: RunConfig
    run_dir: RunDirectory
    dataset: DatasetSplits
    encoder: DualEncoder
    provider: CandidateProvider
    temperature: float
    prompt: PromptTemplate

    def defense_context(self) -> DefenseContext:
        return DefenseContext(
            encoder=self.encoder,
            class_names=self.dataset.class_names,
            temperature=self.temperature,
            provider=self.provider,
            rho=self.cfg.rho,
            k=self.cfg.k,
            rho_percentile=self.cfg.rho_percentile,
        )


def _group_of(cfg: RunConfig, name: str) -> str:
    for group, members in cfg.group_map.items():
        if name in members:
            return group
    raise ConfigurationError(f"target '{name}' has no group in group_map")


def _build_surrogate(
    cfg: RunConfig,
    run_dir: RunDirectory,
    dataset: DatasetSplits,
    provider: CandidateProvider,
    quiet: bool,
) -> DualEncoder:
    """A pretrained or saved surrogate, or a fresh tiny one aligned on the training split."""
    vocabulary = desk_vocabulary(dataset.class_names, cfg.prompt_template(), provider)
    if cfg.surrogate == "tiny" and not cfg.surrogate_checkpoint:
        key = cfg.digest(SURROGATE_FIELDS)
        if run_dir.is_cached(run_dir.surrogate_path, key):
            return TinyDualEncoder.load(run_dir.surrogate_path).freeze()
        encoder = registry.get("surrogate", "tiny")(cfg, vocabulary)
        console.info("Aligning the tiny surrogate on the training split...")
        align_tiny_surrogate(
            encoder,
            dataset.train,
            dataset.class_names,
            cfg.prompt_template(),
            provider=provider,
            seed=cfg.seed,
            quiet=quiet,
        )
        encoder.save(run_dir.surrogate_path)
        run_dir.remember(run_dir.surrogate_path, key)
        return encoder.freeze()
    encoder = registry.get("surrogate", cfg.surrogate)(cfg, vocabulary)
    return encoder.freeze()


def open_session(cfg: RunConfig, run_dir: RunDirectory, quiet: bool = False) -> Session:
    seed_everything(cfg.seed)
    provider: CandidateProvider = registry.get("candidate_provider", cfg.candidate_provider)(cfg)
    dataset = load_dataset(cfg)
    encoder = _build_surrogate(cfg, run_dir, dataset, provider, quiet)
    return Session(
        cfg=cfg,
        run_dir=run_dir,
        dataset=dataset,
        encoder=encoder,
        provider=provider,
        temperature=cfg.tau or encoder.default_temperature,
        prompt=cfg.prompt_template(),
    )


def build_targets(session: Session, quiet: bool = False) -> list[TargetModel]:
    """The surrogate under the initial prompt (when grouped), then every configured target.

    A target spec is either a saved target blob (``*.pt``) or a desk family
    name; a family is trained once and cached under ``targets/`` until the
    data or training settings change.
    """
    cfg, run_dir = session.cfg, session.run_dir
    targets: list[TargetModel] = []
    if any(SURROGATE_TARGET in members for members in cfg.group_map.values()):
        head = build_head(session.dataset.class_names, session.prompt, session.temperature)
        targets.append(
            TargetModel.from_surrogate(session.encoder, head, _group_of(cfg, SURROGATE_TARGET))
        )
    for name, spec in cfg.targets.items():
        cached = run_dir.target_path(name)
        key = cfg.digest(TARGET_FIELDS, spec)
        if spec.endswith(".pt"):
            net = load_target(spec)
        elif run_dir.is_cached(cached, key):
            net = load_target(cached)
        else:
            net = build_target(spec, len(session.dataset.class_names), cfg.channels, cfg.image_size)
            console.info(f"Training target '{name}' ({spec})...")
            train_target(net, session.dataset.train, epochs=cfg.target_epochs, seed=cfg.seed, quiet=quiet)
            save_target(net, cached)
            run_dir.remember(cached, key)
        targets.append(TargetModel.from_module(name, _group_of(cfg, name), net))
    return targets


def _checkpoint(run_dir: RunDirectory, checkpoint: str | None) -> Path:
    path = Path(checkpoint) if checkpoint else run_dir.latest_checkpoint()
    if path is None:
        raise FileNotFoundError(f"no generator checkpoint in {run_dir.root / 'checkpoints'}")
    return path


def cmd_train(cfg: RunConfig, defense: str = "prompt", quiet: bool = False) -> int:
    run_dir = RunDirectory(cfg.output_dir)
    with run_dir.lock():
        save_config(cfg, run_dir.config_path)
        session = open_session(cfg, run_dir, quiet)
        held_out = [t for t in build_targets(session, quiet) if t.name != SURROGATE_TARGET]
        state = new_generator_state(
            epsilon=cfg.epsilon,
            lr=cfg.lr,
            channels=cfg.channels,
            ngf=cfg.generator_ngf,
            n_blocks=cfg.generator_blocks,
            scale=cfg.generator_scale,
            seed=cfg.seed,
        )
        trainer = MutualTrainer(
            session.encoder,
            session.dataset.class_names,
            cfg.attack_config(session.temperature),
            session.provider,
            schedule=cfg.schedule(),
            defense=defense,
            rho=cfg.rho,
            k=cfg.k,
            rho_percentile=cfg.rho_percentile,
            targets=held_out,
            run_dir=run_dir,
            quiet=quiet,
        )
        console.info(f"Training with defense '{defense}' for {cfg.outer_iterations} iteration(s)...")
        try:
            result = trainer.run(state, session.prompt, session.dataset)
        except TrainingDivergenceError:
            console.warn(f"{len(trainer.records)} completed iteration(s) kept in {run_dir.root}")
            raise

    last = result.records[-1]
    console.info(f"Final prompt: '{result.prompt}'")
    console.info(
        f"Surrogate accuracy: clean {last.surrogate_clean_acc:.3f}, "
        f"adversarial {last.surrogate_adv_acc:.3f}"
    )
    console.success(f"Wrote {len(result.records)} iteration(s) to {run_dir.root}")
    return 0


def cmd_defend(
    cfg: RunConfig, checkpoint: str | None = None, prompt: str | None = None, quiet: bool = False
) -> int:
    run_dir = RunDirectory(cfg.output_dir)
    with run_dir.lock():
        session = open_session(cfg, run_dir, quiet)
        state = load_generator(_checkpoint(run_dir, checkpoint))
        start = PromptTemplate.from_text(prompt) if prompt else (run_dir.latest_prompt() or session.prompt)
        batch = sample_batch(session.dataset.train, cfg.defense_batch_size, cfg.seed)
        result = prompt_defense(start, adversarial_batch(state, batch), session.defense_context())
        out = run_dir.reports_dir / "defense.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    scores = ", ".join(f"{s:.4f}" for s in result.report.scores)
    console.info(f"Saliency: {scores} (rho {result.report.threshold:.4f})")
    console.info(f"'{start}' -> '{result.prompt}'")
    console.info(f"Mean p(y_true): {result.p_true_before:.4f} -> {result.p_true_after:.4f}")
    console.success(f"Wrote {out}")
    return 0


def cmd_evaluate(
    cfg: RunConfig,
    checkpoint: str | None = None,
    dataset: str | None = None,
    adversarial_manifest: str | None = None,
    no_attack: bool = False,
    quiet: bool = False,
) -> int:
    run_dir = RunDirectory(cfg.output_dir)
    written: list[Path] = []
    with run_dir.lock():
        session = open_session(cfg, run_dir, quiet)
        targets = build_targets(session, quiet)
        source_name = session.dataset.name

        if adversarial_manifest:
            adv = load_adversarial_pairs(adversarial_manifest, cfg.image_size, cfg.channels)
            report = transfer_matrix(
                targets,
                adv.clean,
                adversarial=adv,
                split="external",
                epsilon=cfg.epsilon,
                source_dataset=source_name,
                eval_dataset=Path(adversarial_manifest).stem,
            )
            written.append(write_report(report, run_dir.reports_dir)[0])
            console.info("\n" + render_table(report))
        else:
            state = None if no_attack else load_generator(_checkpoint(run_dir, checkpoint))
            eval_data = load_dataset(cfg, manifest=dataset) if dataset else session.dataset
            if len(eval_data.class_names) != len(session.dataset.class_names):
                raise ConfigurationError(
                    f"evaluation dataset has {len(eval_data.class_names)} classes, "
                    f"targets were built for {len(session.dataset.class_names)}"
                )
            for split in SPLITS:
                report = transfer_matrix(
                    targets,
                    eval_data.split(split),
                    generator=state,
                    split=split,
                    epsilon=cfg.epsilon,
                    source_dataset=source_name,
                    eval_dataset=eval_data.name,
                )
                written.append(write_report(report, run_dir.reports_dir)[0])
                console.info("\n" + render_table(report))

    for path in written:
        console.success(f"Wrote {path}")
    return 0


def cmd_report(cfg: RunConfig, compare: str | None = None) -> int:
    run_dir = RunDirectory(cfg.output_dir)
    reports = sorted(run_dir.reports_dir.glob("transfer_*.json"))
    if not reports and not run_dir.iterations_log.is_file():
        raise FileNotFoundError(f"nothing to report in {run_dir.root}; run 'evaluate' or 'train' first")

    for path in reports:
        report = read_report(path)
        rebuilt = recompute_overall(report)
        console.info(f"{path.name}\n" + render_table(report))
        if abs(rebuilt - report.overall) > 1e-9:
            console.warn(f"{path.name}: stored overall {report.overall} != recomputed {rebuilt}")
            return 1

    if run_dir.iterations_log.is_file():
        runs = {run_dir.root.name or "run": read_jsonl(run_dir.iterations_log)}
        if compare:
            runs[Path(compare).name or "compare"] = read_jsonl(RunDirectory(compare).iterations_log)
        try:
            out = plot_iteration_curves(runs, run_dir.reports_dir / "iterations.png")
        except MutualAttackError as exc:
            console.warn(str(exc))
        else:
            console.success(f"Wrote {out}")
    return 0


def cmd_selfcheck() -> int:
    results = run_checks()
    for r in results:
        if r.passed:
            console.success(f"PASS {r.name}")
        else:
            console.error(f"FAIL {r.name}: {r.detail}")
    failed = sum(not r.passed for r in results)
    if failed:
        console.error(f"{failed} of {len(results)} check(s) failed")
        return 1
    console.success(f"All {len(results)} checks passed")
    return 0


def _load(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "output_dir", None):
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mutualattack",
        description="Train and evaluate universal perturbation generators against a dual encoder",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", default=None, help="Run configuration YAML (defaults if omitted)")
        p.add_argument("--output-dir", default=None, help="Run directory (overrides the config)")
        p.add_argument("--quiet", action="store_true", help="Hide progress bars")
        return p

    p_train = with_config(sub.add_parser("train", help="Alternate generator updates and prompt defense"))
    p_train.add_argument(
        "--defense",
        default="prompt",
        choices=registry.available("defense"),
        help="Prompt update between attack phases",
    )
    with_config(sub.add_parser("attack-only", help="Train the generator with the prompt held fixed"))

    p_defend = with_config(sub.add_parser("defend", help="One defense pass against a checkpoint"))
    p_defend.add_argument("--checkpoint", default=None, help="Generator checkpoint (latest if omitted)")
    p_defend.add_argument("--prompt", default=None, help="Starting prompt (latest snapshot if omitted)")

    p_eval = with_config(sub.add_parser("evaluate", help="Transfer report on train and val splits"))
    p_eval.add_argument("--checkpoint", default=None, help="Generator checkpoint (latest if omitted)")
    p_eval.add_argument("--dataset", default=None, help="Evaluate on another dataset manifest")
    p_eval.add_argument(
        "--adversarial-manifest", default=None, help="Evaluate externally produced adversarial images"
    )
    p_eval.add_argument("--no-attack", action="store_true", help="Clean accuracy only")

    p_report = with_config(sub.add_parser("report", help="Tables and iteration curves of a run"))
    p_report.add_argument("--compare", default=None, help="Second run directory for the curves")

    sub.add_parser("selfcheck", help="Run the built-in invariant checks")

    args = parser.parse_args(argv)
    console.configure_logging(args.verbose)

    try:
        if args.command == "selfcheck":
            return cmd_selfcheck()
        cfg = _load(args)
        if args.command == "train":
            return cmd_train(cfg, args.defense, args.quiet)
        if args.command == "attack-only":
            return cmd_train(cfg, "none", args.quiet)
        if args.command == "defend":
            return cmd_defend(cfg, args.checkpoint, args.prompt, args.quiet)
        if args.command == "evaluate":
            return cmd_evaluate(
                cfg, args.checkpoint, args.dataset, args.adversarial_manifest, args.no_attack, args.quiet
            )
        if args.command == "report":
            return cmd_report(cfg, args.compare)
    except (MutualAttackError, FileNotFoundError) as exc:
        console.error(str(exc))
        logger.debug("command failed", exc_info=True)
        return 1
    return 0
