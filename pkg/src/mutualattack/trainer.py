"""
Alternating training of the perturbation generator and the prompt.

Each outer iteration runs ``num_g`` epochs of generator updates against the
current prompt's class text embeddings, then one defense pass that rewrites
the prompt on a fresh batch of adversarial images. The surrogate itself
never changes.

Defense strategies are looked up in the registry under ``defense``:

- ``prompt``: saliency-guided token replacement (the full method)
- ``none``: the prompt stays fixed (attack-only arm)
- ``random``: every token replaced by a random candidate (ablation arm)
"""

from __future__ import annotations

import hashlib
import logging
import random
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from tqdm import tqdm

from . import registry
from .attack import AttackConfig, attack_step
from .checkpoints import BLOB_VERSION
from .data import DatasetSplits, make_loader, sample_batch
from .defense.candidates import CandidateProvider
from .defense.prompts import TextFeatureCache, build_text_input, fingerprint
from .defense.saliency import DefenseResult, PromptScorer, defend, random_prompt
from .encoders.base import DualEncoder, normalize, predict_from_features
from .errors import InvariantViolationError, TrainingDivergenceError
from .generator import GeneratorState, adversarial_batch, save_generator
from .harness import TargetModel, accuracy
from .models import (
    AdversarialBatch,
    AttackLossReport,
    ImageBatch,
    IterationRecord,
    PromptTemplate,
    SaliencyReport,
    TrainSchedule,
)
from .rundir import RunDirectory, read_jsonl

logger = logging.getLogger(__name__)

# p(y_true) may drop by float rounding only.
_PROGRESS_TOLERANCE = 1e-6


def seed_everything(seed: int) -> None:
    """Seed every random source and ask torch for deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class DefenseContext:
    encoder: DualEncoder
    class_names: list[str]
    temperature: float
    provider: CandidateProvider
    rho: float | None = None
    k: int = 10
    rho_percentile: float = 60.0
    rng: random.Random = field(default_factory=lambda: random.Random(0))


DefenseStrategy = Callable[[PromptTemplate, AdversarialBatch, DefenseContext], "DefenseResult | None"]


def prompt_defense(prompt: PromptTemplate, adv: AdversarialBatch, ctx: DefenseContext) -> DefenseResult:
    return defend(
        prompt,
        adv,
        ctx.encoder,
        ctx.class_names,
        ctx.temperature,
        ctx.provider,
        rho=ctx.rho,
        k=ctx.k,
        rho_percentile=ctx.rho_percentile,
    )


def no_defense(prompt: PromptTemplate, adv: AdversarialBatch, ctx: DefenseContext) -> None:
    return None


def random_prompt_defense(
    prompt: PromptTemplate, adv: AdversarialBatch, ctx: DefenseContext
) -> DefenseResult:
    new_prompt = random_prompt(prompt, ctx.provider, ctx.rng, accept=ctx.encoder.has_token, k=ctx.k)
    scorer = PromptScorer(ctx.encoder, ctx.class_names, adv.adversarial, ctx.temperature)
    replacements = {
        n: (prompt.token(n), new_prompt.token(n))
        for n in range(1, prompt.m + 1)
        if prompt.token(n) != new_prompt.token(n)
    }
    return DefenseResult(
        prompt=new_prompt,
        report=SaliencyReport(scores=(), threshold=0.0, update_set=tuple(range(1, prompt.m + 1))),
        replacements=replacements,
        p_true_before=float(scorer.label_probs(prompt, adv.labels).mean()),
        p_true_after=float(scorer.label_probs(new_prompt, adv.labels).mean()),
        guarded=False,
    )


def parameter_digest(module: torch.nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().to("cpu").contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class TrainResult:
    state: GeneratorState
    prompt: PromptTemplate
    records: list[IterationRecord]


class MutualTrainer:
    """
    Runs the attack/defense alternation and records one IterationRecord per cycle.

    When ``run_dir`` is given, every generator step is appended to the
    train log, and every iteration writes its record, a generator
    checkpoint and a prompt snapshot, so a run that aborts leaves all
    completed iterations on disk.
    """

    def __init__(
        self,
        encoder: DualEncoder,
        class_names: Sequence[str],
        attack: AttackConfig,
        provider: CandidateProvider,
        schedule: TrainSchedule = TrainSchedule(),
        defense: str = "prompt",
        rho: float | None = None,
        k: int = 10,
        rho_percentile: float = 60.0,
        targets: Sequence[TargetModel] = (),
        run_dir: RunDirectory | None = None,
        quiet: bool = True,
    ):
        self.encoder = encoder.freeze()
        self.class_names = list(class_names)
        self.attack = attack
        self.schedule = schedule
        self.defense_name = defense
        self.strategy: DefenseStrategy = registry.get("defense", defense)
        self.context = DefenseContext(
            encoder=self.encoder,
            class_names=self.class_names,
            temperature=attack.temperature,
            provider=provider,
            rho=rho,
            k=k,
            rho_percentile=rho_percentile,
            rng=random.Random(schedule.seed),
        )
        self.targets = list(targets)
        self.run_dir = run_dir
        self.quiet = quiet
        self.records: list[IterationRecord] = []

    # --- evaluation helpers ---

    @torch.no_grad()
    def _surrogate_acc(self, images: torch.Tensor, labels: torch.Tensor, prompt: PromptTemplate) -> float:
        texts = [build_text_input(c, prompt) for c in self.class_names]
        text_features = normalize(self.encoder.encode_text(texts))
        image_features = normalize(self.encoder.encode_image(images))
        return accuracy(predict_from_features(image_features, text_features), labels)

    def _fresh_text_features(self, cache: TextFeatureCache, prompt: PromptTemplate) -> torch.Tensor:
        """Cached features for ``prompt``, checked against an independent recomputation."""
        features = cache.features(prompt)
        with torch.no_grad():
            texts = [build_text_input(c, prompt) for c in self.class_names]
            expected = normalize(self.encoder.encode_text(texts))
        if fingerprint(features) != fingerprint(expected):
            raise InvariantViolationError(f"stale class text embeddings for prompt '{prompt}'")
        return features

    # --- main loop ---

    def run(self, state: GeneratorState, prompt: PromptTemplate, dataset: DatasetSplits) -> TrainResult:
        """Run ``schedule.outer_iterations`` cycles starting from ``state`` and ``prompt``.

        Raises:
            TrainingDivergenceError: If a loss becomes non-finite. Records of
                completed iterations are kept in ``self.records`` and on disk.
            InvariantViolationError: If the surrogate changed, the text
                embeddings went stale, or a guarded defense lowered p(y_true).
        """
        if len(dataset.train) == 0 or len(dataset.val) == 0:
            raise InvariantViolationError("training needs non-empty train and val splits")
        seed_everything(self.schedule.seed)
        surrogate_digest = parameter_digest(self.encoder)
        initial_prompt = prompt
        cache = TextFeatureCache(self.encoder, self.class_names)
        val = dataset.val
        clean_acc = self._surrogate_acc(val.images, val.labels, initial_prompt)
        self.records = []

        if self.run_dir is not None:
            self.run_dir.reset_outputs()

        outer = tqdm(range(self.schedule.outer_iterations), desc="outer", disable=self.quiet)
        for t in outer:
            text_features = self._fresh_text_features(cache, prompt)
            text_fp = fingerprint(text_features)
            try:
                loss = self._attack_phase(state, dataset.train, text_features, t)
            except TrainingDivergenceError:
                logger.error(
                    "loss diverged in iteration %d; %d completed iteration(s) kept",
                    t,
                    len(self.records),
                )
                raise

            defense_batch = sample_batch(
                dataset.train, self.schedule.defense_batch_size, self._seed_for("defense", t)
            )
            adv = adversarial_batch(state, defense_batch)
            result = self.strategy(prompt, adv, self.context)
            if result is not None:
                if result.guarded and result.p_true_after < result.p_true_before - _PROGRESS_TOLERANCE:
                    raise InvariantViolationError(
                        f"defense lowered mean p(y_true) from {result.p_true_before:.6f} "
                        f"to {result.p_true_after:.6f}"
                    )
                prompt = result.prompt
            state.iteration = t + 1

            held_out = adversarial_batch(state, val)
            record = IterationRecord(
                iteration=t + 1,
                seed=self.schedule.seed,
                loss=loss,
                prompt=str(prompt),
                text_fingerprint=text_fp,
                surrogate_clean_acc=clean_acc,
                surrogate_adv_acc=self._surrogate_acc(held_out.adversarial, val.labels, initial_prompt),
                surrogate_adv_acc_current=self._surrogate_acc(held_out.adversarial, val.labels, prompt),
                target_adv_acc={
                    target.name: accuracy(target.predict(held_out.adversarial), val.labels)
                    for target in self.targets
                },
                defense=result.to_dict() if result is not None else None,
            )
            self.records.append(record)
            self._persist(state, prompt, record)
            outer.set_postfix(loss=f"{loss.total:.4f}", adv_acc=f"{record.surrogate_adv_acc:.3f}")

        if parameter_digest(self.encoder) != surrogate_digest:
            raise InvariantViolationError("surrogate parameters changed during training")
        return TrainResult(state=state, prompt=prompt, records=list(self.records))

    def _seed_for(self, purpose: str, iteration: int, epoch: int = 0) -> int:
        offset = {"attack": 0, "defense": 1}[purpose]
        return (self.schedule.seed * 1_000_003 + iteration * 1009 + epoch * 2 + offset) % 2**63

    def _attack_phase(
        self, state: GeneratorState, train: ImageBatch, text_features: torch.Tensor, iteration: int
    ) -> AttackLossReport:
        reports: list[AttackLossReport] = []
        for epoch in range(self.schedule.num_g):
            loader = make_loader(
                train, self.schedule.batch_size, self._seed_for("attack", iteration, epoch)
            )
            batches = tqdm(loader, desc=f"iter {iteration + 1} epoch {epoch + 1}", leave=False, disable=self.quiet)
            for images, labels in batches:
                state, report = attack_step(
                    state, self.encoder, ImageBatch(images, labels), text_features, self.attack
                )
                reports.append(report)
                if self.run_dir is not None:
                    self.run_dir.append_jsonl(
                        self.run_dir.train_log,
                        {"iteration": iteration + 1, "epoch": epoch + 1, "step": state.steps, **report.to_dict()},
                    )
        return AttackLossReport.mean_of(reports)

    def _persist(self, state: GeneratorState, prompt: PromptTemplate, record: IterationRecord) -> None:
        if self.run_dir is None:
            return
        self.run_dir.append_jsonl(
            self.run_dir.iterations_log,
            {**record.to_dict(), "defense_strategy": self.defense_name, "blob_version": BLOB_VERSION},
        )
        save_generator(state, self.run_dir.checkpoint_path(record.iteration))
        self.run_dir.write_prompt(record.iteration, prompt, record.defense)


def run(
    schedule: TrainSchedule,
    generator_state: GeneratorState,
    prompt: PromptTemplate,
    surrogate: DualEncoder,
    dataset: DatasetSplits,
    attack: AttackConfig,
    provider: CandidateProvider,
    defense: str = "prompt",
    **options: Any,
) -> TrainResult:
    """Full alternating training; ``options`` go to :class:`MutualTrainer`."""
    trainer = MutualTrainer(
        surrogate, dataset.class_names, attack, provider, schedule=schedule, defense=defense, **options
    )
    return trainer.run(generator_state, prompt, dataset)


def run_attack_only(
    schedule: TrainSchedule,
    generator_state: GeneratorState,
    prompt: PromptTemplate,
    surrogate: DualEncoder,
    dataset: DatasetSplits,
    attack: AttackConfig,
    provider: CandidateProvider,
    **options: Any,
) -> TrainResult:
    """The same loop with the prompt held fixed."""
    return run(schedule, generator_state, prompt, surrogate, dataset, attack, provider, defense="none", **options)


def run_random_prompt(
    schedule: TrainSchedule,
    generator_state: GeneratorState,
    prompt: PromptTemplate,
    surrogate: DualEncoder,
    dataset: DatasetSplits,
    attack: AttackConfig,
    provider: CandidateProvider,
    **options: Any,
) -> TrainResult:
    """The same loop with every prompt token redrawn at random each iteration."""
    return run(schedule, generator_state, prompt, surrogate, dataset, attack, provider, defense="random", **options)


def load_records(run_dir: str | Path) -> list[dict[str, Any]]:
    return read_jsonl(RunDirectory(run_dir).iterations_log)
