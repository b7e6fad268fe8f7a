"""
Transferability evaluation: fooling rate, per-target accuracy and the group-wise overall score.

Adversarial inputs come from one of three places:

- a trained generator, run on the evaluation split;
- an external adversarial set (baseline mode), paired with its clean images;
- nothing at all, in which case the adversarial accuracy equals the clean one.

Whatever the source, every adversarial image is re-checked against the
epsilon budget before any target sees it.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .encoders.base import DualEncoder, normalize, predict_from_features
from .errors import ConfigurationError, InputContractError
from .generator import GeneratorState, adversarial_batch
from .models import AdversarialBatch, ImageBatch, TargetResult, TransferReport, ZeroShotHead

logger = logging.getLogger(__name__)

QUANTIZATION_SLACK = 1.0 / 255.0
SURROGATE_TARGET = "surrogate"


@dataclass(frozen=True)
class TargetModel:
    """A frozen classifier seen only through its top-1 predictions."""

    name: str
    group: str
    predict_fn: Callable[[Tensor], Tensor]
    input_shape: tuple[int, ...] | None = None
    """Expected [C, H, W] of one image, when the target knows it."""

    @torch.no_grad()
    def predict(self, images: Tensor) -> Tensor:
        if self.input_shape is not None and tuple(images.shape[1:]) != tuple(self.input_shape):
            raise ConfigurationError(
                f"target '{self.name}' expects images of shape {tuple(self.input_shape)}, "
                f"got {tuple(images.shape[1:])}"
            )
        return self.predict_fn(images)

    @classmethod
    def from_module(
        cls, name: str, group: str, module: nn.Module, input_shape: tuple[int, ...] | None = None
    ) -> TargetModel:
        module.eval()
        module.requires_grad_(False)

        def predict_fn(images: Tensor) -> Tensor:
            return module(images).argmax(dim=1)

        shape = input_shape or getattr(module, "input_shape", None)
        return cls(name=name, group=group, predict_fn=predict_fn, input_shape=shape)

    @classmethod
    def from_surrogate(
        cls, encoder: DualEncoder, head: ZeroShotHead, group: str = SURROGATE_TARGET
    ) -> TargetModel:
        """The surrogate's own zero-shot classifier under the prompt of ``head``."""
        with torch.no_grad():
            text_features = normalize(encoder.encode_text(head.class_texts))

        def predict_fn(images: Tensor) -> Tensor:
            return predict_from_features(normalize(encoder.encode_image(images)), text_features)

        return cls(name=SURROGATE_TARGET, group=group, predict_fn=predict_fn)


def attack_success_rate(predictions: Tensor, y_true: Tensor) -> float:
    """Fraction of samples whose prediction differs from the true label."""
    if predictions.shape != y_true.shape:
        raise InputContractError(
            f"predictions {tuple(predictions.shape)} and labels {tuple(y_true.shape)} differ in shape"
        )
    if predictions.numel() == 0:
        raise InputContractError("attack success rate of an empty set is undefined")
    wrong = int((predictions.long() != y_true.long()).sum())
    return wrong / predictions.numel()


def accuracy(predictions: Tensor, y_true: Tensor) -> float:
    if predictions.numel() == 0:
        raise InputContractError("accuracy of an empty set is undefined")
    correct = int((predictions.long() == y_true.long()).sum())
    return correct / predictions.numel()


def check_budget(adv: AdversarialBatch, epsilon: float, slack: float = 0.0) -> None:
    """Every adversarial image must lie within ``epsilon + slack`` of its clean image, in [0, 1]."""
    worst = float(adv.max_deviation().max()) if len(adv) else 0.0
    if worst > epsilon + slack + 1e-6:
        raise InputContractError(
            f"adversarial images exceed the budget: max deviation {worst:.6f} > epsilon {epsilon}"
            + (f" + slack {slack:.6f}" if slack else "")
        )
    if len(adv) and (float(adv.adversarial.min()) < 0.0 or float(adv.adversarial.max()) > 1.0):
        raise InputContractError("adversarial images leave the [0, 1] pixel range")


def _predict_all(target: TargetModel, images: Tensor, chunk_size: int = 256) -> Tensor:
    return torch.cat(
        [target.predict(images[i : i + chunk_size]) for i in range(0, images.shape[0], chunk_size)]
    )


def evaluate_target(
    target: TargetModel,
    batch: ImageBatch,
    generator: GeneratorState | AdversarialBatch | None = None,
    epsilon: float | None = None,
    slack: float = 0.0,
) -> tuple[float, float]:
    """Clean and adversarial top-1 accuracy of ``target`` on ``batch``.

    ``generator`` may be a trained generator, a precomputed adversarial
    batch of the same clean images, or ``None``. A precomputed batch is
    checked against ``epsilon`` (plus ``slack``), which is then required.

    Raises:
        ConfigurationError: If a precomputed batch comes without ``epsilon``.
        InputContractError: If an adversarial image leaves the budget.
    """
    clean_pred = _predict_all(target, batch.images)
    clean_acc = accuracy(clean_pred, batch.labels)
    if generator is None:
        return clean_acc, clean_acc
    adv = adversarial_batch(generator, batch) if isinstance(generator, GeneratorState) else generator
    budget = generator.epsilon if isinstance(generator, GeneratorState) else epsilon
    if budget is None:
        raise ConfigurationError(
            f"target '{target.name}': an external adversarial set needs epsilon for the budget check"
        )
    check_budget(adv, budget, slack)
    adv_pred = _predict_all(target, adv.adversarial)
    return clean_acc, accuracy(adv_pred, adv.labels)


def group_overall(per_target_acc: Mapping[str, float], group_map: Mapping[str, Sequence[str]]) -> float:
    """Unweighted mean over groups of the within-group mean accuracy.

    Every target must belong to exactly one group and every group must be
    non-empty. Sums are exactly rounded, so the result does not depend on
    the order of groups or targets.
    """
    if not group_map:
        raise ConfigurationError("group map is empty")
    seen: dict[str, str] = {}
    group_means: list[float] = []
    for group, members in group_map.items():
        if not members:
            raise ConfigurationError(f"group '{group}' has no targets")
        for name in members:
            if name in seen:
                raise ConfigurationError(f"target '{name}' is in both '{seen[name]}' and '{group}'")
            if name not in per_target_acc:
                raise ConfigurationError(f"group '{group}' names unknown target '{name}'")
            seen[name] = group
        group_means.append(math.fsum(per_target_acc[n] for n in members) / len(members))
    unassigned = sorted(set(per_target_acc) - set(seen))
    if unassigned:
        raise ConfigurationError(f"targets without a group: {', '.join(unassigned)}")
    return math.fsum(group_means) / len(group_means)


def group_map_of(targets: Sequence[TargetModel]) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for target in targets:
        groups.setdefault(target.group, []).append(target.name)
    return groups


def transfer_matrix(
    targets: Sequence[TargetModel],
    batch: ImageBatch,
    generator: GeneratorState | None = None,
    adversarial: AdversarialBatch | None = None,
    split: str = "val",
    epsilon: float | None = None,
    source_dataset: str = "",
    eval_dataset: str = "",
) -> TransferReport:
    """Evaluate every target and assemble the report with clean and adversarial overall scores.

    In baseline mode (``adversarial`` given) the clean images of the
    external set replace ``batch`` and the budget check allows one
    quantization step of slack.
    """
    if not targets:
        raise ConfigurationError("transfer_matrix needs at least one target")
    if generator is not None and adversarial is not None:
        raise ConfigurationError("pass either a generator or an adversarial set, not both")
    names = [t.name for t in targets]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate target names: {names}")

    source: GeneratorState | AdversarialBatch | None
    slack = 0.0
    if adversarial is not None:
        if epsilon is None:
            raise ConfigurationError("baseline mode needs the epsilon the adversarial set was made with")
        batch = adversarial.clean
        source = adversarial
        slack = QUANTIZATION_SLACK
    elif generator is not None:
        # One generator pass shared by all targets.
        source = adversarial_batch(generator, batch)
        epsilon = generator.epsilon
    else:
        source = None

    results: list[TargetResult] = []
    for target in targets:
        clean_acc, adv_acc = evaluate_target(target, batch, source, epsilon=epsilon, slack=slack)
        results.append(
            TargetResult(
                name=target.name,
                group=target.group,
                clean_acc=clean_acc,
                adv_acc=adv_acc,
                attack_success_rate=1.0 - adv_acc,
            )
        )
        logger.debug("%s: clean %.4f adv %.4f", target.name, clean_acc, adv_acc)

    group_map = group_map_of(targets)
    return TransferReport(
        split=split,
        results=results,
        group_map=group_map,
        overall=group_overall({r.name: r.adv_acc for r in results}, group_map),
        clean_overall=group_overall({r.name: r.clean_acc for r in results}, group_map),
        epsilon=epsilon,
        source_dataset=source_dataset,
        eval_dataset=eval_dataset,
    )
