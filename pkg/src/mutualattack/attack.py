"""
Visual attack: the three semantic-perturbation losses and one generator step.

All loss functions take unit embeddings or probabilities and return the
batch mean as a 0-dim tensor, so they compose into the training objective
and can be checked against scalar reference formulas.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .encoders.base import DualEncoder, normalize, similarity_matrix
from .errors import InputContractError, TrainingDivergenceError
from .generator import GeneratorState, forward
from .models import AttackLossReport, ClsConfig, ImageBatch, LossWeights, TripletConfig

logger = logging.getLogger(__name__)


def _squared_distance(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-1]:
        raise InputContractError(f"embedding dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    return ((a - b) ** 2).sum(dim=-1)


def feat_loss(clean_features: Tensor, adv_features: Tensor) -> Tensor:
    """Negative squared distance between clean and adversarial image embeddings.

    Range [-4, 0] for unit inputs; minimizing it pushes the two apart.
    """
    return -_squared_distance(clean_features, adv_features).mean()


def least_similar_label(clean_features: Tensor, text_features: Tensor) -> Tensor:
    """Per-row index of the class text least similar to the clean image. Lowest index on ties."""
    if text_features.shape[0] < 2:
        raise InputContractError("least_similar_label needs at least two classes")
    return similarity_matrix(clean_features, text_features).argmin(dim=-1)


def triplet_loss(
    adv_features: Tensor,
    far_text: Tensor,
    true_text: Tensor,
    cfg: TripletConfig = TripletConfig(),
) -> Tensor:
    """Pull toward the least-similar class text, push at least ``alpha`` from the true one."""
    pull = _squared_distance(adv_features, far_text)
    push = torch.clamp(cfg.alpha - _squared_distance(adv_features, true_text), min=0.0)
    return (pull + push).mean()


def _inverse_cross_entropy(cross_entropy: Tensor, sigma: float) -> Tensor:
    return (1.0 / (sigma + cross_entropy)).mean()


def cls_loss(probs: Tensor, y_true: Tensor, cfg: ClsConfig = ClsConfig()) -> Tensor:
    """``1 / (sigma + CE(probs, y_true))``, averaged over the batch.

    Lies in (0, 1/sigma]; shrinks as the surrogate loses confidence in the
    true label. A zero true-label probability gives an infinite
    cross-entropy and therefore a loss of exactly zero.
    """
    picked = probs.gather(-1, y_true.long().unsqueeze(-1)).squeeze(-1)
    return _inverse_cross_entropy(-torch.log(picked), cfg.sigma)


def cls_loss_from_logits(logits: Tensor, y_true: Tensor, cfg: ClsConfig = ClsConfig()) -> Tensor:
    """Same quantity as :func:`cls_loss`, computed stably from logits for training."""
    ce = F.cross_entropy(logits, y_true.long(), reduction="none")
    return _inverse_cross_entropy(ce, cfg.sigma)


@dataclass(frozen=True)
class AttackConfig:
    """Everything the attack step needs besides data and the generator."""

    temperature: float
    triplet: TripletConfig = field(default_factory=TripletConfig)
    cls: ClsConfig = field(default_factory=ClsConfig)
    weights: LossWeights = field(default_factory=LossWeights)


def attack_objective(
    encoder: DualEncoder,
    clean: Tensor,
    adversarial: Tensor,
    labels: Tensor,
    text_features: Tensor,
    cfg: AttackConfig,
) -> tuple[Tensor, AttackLossReport]:
    """Weighted feat + tri + cls objective for one batch of adversarial images.

    ``text_features`` are the unit class text embeddings of the current
    prompt. The least-similar label is recomputed from the clean images.
    """
    with torch.no_grad():
        clean_features = normalize(encoder.encode_image(clean))
        far_label = least_similar_label(clean_features, text_features)

    adv_features = normalize(encoder.encode_image(adversarial))
    logits = similarity_matrix(adv_features, text_features) / cfg.temperature

    feat = cfg.weights.feat * feat_loss(clean_features, adv_features)
    tri = cfg.weights.tri * triplet_loss(
        adv_features, text_features[far_label], text_features[labels.long()], cfg.triplet
    )
    cls = cfg.weights.cls * cls_loss_from_logits(logits, labels, cfg.cls)
    total = feat + tri + cls
    report = AttackLossReport.from_components(float(feat), float(tri), float(cls))
    return total, report


def attack_step(
    state: GeneratorState,
    encoder: DualEncoder,
    batch: ImageBatch,
    text_features: Tensor,
    cfg: AttackConfig,
) -> tuple[GeneratorState, AttackLossReport]:
    """One Adam step on the generator against the summed attack loss.

    The surrogate must be frozen and ``text_features`` precomputed from the
    current prompt; neither is modified.

    Raises:
        TrainingDivergenceError: If the loss is not finite. No update is applied.
    """
    optimizer = state.ensure_optimizer()
    state.network.train()
    optimizer.zero_grad(set_to_none=True)

    adversarial = forward(state, batch.images)
    total, report = attack_objective(
        encoder, batch.images, adversarial, batch.labels, text_features.detach(), cfg
    )
    if not math.isfinite(report.total) or not bool(torch.isfinite(total)):
        optimizer.zero_grad(set_to_none=True)
        raise TrainingDivergenceError(
            f"non-finite attack loss at step {state.steps}: {report.to_dict()}"
        )

    total.backward()
    optimizer.step()
    state.steps += 1
    logger.debug("step %d total=%.6f", state.steps, report.total)
    return state, report
