"""
Prompt-side defense: masked word saliency, the update set, and candidate replacement.

Probabilities are always averaged over a defense batch of adversarial
images, so one prompt serves the whole distribution. Positions are
1-based.
"""

from __future__ import annotations

import logging
import random
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
from torch import Tensor

from ..encoders.base import DualEncoder, normalize, probs_from_features
from ..errors import ConfigurationError
from ..models import AdversarialBatch, CandidateSet, PromptTemplate, SaliencyReport
from .candidates import CandidateProvider, candidates
from .prompts import build_text_input, masked_prompt

logger = logging.getLogger(__name__)

DEFAULT_RHO_PERCENTILE = 60.0
DEFAULT_K = 10


class PromptScorer:
    """
    Class probabilities of a fixed batch of adversarial images under varying prompts.

    Image embeddings are computed once; text embeddings are cached per
    prompt, so scoring many candidate prompts stays cheap.
    """

    def __init__(
        self,
        encoder: DualEncoder,
        class_names: Sequence[str],
        adversarial: Tensor,
        temperature: float,
        chunk_size: int = 256,
    ):
        if not temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {temperature}")
        self.encoder = encoder
        self.class_names = list(class_names)
        self.temperature = temperature
        with torch.no_grad():
            chunks = [
                normalize(encoder.encode_image(adversarial[i : i + chunk_size]))
                for i in range(0, adversarial.shape[0], chunk_size)
            ]
        self.image_features = torch.cat(chunks)
        self._text: dict[tuple[str, ...], Tensor] = {}

    @torch.no_grad()
    def probs(self, prompt: PromptTemplate) -> Tensor:
        """Probabilities [B, C] of every adversarial image under ``prompt``."""
        if prompt.tokens not in self._text:
            texts = [build_text_input(c, prompt) for c in self.class_names]
            self._text[prompt.tokens] = normalize(self.encoder.encode_text(texts))
        return probs_from_features(self.image_features, self._text[prompt.tokens], self.temperature)

    def label_probs(self, prompt: PromptTemplate, labels: Tensor) -> Tensor:
        """Per-sample probability [B] of ``labels`` under ``prompt``."""
        probs = self.probs(prompt)
        return probs.gather(1, labels.long().to(probs.device).unsqueeze(1)).squeeze(1)


def wrong_labels(probs: Tensor, y_true: Tensor) -> Tensor:
    """Most probable label other than the true one, per sample.

    For a successfully attacked sample this is its (wrong) prediction. A
    sample the attack did not fool has no wrong prediction; it contributes
    its runner-up label instead, so saliency is always averaged over the
    whole defense batch.
    """
    masked = probs.clone()
    masked.scatter_(1, y_true.long().to(probs.device).unsqueeze(1), float("-inf"))
    return masked.argmax(dim=1)


def saliency(
    scorer: PromptScorer, n: int, prompt: PromptTemplate, y_prime: Tensor
) -> float:
    """Batch mean of ``max(p(y'|x', X_p) - p(y'|x', X_p^n), 0)``.

    How much the wrong label relies on token ``n``. Always >= 0.
    """
    full = scorer.label_probs(prompt, y_prime)
    masked = scorer.label_probs(masked_prompt(prompt, n, scorer.encoder.mask_token), y_prime)
    return float(torch.clamp(full - masked, min=0.0).mean())


def saliency_scores(scorer: PromptScorer, prompt: PromptTemplate, y_prime: Tensor) -> tuple[float, ...]:
    return tuple(saliency(scorer, n, prompt, y_prime) for n in range(1, prompt.m + 1))


def resolve_threshold(
    scores: Sequence[float], rho: float | None, percentile: float = DEFAULT_RHO_PERCENTILE
) -> float:
    """An absolute ``rho`` wins; otherwise the given percentile of ``scores``."""
    if rho is not None:
        return float(rho)
    if not 0.0 <= percentile <= 100.0:
        raise ConfigurationError(f"rho_percentile must be in [0, 100], got {percentile}")
    return float(np.percentile(np.asarray(scores, dtype=np.float64), percentile))


def select_update_set(scores: Sequence[float], rho: float) -> tuple[int, ...]:
    """1-based positions whose score is strictly greater than ``rho``."""
    if rho < 0:
        raise ConfigurationError(f"rho must be >= 0, got {rho}")
    return tuple(n for n, score in enumerate(scores, start=1) if score > rho)


def candidate_gains(
    scorer: PromptScorer,
    n: int,
    prompt: PromptTemplate,
    y_true: Tensor,
    cands: CandidateSet,
) -> dict[str, float]:
    """Mean true-label probability gain of each candidate over the masked prompt."""
    baseline = scorer.label_probs(masked_prompt(prompt, n, scorer.encoder.mask_token), y_true)
    return {
        word: float((scorer.label_probs(prompt.with_token(n, word), y_true) - baseline).mean())
        for word in cands.words
    }


def replace_token(
    scorer: PromptScorer,
    n: int,
    prompt: PromptTemplate,
    y_true: Tensor,
    cands: CandidateSet,
) -> str:
    """The candidate that best restores the true label at position ``n``.

    Ties go to the original word when it is among the best, else to the
    lexicographically first tied word.
    """
    if not cands.words:
        raise ConfigurationError(f"empty candidate set for position {n}")
    gains = candidate_gains(scorer, n, prompt, y_true, cands)
    best = max(gains.values())
    tied = [word for word, gain in gains.items() if gain == best]
    if cands.original in tied:
        return cands.original
    return min(tied)


@dataclass
class DefenseResult:
    prompt: PromptTemplate
    report: SaliencyReport
    replacements: dict[int, tuple[str, str]] = field(default_factory=dict)
    """position -> (old word, new word) for every changed position."""

    p_true_before: float = 0.0
    p_true_after: float = 0.0
    """Mean true-label probability over the defense batch, before and after."""

    guarded: bool = True
    """Whether p_true_after >= p_true_before is guaranteed for this result."""

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt": str(self.prompt),
            **self.report.to_dict(),
            "replacements": {str(n): list(pair) for n, pair in self.replacements.items()},
            "p_true_before": self.p_true_before,
            "p_true_after": self.p_true_after,
        }


def defend(
    prompt: PromptTemplate,
    adv_batch: AdversarialBatch,
    encoder: DualEncoder,
    class_names: Sequence[str],
    temperature: float,
    provider: CandidateProvider,
    rho: float | None = None,
    k: int = DEFAULT_K,
    rho_percentile: float = DEFAULT_RHO_PERCENTILE,
) -> DefenseResult:
    """One defense pass: score every prompt token, then replace the salient ones.

    Saliency is scored once against the input prompt. Replacements run in
    ascending position order, each taking effect before the next position
    is scored. The label token and the template length never change.
    """
    scorer = PromptScorer(encoder, class_names, adv_batch.adversarial, temperature)
    y_true = adv_batch.labels
    y_prime = wrong_labels(scorer.probs(prompt), y_true)

    scores = saliency_scores(scorer, prompt, y_prime)
    threshold = resolve_threshold(scores, rho, rho_percentile)
    update_set = select_update_set(scores, threshold)

    current = prompt
    replacements: dict[int, tuple[str, str]] = {}
    for n in update_set:
        cands = candidates(provider, current, n, k, accept=encoder.has_token)
        word = replace_token(scorer, n, current, y_true, cands)
        if word != current.token(n):
            replacements[n] = (current.token(n), word)
            current = current.with_token(n, word)

    before = float(scorer.label_probs(prompt, y_true).mean())
    after = float(scorer.label_probs(current, y_true).mean())
    logger.debug("defense %s -> %s (p_true %.4f -> %.4f)", prompt, current, before, after)
    return DefenseResult(
        prompt=current,
        report=SaliencyReport(scores=scores, threshold=threshold, update_set=update_set),
        replacements=replacements,
        p_true_before=before,
        p_true_after=after,
    )


def random_prompt(
    prompt: PromptTemplate,
    provider: CandidateProvider,
    rng: random.Random,
    accept: Callable[[str], bool] | None = None,
    k: int = DEFAULT_K,
) -> PromptTemplate:
    """Replace every token by a uniformly drawn candidate (original included).

    The random-prompt ablation arm: prompt updates without the saliency
    and re-matching logic.
    """
    current = prompt
    for n in range(1, prompt.m + 1):
        cands = candidates(provider, current, n, k, accept=accept)
        current = current.with_token(n, rng.choice(cands.words))
    return current
