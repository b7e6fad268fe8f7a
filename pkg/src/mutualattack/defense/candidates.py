"""
Candidate replacement words for a prompt position.

Two providers ship with the package:

- :class:`StaticSynonymProvider`, a deterministic synonym table that
  works offline and keeps every word inside the tiny backend vocabulary;
- :class:`GPT2CandidateProvider`, which asks a causal language model for
  likely fill-ins given the surrounding prompt words.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterable, Sequence
from typing import TYPE_CHECKING, Any

import torch

from ..errors import ConfigurationError, ExternalDependencyError
from ..models import CandidateSet, PromptTemplate

if TYPE_CHECKING:
    from ..config import RunConfig

logger = logging.getLogger(__name__)


# Each group is a set of interchangeable prompt words.
DEFAULT_SYNONYM_GROUPS: tuple[tuple[str, ...], ...] = (
    ("a", "an", "the", "one", "this", "that", "some", "any", "my", "each", "every", "another"),
    (
        "photo", "picture", "image", "snapshot", "shot", "photograph", "portrait",
        "drawing", "painting", "sketch", "render", "still", "view",
    ),
    (
        "of", "showing", "with", "depicting", "featuring", "from", "about",
        "containing", "in", "on", "at", "for",
    ),
    (
        "clean", "good", "bad", "blurry", "bright", "dark", "clear", "sharp",
        "small", "large", "cropped", "noisy", "pixelated",
    ),
)


class CandidateProvider(ABC):
    """Ranks fill-in words for one prompt position."""

    @abstractmethod
    def propose(self, prompt: PromptTemplate, n: int, limit: int) -> list[str]:  # pragma: no cover
        """Up to ``limit`` words for position ``n`` (1-based), best first.

        The current word at ``n`` may or may not be included.
        """
        raise NotImplementedError

    def vocabulary(self) -> list[str]:
        """Words this provider can ever return, when that set is known in advance."""
        return []


class StaticSynonymProvider(CandidateProvider):
    """
    Synonyms from a fixed table of word groups.

    A word's candidates are the other members of its group, listed starting
    right after the word and wrapping around. Words outside every group
    have no candidates.
    """

    def __init__(self, groups: Iterable[Sequence[str]] = DEFAULT_SYNONYM_GROUPS):
        self.groups: tuple[tuple[str, ...], ...] = tuple(tuple(g) for g in groups)
        self._table: dict[str, list[str]] = {}
        for group in self.groups:
            for i, word in enumerate(group):
                rotated = list(group[i + 1 :]) + list(group[:i])
                self._table.setdefault(word, [])
                self._table[word].extend(w for w in rotated if w not in self._table[word])

    def propose(self, prompt: PromptTemplate, n: int, limit: int) -> list[str]:
        return self._table.get(prompt.token(n), [])[:limit]

    def vocabulary(self) -> list[str]:
        return [w for group in self.groups for w in group]


class GPT2CandidateProvider(CandidateProvider):
    """
    Fill-in words from a GPT-2 language model.

    The model proposes ``pool`` next words after the left context; each is
    then re-ranked by the log-likelihood of the whole prompt with that word
    in place, so the right context counts too. Decoding is greedy, so the
    ranking is deterministic for a given model.
    """

    def __init__(self, model_name: str = "gpt2", device: str = "cpu", pool: int = 50):
        try:
            from transformers import GPT2LMHeadModel, GPT2TokenizerFast
        except ImportError as exc:
            raise ExternalDependencyError(
                "the 'gpt2' candidate provider needs transformers; install mutualattack[lm]"
            ) from exc
        try:
            self.tokenizer: Any = GPT2TokenizerFast.from_pretrained(model_name)
            self.model: Any = GPT2LMHeadModel.from_pretrained(model_name).to(device).eval()
        except OSError as exc:
            raise ExternalDependencyError(f"could not load language model '{model_name}': {exc}") from exc
        self.device = torch.device(device)
        self.pool = pool

    def _sequence_log_likelihood(self, words: Sequence[str]) -> float:
        ids = [self.tokenizer.eos_token_id, *self.tokenizer.encode(" ".join(words))]
        input_ids = torch.tensor([ids], device=self.device)
        with torch.no_grad():
            logits = self.model(input_ids).logits[0, :-1]
        log_probs = torch.log_softmax(logits.float(), dim=-1)
        picked = log_probs.gather(-1, input_ids[0, 1:].unsqueeze(-1))
        return float(picked.sum())

    def _next_words(self, left: Sequence[str]) -> list[str]:
        ids = [self.tokenizer.eos_token_id]
        if left:
            ids += self.tokenizer.encode(" ".join(left))
        input_ids = torch.tensor([ids], device=self.device)
        with torch.no_grad():
            logits = self.model(input_ids).logits[0, -1]
        words: list[str] = []
        for token_id in torch.argsort(logits, descending=True).tolist():
            piece = self.tokenizer.convert_ids_to_tokens(token_id)
            # 'Ġ' marks a word-initial piece in the GPT-2 byte-level vocabulary.
            if not piece.startswith("Ġ"):
                continue
            word = piece[1:]
            if word.isalpha() and word not in words:
                words.append(word)
            if len(words) >= self.pool:
                break
        return words

    def propose(self, prompt: PromptTemplate, n: int, limit: int) -> list[str]:
        left = prompt.tokens[: n - 1]
        pool = self._next_words(left)
        scored = [(self._sequence_log_likelihood(prompt.with_token(n, w).tokens), w) for w in pool]
        scored.sort(key=lambda item: (-item[0], item[1]))
        return [w for _, w in scored[:limit]]


def candidates(
    provider: CandidateProvider,
    prompt: PromptTemplate,
    n: int,
    k: int,
    accept: Callable[[str], bool] | None = None,
) -> CandidateSet:
    """The original word at ``n`` plus the ``k`` best accepted provider words."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    original = prompt.token(n)
    words: list[str] = []
    for word in provider.propose(prompt, n, limit=4 * k + 8):
        if word == original or word in words:
            continue
        if accept is not None and not accept(word):
            continue
        words.append(word)
        if len(words) == k:
            break
    return CandidateSet(position=n, original=original, words=(original, *words))


def build_static_provider(cfg: RunConfig) -> StaticSynonymProvider:
    return StaticSynonymProvider()


def build_gpt2_provider(cfg: RunConfig) -> GPT2CandidateProvider:
    return GPT2CandidateProvider(cfg.lm_model, device=cfg.device)
