"""Building class text inputs from a prompt template, and caching their embeddings."""

from __future__ import annotations

import hashlib
from collections.abc import Sequence

import torch
from torch import Tensor

from ..encoders.base import DualEncoder, normalize
from ..encoders.tiny import MASK_TOKEN
from ..errors import ConfigurationError
from ..models import PromptTemplate, TextInput, ZeroShotHead

DEFAULT_PROMPT = PromptTemplate(("a", "photo", "of", "a"))


def build_text_input(label: str, prompt: PromptTemplate) -> TextInput:
    """``[label, v_1, ..., v_m]``: the class word first, then the prompt tokens."""
    if not label or not label.strip():
        raise ConfigurationError("class name must be a non-empty string")
    return TextInput((label, *prompt.tokens))


def parse_text_input(text: TextInput) -> tuple[str, PromptTemplate]:
    """Inverse of :func:`build_text_input`."""
    return text.label, PromptTemplate(text.prompt_tokens)


def build_head(class_names: Sequence[str], prompt: PromptTemplate, temperature: float) -> ZeroShotHead:
    return ZeroShotHead([build_text_input(c, prompt) for c in class_names], temperature)


def masked_prompt(prompt: PromptTemplate, n: int, mask_token: str = MASK_TOKEN) -> PromptTemplate:
    """Replace token ``n`` (1-based) with the backend mask token."""
    return prompt.with_token(n, mask_token)


def fingerprint(features: Tensor) -> str:
    """Short stable hash of an embedding tensor."""
    data = features.detach().to("cpu", torch.float64).contiguous().numpy().tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


class TextFeatureCache:
    """
    Unit class text embeddings for the current prompt.

    Recomputed whenever a different prompt is requested, reused otherwise.
    """

    def __init__(self, encoder: DualEncoder, class_names: Sequence[str]):
        self.encoder = encoder
        self.class_names = list(class_names)
        self._prompt: PromptTemplate | None = None
        self._features: Tensor | None = None
        self.recomputations = 0

    @torch.no_grad()
    def features(self, prompt: PromptTemplate) -> Tensor:
        if self._features is None or prompt != self._prompt:
            texts = [build_text_input(c, prompt) for c in self.class_names]
            self._features = normalize(self.encoder.encode_text(texts))
            self._prompt = prompt
            self.recomputations += 1
        return self._features

    def fingerprint(self, prompt: PromptTemplate) -> str:
        return fingerprint(self.features(prompt))
