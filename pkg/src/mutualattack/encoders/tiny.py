"""
A tiny trainable dual encoder for desk-scale experiments and property tests.

Image tower: flatten -> linear -> tanh -> linear.
Text tower: token + position embeddings -> tanh -> masked mean -> linear.

Both towers are small enough to re-evaluate by hand, and run in float64
for gradient checks (``encoder.double()``).
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import TYPE_CHECKING, Any

import torch
from torch import Tensor, nn

from ..checkpoints import TINY_ENCODER, read_blob, write_blob
from ..errors import InputContractError, VocabularyError
from ..models import TextInput
from .base import DualEncoder

if TYPE_CHECKING:
    from ..config import RunConfig

PAD_TOKEN = "<PAD>"
MASK_TOKEN = "<MASK>"
SPECIAL_TOKENS = (PAD_TOKEN, MASK_TOKEN)


class TinyTokenizer:
    """Whole-word tokenizer over a fixed vocabulary. Specials come first."""

    def __init__(self, vocabulary: Iterable[str]):
        words: list[str] = list(SPECIAL_TOKENS)
        for word in vocabulary:
            if word and word not in words:
                words.append(word)
        self.words: tuple[str, ...] = tuple(words)
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: object) -> bool:
        return word in self._ids

    @property
    def pad_id(self) -> int:
        return self._ids[PAD_TOKEN]

    def token_id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise VocabularyError(f"unknown token '{word}' (vocabulary size {len(self)})") from None

    def encode(self, text: TextInput) -> list[int]:
        return [self.token_id(w) for w in text.tokens]


class TinyDualEncoder(DualEncoder):
    def __init__(
        self,
        vocabulary: Iterable[str],
        embed_dim: int = 32,
        hidden_dim: int = 64,
        token_dim: int = 32,
        image_size: int = 32,
        channels: int = 3,
        max_tokens: int = 16,
        mean: Sequence[float] | None = None,
        std: Sequence[float] | None = None,
    ):
        super().__init__()
        self.tokenizer = TinyTokenizer(vocabulary)
        self.hyperparameters: dict[str, Any] = {
            "embed_dim": embed_dim,
            "hidden_dim": hidden_dim,
            "token_dim": token_dim,
            "image_size": image_size,
            "channels": channels,
            "max_tokens": max_tokens,
            "mean": list(mean) if mean is not None else [0.0] * channels,
            "std": list(std) if std is not None else [1.0] * channels,
        }

        self.image_proj = nn.Linear(channels * image_size * image_size, hidden_dim)
        self.image_head = nn.Linear(hidden_dim, embed_dim)

        self.token_embedding = nn.Embedding(len(self.tokenizer), token_dim)
        self.position_embedding = nn.Parameter(torch.zeros(max_tokens, token_dim))
        self.text_head = nn.Linear(token_dim, embed_dim)
        nn.init.normal_(self.token_embedding.weight, std=0.5)
        nn.init.normal_(self.position_embedding, std=0.1)

        pixel_mean = torch.tensor(self.hyperparameters["mean"]).view(1, channels, 1, 1)
        pixel_std = torch.tensor(self.hyperparameters["std"]).view(1, channels, 1, 1)
        self.register_buffer("pixel_mean", pixel_mean)
        self.register_buffer("pixel_std", pixel_std)

    @property
    def embed_dim(self) -> int:
        return int(self.hyperparameters["embed_dim"])

    @property
    def mask_token(self) -> str:
        return MASK_TOKEN

    @property
    def default_temperature(self) -> float:
        return 1.0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        size = int(self.hyperparameters["image_size"])
        return (int(self.hyperparameters["channels"]), size, size)

    def has_token(self, word: str) -> bool:
        return word in self.tokenizer and word not in SPECIAL_TOKENS

    def encode_image(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or tuple(images.shape[1:]) != self.image_shape:
            raise InputContractError(
                f"tiny encoder expects [B, {', '.join(map(str, self.image_shape))}], "
                f"got {tuple(images.shape)}"
            )
        x = (images - self.pixel_mean) / self.pixel_std
        hidden = torch.tanh(self.image_proj(x.flatten(1)))
        out: Tensor = self.image_head(hidden)
        return out

    def token_ids(self, texts: Sequence[TextInput]) -> tuple[Tensor, Tensor]:
        """Padded id matrix [N, L] and the boolean mask of real tokens."""
        encoded = [self.tokenizer.encode(t) for t in texts]
        if not encoded:
            raise InputContractError("encode_text needs at least one TextInput")
        length = max(len(ids) for ids in encoded)
        if length > int(self.hyperparameters["max_tokens"]):
            raise InputContractError(
                f"text of {length} tokens exceeds max_tokens={self.hyperparameters['max_tokens']}"
            )
        ids = torch.full((len(encoded), length), self.tokenizer.pad_id, dtype=torch.long)
        for row, seq in enumerate(encoded):
            ids[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        ids = ids.to(self.token_embedding.weight.device)
        return ids, ids != self.tokenizer.pad_id

    def encode_token_embeddings(self, embedded: Tensor, mask: Tensor | None = None) -> Tensor:
        """Text tower from already-embedded tokens [N, L, token_dim].

        Exposed so gradients with respect to the (continuous) token inputs
        can be checked.
        """
        length = embedded.shape[1]
        hidden = torch.tanh(embedded + self.position_embedding[:length])
        if mask is None:
            pooled = hidden.mean(dim=1)
        else:
            weights = mask.to(hidden.dtype).unsqueeze(-1)
            pooled = (hidden * weights).sum(dim=1) / weights.sum(dim=1)
        out: Tensor = self.text_head(pooled)
        return out

    def encode_text(self, texts: Sequence[TextInput]) -> Tensor:
        ids, mask = self.token_ids(texts)
        return self.encode_token_embeddings(self.token_embedding(ids), mask)

    # --- persistence ---

    def save(self, path: str | Path) -> Path:
        return write_blob(
            path,
            TINY_ENCODER,
            {
                "hyperparameters": dict(self.hyperparameters),
                "vocabulary": list(self.tokenizer.words),
                "state_dict": self.state_dict(),
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> TinyDualEncoder:
        blob = read_blob(path, TINY_ENCODER)
        specials = set(SPECIAL_TOKENS)
        vocabulary = [w for w in blob["vocabulary"] if w not in specials]
        encoder = cls(vocabulary, **blob["hyperparameters"])
        encoder.load_state_dict(blob["state_dict"])
        return encoder


def build_tiny_surrogate(cfg: RunConfig, vocabulary: Iterable[str]) -> TinyDualEncoder:
    """Registry factory: load ``cfg.surrogate_checkpoint`` if set, else a fresh seeded encoder."""
    if cfg.surrogate_checkpoint:
        return TinyDualEncoder.load(cfg.surrogate_checkpoint)
    torch.manual_seed(cfg.seed)
    return TinyDualEncoder(
        vocabulary,
        embed_dim=cfg.tiny_dim,
        hidden_dim=cfg.tiny_hidden,
        token_dim=cfg.tiny_token_dim,
        image_size=cfg.image_size,
        channels=cfg.channels,
    )
