"""
The surrogate dual-encoder interface and the zero-shot helpers built on it.

A backend only has to map pixels and token sequences to raw embeddings.
Normalization, similarity, zero-shot probabilities and prediction are
shared functions so every backend behaves identically downstream.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Sequence

import torch
from torch import Tensor, nn

from ..errors import DegenerateEmbeddingError, InputContractError
from ..models import TextInput, ZeroShotHead


class DualEncoder(nn.Module, ABC):
    """Abstract surrogate: a visual encoder E_i and a textual encoder E_t."""

    @property
    @abstractmethod
    def embed_dim(self) -> int:  # pragma: no cover
        """Dimension d of both embedding spaces."""
        raise NotImplementedError

    @property
    @abstractmethod
    def mask_token(self) -> str:  # pragma: no cover
        """Word substituted for a masked prompt token."""
        raise NotImplementedError

    @property
    @abstractmethod
    def default_temperature(self) -> float:  # pragma: no cover
        raise NotImplementedError

    @abstractmethod
    def encode_image(self, images: Tensor) -> Tensor:  # pragma: no cover
        """Raw image embeddings [B, d] for pixels [B, C, H, W] in [0, 1].

        Backends apply their own mean/std preprocessing here, after any
        perturbation bounding, so budgets stay in raw pixel units.
        """
        raise NotImplementedError

    @abstractmethod
    def encode_text(self, texts: Sequence[TextInput]) -> Tensor:  # pragma: no cover
        """Raw text embeddings [len(texts), d]."""
        raise NotImplementedError

    def has_token(self, word: str) -> bool:
        """Whether ``word`` can appear in a prompt for this backend."""
        return True

    def freeze(self) -> DualEncoder:
        """Put the encoder in eval mode and stop gradients to its parameters."""
        self.eval()
        self.requires_grad_(False)
        return self


def normalize(embeddings: Tensor) -> Tensor:
    """Scale every row to unit L2 norm.

    Raises:
        DegenerateEmbeddingError: If any row has zero norm.
    """
    norms = embeddings.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateEmbeddingError("cannot normalize a zero-norm embedding")
    return embeddings / norms


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of unit embeddings (their dot product)."""
    if a.shape[-1] != b.shape[-1]:
        raise InputContractError(
            f"embedding dimensions differ: {a.shape[-1]} vs {b.shape[-1]}"
        )
    return (a * b).sum(dim=-1)


def similarity_matrix(image_features: Tensor, text_features: Tensor) -> Tensor:
    """Cosine similarities [B, C] between unit image and class text embeddings."""
    if image_features.shape[-1] != text_features.shape[-1]:
        raise InputContractError(
            f"embedding dimensions differ: {image_features.shape[-1]} vs "
            f"{text_features.shape[-1]}"
        )
    return image_features @ text_features.T


def probs_from_features(image_features: Tensor, text_features: Tensor, temperature: float) -> Tensor:
    """Softmax over cosine similarities divided by the temperature."""
    return torch.softmax(similarity_matrix(image_features, text_features) / temperature, dim=-1)


def class_text_features(encoder: DualEncoder, head: ZeroShotHead) -> Tensor:
    """Unit text embeddings [C, d], one per class of ``head``."""
    return normalize(encoder.encode_text(head.class_texts))


def zero_shot_probs(encoder: DualEncoder, images: Tensor, head: ZeroShotHead) -> Tensor:
    """Class probabilities [B, C] of the zero-shot classifier defined by ``head``."""
    image_features = normalize(encoder.encode_image(images))
    return probs_from_features(image_features, class_text_features(encoder, head), head.temperature)


def predict_from_features(image_features: Tensor, text_features: Tensor) -> Tensor:
    """Arg-max class per row; the lowest index wins ties.

    The arg-max is taken over the similarities themselves, which is the
    arg-max of the softmax for every temperature.
    """
    return similarity_matrix(image_features, text_features).argmax(dim=-1)


def predict(encoder: DualEncoder, images: Tensor, head: ZeroShotHead) -> Tensor:
    """Zero-shot class indices [B]."""
    image_features = normalize(encoder.encode_image(images))
    return predict_from_features(image_features, class_text_features(encoder, head))
