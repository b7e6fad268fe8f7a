"""Pretrained CLIP-style surrogate loaded through ``open_clip``."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from typing import TYPE_CHECKING, Any

import torch
import torch.nn.functional as F
from torch import Tensor

from ..errors import ExternalDependencyError
from ..models import TextInput
from .base import DualEncoder

if TYPE_CHECKING:
    from ..config import RunConfig

logger = logging.getLogger(__name__)

DEFAULT_MASK_TOKEN = "[MASK]"
DEFAULT_TEMPERATURE = 0.01


class OpenClipDualEncoder(DualEncoder):
    """
    Wraps an ``open_clip`` model.

    Images arrive in raw [0, 1] pixels at any size; they are resized to the
    model resolution and mean/std normalized inside :meth:`encode_image`.
    """

    def __init__(
        self,
        model_name: str,
        pretrained: str,
        device: str = "cpu",
        mask_token: str | None = None,
    ):
        super().__init__()
        try:
            import open_clip
        except ImportError as exc:
            raise ExternalDependencyError(
                "the 'clip' surrogate needs open_clip; install mutualattack[clip]"
            ) from exc

        try:
            model, _, _ = open_clip.create_model_and_transforms(model_name, pretrained=pretrained)
        except Exception as exc:
            raise ExternalDependencyError(
                f"could not load CLIP '{model_name}' with weights '{pretrained}': {exc}"
            ) from exc

        self.model_name = model_name
        self.pretrained = pretrained
        self.model = model.to(device)
        self.tokenizer: Any = open_clip.get_tokenizer(model_name)
        self._mask_token = mask_token or DEFAULT_MASK_TOKEN
        self._device = torch.device(device)

        size = getattr(model.visual, "image_size", 224)
        self.input_size: tuple[int, int] = (
            (int(size[0]), int(size[1])) if isinstance(size, (tuple, list)) else (int(size), int(size))
        )
        mean = getattr(model.visual, "image_mean", None) or open_clip.OPENAI_DATASET_MEAN
        std = getattr(model.visual, "image_std", None) or open_clip.OPENAI_DATASET_STD
        self.register_buffer("pixel_mean", torch.tensor(mean, device=device).view(1, -1, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(std, device=device).view(1, -1, 1, 1))
        logger.debug("loaded %s/%s at %s", model_name, pretrained, self.input_size)

    @property
    def embed_dim(self) -> int:
        return int(self.model.text_projection.shape[1])

    @property
    def mask_token(self) -> str:
        return self._mask_token

    @property
    def default_temperature(self) -> float:
        """``1 / exp(logit_scale)`` of the checkpoint; 0.01 when the model has none."""
        logit_scale = getattr(self.model, "logit_scale", None)
        if logit_scale is None:
            return DEFAULT_TEMPERATURE
        return 1.0 / float(torch.as_tensor(logit_scale).detach().exp())

    def encode_image(self, images: Tensor) -> Tensor:
        x = images.to(self._device)
        if tuple(x.shape[-2:]) != self.input_size:
            x = F.interpolate(x, size=self.input_size, mode="bicubic", align_corners=False)
        x = (x - self.pixel_mean) / self.pixel_std
        out: Tensor = self.model.encode_image(x)
        return out.float()

    def encode_text(self, texts: Sequence[TextInput]) -> Tensor:
        tokens = self.tokenizer([str(t) for t in texts]).to(self._device)
        out: Tensor = self.model.encode_text(tokens)
        return out.float()


def build_clip_surrogate(cfg: RunConfig, vocabulary: Iterable[str]) -> OpenClipDualEncoder:
    """Registry factory. The BPE tokenizer covers any word, so ``vocabulary`` is unused."""
    assert cfg.surrogate_checkpoint is not None  # enforced by RunConfig validation
    return OpenClipDualEncoder(
        cfg.surrogate_model,
        cfg.surrogate_checkpoint,
        device=cfg.device,
        mask_token=cfg.mask_token,
    )
