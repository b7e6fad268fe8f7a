"""Desk-scale fixture: a synthetic dataset and a quickly aligned tiny surrogate.

None of this is needed with a real dataset and a pretrained CLIP; it lets
the whole pipeline run end to end on a laptop CPU in seconds.
"""

from __future__ import annotations

import logging
import random
from collections.abc import Iterable, Sequence

import torch
import torch.nn.functional as F
from tqdm import tqdm

from .data import DatasetSplits, make_loader
from .defense.candidates import CandidateProvider
from .defense.prompts import build_text_input
from .defense.saliency import random_prompt
from .encoders.base import normalize, similarity_matrix
from .encoders.tiny import TinyDualEncoder
from .errors import ConfigurationError
from .models import ImageBatch, PromptTemplate

logger = logging.getLogger(__name__)


def synthetic_dataset(
    class_names: Sequence[str],
    per_class: int = 200,
    image_size: int = 32,
    channels: int = 3,
    val_fraction: float = 0.2,
    seed: int = 0,
    name: str = "synthetic",
    contrast: float = 0.02,
    noise: float = 0.05,
) -> DatasetSplits:
    """Faint class signals on a shared smooth background.

    A class is a colour tint plus a low-frequency pattern, each with a
    per-pixel RMS of ``contrast``; the tint sums to zero over channels and
    the pattern to zero over each channel, so classes differ from the
    background only in those two signals. Samples add Gaussian ``noise`` and
    a brightness shift of up to 0.05. Keep ``contrast`` on the order of the
    attack budget so that a bounded perturbation can cross class boundaries.

    Every class contributes ``round(per_class * val_fraction)`` (at least
    one) samples to val and the rest to train.
    """
    if per_class < 2:
        raise ConfigurationError(f"synthetic_per_class must be >= 2, got {per_class}")
    if contrast <= 0 or noise < 0:
        raise ConfigurationError(f"need contrast > 0 and noise >= 0, got {contrast} and {noise}")
    num_classes = len(class_names)
    gen = torch.Generator().manual_seed(seed)
    size = (image_size, image_size)

    background = 0.3 + 0.4 * _smooth(torch.rand(1, channels, 4, 4, generator=gen), size)

    tint = torch.randn(num_classes, channels, generator=gen)
    if channels > 1:
        tint = tint - tint.mean(dim=1, keepdim=True)
    tint = contrast * tint / _rms(tint, dims=(1,))

    pattern = _smooth(torch.randn(num_classes, channels, 4, 4, generator=gen), size)
    pattern = pattern - pattern.mean(dim=(2, 3), keepdim=True)
    pattern = contrast * pattern / _rms(pattern, dims=(1, 2, 3))

    prototypes = background + tint[:, :, None, None] + pattern

    n_val = max(1, round(per_class * val_fraction))
    train_x, train_y, val_x, val_y = [], [], [], []
    for c in range(num_classes):
        jitter = noise * torch.randn(per_class, channels, image_size, image_size, generator=gen)
        shift = 0.1 * (torch.rand(per_class, 1, 1, 1, generator=gen) - 0.5)
        samples = (prototypes[c] + jitter + shift).clamp(0.0, 1.0)
        labels = torch.full((per_class,), c, dtype=torch.long)
        val_x.append(samples[:n_val])
        val_y.append(labels[:n_val])
        train_x.append(samples[n_val:])
        train_y.append(labels[n_val:])

    return DatasetSplits(
        name=name,
        class_names=list(class_names),
        train=ImageBatch(torch.cat(train_x), torch.cat(train_y)),
        val=ImageBatch(torch.cat(val_x), torch.cat(val_y)),
    )


def _smooth(coarse: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(coarse, size=size, mode="bilinear", align_corners=False)


def _rms(x: torch.Tensor, dims: tuple[int, ...]) -> torch.Tensor:
    return x.pow(2).mean(dim=dims, keepdim=True).sqrt().clamp_min(1e-8)


def desk_vocabulary(
    class_names: Iterable[str], prompt: PromptTemplate, provider: CandidateProvider
) -> list[str]:
    """Class names, prompt words and everything the provider can propose, de-duplicated."""
    words: list[str] = []
    for word in [*class_names, *prompt.tokens, *provider.vocabulary()]:
        if word not in words:
            words.append(word)
    return words


def align_tiny_surrogate(
    encoder: TinyDualEncoder,
    train: ImageBatch,
    class_names: Sequence[str],
    prompt: PromptTemplate,
    provider: CandidateProvider | None = None,
    epochs: int = 30,
    lr: float = 1e-2,
    temperature: float = 0.1,
    batch_size: int = 64,
    seed: int = 0,
    quiet: bool = True,
) -> TinyDualEncoder:
    """Symmetric contrastive fit of both towers so zero-shot accuracy is well above chance.

    With a ``provider``, half of the steps use a randomly reworded prompt so
    that prompt words other than the initial ones carry meaning too.
    """
    rng = random.Random(seed)
    torch.manual_seed(seed)
    encoder.train()
    optimizer = torch.optim.Adam(encoder.parameters(), lr=lr)
    loader = make_loader(train, batch_size, seed)

    for epoch in tqdm(range(epochs), desc="align surrogate", disable=quiet):
        total = 0.0
        for images, labels in loader:
            step_prompt = prompt
            if provider is not None and rng.random() < 0.5:
                step_prompt = random_prompt(prompt, provider, rng, accept=encoder.has_token)
            texts = [build_text_input(c, step_prompt) for c in class_names]
            image_features = normalize(encoder.encode_image(images))
            text_features = normalize(encoder.encode_text(texts))
            logits = similarity_matrix(image_features, text_features) / temperature

            image_loss = F.cross_entropy(logits, labels)
            # Text side: each present class against every image of the batch.
            column_log_probs = torch.log_softmax(logits.T, dim=1)
            positives = F.one_hot(labels, len(class_names)).T.to(logits.dtype)
            present = positives.sum(dim=1) > 0
            text_loss = -(
                (column_log_probs * positives).sum(dim=1)[present] / positives.sum(dim=1)[present]
            ).mean()

            loss = 0.5 * (image_loss + text_loss)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss)
        logger.debug("align epoch %d loss %.4f", epoch, total / max(1, len(loader)))

    encoder.eval()
    return encoder
