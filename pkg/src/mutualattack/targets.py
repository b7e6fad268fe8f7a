"""Desk-scale black-box target classifiers.

Three small families of distinct architecture, trained locally on the
clean training split. They stand in for the transfer targets the
generator never sees during training.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from tqdm import tqdm

from . import registry
from .checkpoints import TARGET, read_blob, write_blob
from .data import make_loader
from .errors import ConfigurationError
from .models import ImageBatch

logger = logging.getLogger(__name__)


class TargetNet(nn.Module):
    """Base for target families: keeps the constructor arguments for persistence."""

    family = ""

    def __init__(self, num_classes: int, channels: int = 3, image_size: int = 32):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError(f"a target needs at least two classes, got {num_classes}")
        self.hyperparameters: dict[str, Any] = {
            "num_classes": num_classes,
            "channels": channels,
            "image_size": image_size,
        }

    @property
    def input_shape(self) -> tuple[int, int, int]:
        size = int(self.hyperparameters["image_size"])
        return (int(self.hyperparameters["channels"]), size, size)


class SmallConvNet(TargetNet):
    family = "cnn"

    def __init__(self, num_classes: int, channels: int = 3, image_size: int = 32, width: int = 16):
        super().__init__(num_classes, channels, image_size)
        self.hyperparameters["width"] = width
        self.features = nn.Sequential(
            nn.Conv2d(channels, width, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.classifier = nn.Linear(2 * width, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        out: Tensor = self.classifier(self.features(x).flatten(1))
        return out


class MLPClassifier(TargetNet):
    family = "mlp"

    def __init__(self, num_classes: int, channels: int = 3, image_size: int = 32, hidden: int = 128):
        super().__init__(num_classes, channels, image_size)
        self.hyperparameters["hidden"] = hidden
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(channels * image_size * image_size, hidden),
            nn.ReLU(),
            nn.Linear(hidden, num_classes),
        )

    def forward(self, x: Tensor) -> Tensor:
        out: Tensor = self.net(x)
        return out


class TinyResNet(TargetNet):
    family = "resnet"

    def __init__(self, num_classes: int, channels: int = 3, image_size: int = 32, width: int = 16):
        super().__init__(num_classes, channels, image_size)
        self.hyperparameters["width"] = width
        self.stem = nn.Sequential(
            nn.Conv2d(channels, width, kernel_size=3, padding=1), nn.BatchNorm2d(width), nn.ReLU()
        )
        self.block = nn.Sequential(
            nn.Conv2d(width, width, kernel_size=3, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(),
            nn.Conv2d(width, width, kernel_size=3, padding=1),
            nn.BatchNorm2d(width),
        )
        self.classifier = nn.Linear(width, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        h = F.relu(h + self.block(h))
        out: Tensor = self.classifier(F.adaptive_avg_pool2d(h, 1).flatten(1))
        return out


def build_target(family: str, num_classes: int, channels: int = 3, image_size: int = 32) -> TargetNet:
    factory = registry.get("target_family", family)
    net = factory(num_classes=num_classes, channels=channels, image_size=image_size)
    if not isinstance(net, TargetNet):
        raise ConfigurationError(f"target family '{family}' did not build a TargetNet")
    return net


def train_target(
    net: TargetNet,
    train: ImageBatch,
    epochs: int = 5,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    quiet: bool = True,
) -> TargetNet:
    """Adam + cross-entropy on clean images; returns the network frozen in eval mode."""
    torch.manual_seed(seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    loader = make_loader(train, batch_size, seed)
    net.train()
    for _ in tqdm(range(epochs), desc=f"train {net.family}", disable=quiet):
        for images, labels in loader:
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(net(images), labels)
            loss.backward()
            optimizer.step()
    net.eval()
    net.requires_grad_(False)
    return net


def save_target(net: TargetNet, path: str | Path) -> Path:
    return write_blob(
        path,
        TARGET,
        {
            "family": net.family,
            "hyperparameters": dict(net.hyperparameters),
            "state_dict": net.state_dict(),
        },
    )


def load_target(path: str | Path) -> TargetNet:
    blob = read_blob(path, TARGET)
    net = registry.get("target_family", blob["family"])(**blob["hyperparameters"])
    net.load_state_dict(blob["state_dict"])
    net.eval()
    net.requires_grad_(False)
    assert isinstance(net, TargetNet)
    return net
