"""
The universal perturbation generator and the l-infinity bounding rule.

The network is a residual image-to-image translator (downsample, residual
blocks, upsample). Its tanh head produces an additive perturbation scaled
to ``[-scale * eps, +scale * eps]`` which is added to the clean image, so
the bound below is active and a zero-initialized head returns the clean
image unchanged.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
from torch import Tensor, nn

from .checkpoints import GENERATOR, read_blob, write_blob
from .errors import ConfigurationError, InputContractError
from .models import AdversarialBatch, ImageBatch


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, kernel_size=3),
            nn.InstanceNorm2d(width, affine=True),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, kernel_size=3),
            nn.InstanceNorm2d(width, affine=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        out: Tensor = x + self.body(x)
        return out


class ResnetGenerator(nn.Module):
    def __init__(
        self,
        channels: int = 3,
        ngf: int = 64,
        n_blocks: int = 6,
        n_down: int = 2,
        scale: float = 2.0,
        zero_init_head: bool = False,
    ):
        super().__init__()
        self.hyperparameters: dict[str, Any] = {
            "channels": channels,
            "ngf": ngf,
            "n_blocks": n_blocks,
            "n_down": n_down,
            "scale": scale,
        }

        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(channels, ngf, kernel_size=7),
            nn.InstanceNorm2d(ngf, affine=True),
            nn.ReLU(inplace=True),
        ]
        width = ngf
        for _ in range(n_down):
            layers += [
                nn.Conv2d(width, width * 2, kernel_size=3, stride=2, padding=1),
                nn.InstanceNorm2d(width * 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            width *= 2
        layers += [ResidualBlock(width) for _ in range(n_blocks)]
        for _ in range(n_down):
            layers += [
                nn.ConvTranspose2d(
                    width, width // 2, kernel_size=3, stride=2, padding=1, output_padding=1
                ),
                nn.InstanceNorm2d(width // 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            width //= 2
        self.body = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(width, channels, kernel_size=7))

        if zero_init_head:
            head_conv = self.head[1]
            assert isinstance(head_conv, nn.Conv2d)
            nn.init.zeros_(head_conv.weight)
            assert head_conv.bias is not None
            nn.init.zeros_(head_conv.bias)

    @property
    def stride(self) -> int:
        return int(2 ** self.hyperparameters["n_down"])

    def forward(self, x: Tensor, epsilon: float) -> Tensor:
        delta = torch.tanh(self.head(self.body(x))) * (self.hyperparameters["scale"] * epsilon)
        out: Tensor = x + delta
        return out


@dataclass
class GeneratorState:
    """The generator network, its budget and its training progress."""

    network: ResnetGenerator
    epsilon: float = 0.04
    """l-infinity budget in raw pixel units."""

    lr: float = 1e-4
    iteration: int = 0
    """Completed outer iterations."""

    steps: int = 0
    """Applied optimizer steps."""

    optimizer: torch.optim.Adam | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")

    def ensure_optimizer(self) -> torch.optim.Adam:
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(self.network.parameters(), lr=self.lr)
        return self.optimizer

    def frozen_copy(self) -> GeneratorState:
        """An independent snapshot for concurrent inference; carries no optimizer."""
        network = copy.deepcopy(self.network).eval()
        network.requires_grad_(False)
        return GeneratorState(
            network=network,
            epsilon=self.epsilon,
            lr=self.lr,
            iteration=self.iteration,
            steps=self.steps,
        )


def new_generator_state(
    epsilon: float = 0.04,
    lr: float = 1e-4,
    channels: int = 3,
    ngf: int = 64,
    n_blocks: int = 6,
    scale: float = 2.0,
    seed: int | None = None,
    zero_init_head: bool = False,
) -> GeneratorState:
    if seed is not None:
        torch.manual_seed(seed)
    network = ResnetGenerator(
        channels=channels, ngf=ngf, n_blocks=n_blocks, scale=scale, zero_init_head=zero_init_head
    )
    return GeneratorState(network=network, epsilon=epsilon, lr=lr)


def generate_raw(state: GeneratorState, image: Tensor) -> Tensor:
    """Unbounded generator output G(x), same shape as ``image``."""
    channels = state.network.hyperparameters["channels"]
    stride = state.network.stride
    if image.ndim != 4 or image.shape[1] != channels:
        raise InputContractError(
            f"generator expects [B, {channels}, H, W], got {tuple(image.shape)}"
        )
    if image.shape[-1] % stride or image.shape[-2] % stride:
        raise InputContractError(
            f"image size {tuple(image.shape[-2:])} is not divisible by the generator stride {stride}"
        )
    return state.network(image, state.epsilon)


def bound(raw: Tensor, clean: Tensor, epsilon: float) -> Tensor:
    """Project ``raw`` onto the epsilon box around ``clean``, then onto [0, 1].

    ``min(clean + eps, max(raw, clean - eps))`` followed by the pixel clamp.
    Gradients reach ``raw`` wherever neither bound is active.
    """
    if epsilon < 0:
        raise ConfigurationError(f"epsilon must be >= 0, got {epsilon}")
    if raw.shape != clean.shape:
        raise InputContractError(
            f"raw shape {tuple(raw.shape)} differs from clean {tuple(clean.shape)}"
        )
    boxed = torch.minimum(clean + epsilon, torch.maximum(raw, clean - epsilon))
    return boxed.clamp(0.0, 1.0)


def forward(state: GeneratorState, image: Tensor) -> Tensor:
    """Bounded adversarial images G(x)."""
    return bound(generate_raw(state, image), image, state.epsilon)


@torch.no_grad()
def adversarial_batch(state: GeneratorState, batch: ImageBatch, chunk_size: int = 256) -> AdversarialBatch:
    """Run the generator over ``batch`` without tracking gradients."""
    chunks = [
        forward(state, batch.images[i : i + chunk_size])
        for i in range(0, len(batch), chunk_size)
    ]
    return AdversarialBatch(clean=batch, adversarial=torch.cat(chunks))


def save_generator(state: GeneratorState, path: str | Path) -> Path:
    optimizer_state = state.optimizer.state_dict() if state.optimizer is not None else None
    return write_blob(
        path,
        GENERATOR,
        {
            "epsilon": state.epsilon,
            "lr": state.lr,
            "iteration": state.iteration,
            "steps": state.steps,
            "architecture": dict(state.network.hyperparameters),
            "state_dict": state.network.state_dict(),
            "optimizer": optimizer_state,
        },
    )


def load_generator(path: str | Path) -> GeneratorState:
    blob = read_blob(path, GENERATOR)
    network = ResnetGenerator(**blob["architecture"])
    network.load_state_dict(blob["state_dict"])
    state = GeneratorState(
        network=network,
        epsilon=float(blob["epsilon"]),
        lr=float(blob["lr"]),
        iteration=int(blob["iteration"]),
        steps=int(blob["steps"]),
    )
    if blob.get("optimizer") is not None:
        state.ensure_optimizer().load_state_dict(blob["optimizer"])
    return state
