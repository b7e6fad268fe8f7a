"""
Core data models for mutualattack.

These classes are "dumb" data containers shared by the encoders, the
attack, the defense, the trainer and the evaluation harness. The logic
that fills them lives in the other modules.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar

from torch import Tensor

from .errors import ConfigurationError, InputContractError


# --- Text side ---


@dataclass(frozen=True)
class TextInput:
    """
    The token sequence fed to the text encoder for one class.

    The label token always comes first, followed by the prompt tokens.
    """

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.tokens:
            raise InputContractError("TextInput needs at least the label token")
        if not self.tokens[0]:
            raise InputContractError("TextInput label token is empty")

    @property
    def label(self) -> str:
        return self.tokens[0]

    @property
    def prompt_tokens(self) -> tuple[str, ...]:
        return self.tokens[1:]

    def __str__(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class PromptTemplate:
    """
    The dynamic prompt tokens v_1..v_m that follow the class label.

    Positions are 1-based everywhere in the public API so that position
    ``n`` names token ``v_n``.
    """

    tokens: tuple[str, ...]
    """The prompt words, e.g. ``("a", "photo", "of", "a")``."""

    label_slot: ClassVar[int] = 0
    """Index of the label token inside the built TextInput; fixed at the start."""

    def __post_init__(self) -> None:
        if len(self.tokens) < 1:
            raise ConfigurationError("a prompt template needs at least one token")
        if any(not t for t in self.tokens):
            raise ConfigurationError(f"prompt template contains an empty token: {self.tokens!r}")

    @classmethod
    def from_text(cls, text: str) -> PromptTemplate:
        return cls(tuple(text.split()))

    @property
    def m(self) -> int:
        return len(self.tokens)

    def token(self, n: int) -> str:
        self._check_position(n)
        return self.tokens[n - 1]

    def with_token(self, n: int, word: str) -> PromptTemplate:
        """Return a copy with token ``n`` replaced by ``word``."""
        self._check_position(n)
        tokens = list(self.tokens)
        tokens[n - 1] = word
        return PromptTemplate(tuple(tokens))

    def _check_position(self, n: int) -> None:
        if not 1 <= n <= self.m:
            raise InputContractError(f"prompt position {n} out of range 1..{self.m}")

    def __str__(self) -> str:
        return " ".join(self.tokens)


@dataclass
class ZeroShotHead:
    """One TextInput per class plus the softmax temperature."""

    class_texts: list[TextInput]
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if len(self.class_texts) < 2:
            raise ConfigurationError("a zero-shot head needs at least two classes")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")

    @property
    def num_classes(self) -> int:
        return len(self.class_texts)

    @property
    def class_names(self) -> list[str]:
        return [t.label for t in self.class_texts]


@dataclass(frozen=True)
class SaliencyReport:
    """Masked word saliency of every prompt position and the resulting update set."""

    scores: tuple[float, ...]
    """S(v_n) for n = 1..m, clipped at zero."""

    threshold: float
    """The threshold rho actually applied."""

    update_set: tuple[int, ...]
    """1-based positions whose score is strictly greater than the threshold."""

    def to_dict(self) -> dict[str, Any]:
        return {
            "scores": list(self.scores),
            "threshold": self.threshold,
            "update_set": list(self.update_set),
        }


@dataclass(frozen=True)
class CandidateSet:
    """Replacement words for one prompt position. Always contains the original."""

    position: int
    original: str
    words: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.words:
            raise ConfigurationError(f"empty candidate set for position {self.position}")


# --- Image side ---


@dataclass
class ImageBatch:
    """Clean images in [0, 1] with their ground-truth labels."""

    images: Tensor
    """Pixel tensor of shape [N, C, H, W]."""

    labels: Tensor
    """Integer class indices of shape [N]."""

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise InputContractError(f"images must be [N, C, H, W], got {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise InputContractError(
                f"labels shape {tuple(self.labels.shape)} does not match "
                f"{self.images.shape[0]} images"
            )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, index: Tensor) -> ImageBatch:
        return ImageBatch(self.images[index], self.labels[index])


@dataclass
class AdversarialBatch:
    """Adversarial images next to the clean images they were produced from."""

    clean: ImageBatch
    adversarial: Tensor

    def __post_init__(self) -> None:
        if self.adversarial.shape != self.clean.images.shape:
            raise InputContractError(
                f"adversarial shape {tuple(self.adversarial.shape)} differs from clean "
                f"{tuple(self.clean.images.shape)}"
            )

    @property
    def labels(self) -> Tensor:
        return self.clean.labels

    def __len__(self) -> int:
        return len(self.clean)

    def max_deviation(self) -> Tensor:
        """Per-sample l-infinity distance between adversarial and clean images."""
        diff = (self.adversarial - self.clean.images).abs()
        return diff.flatten(1).amax(dim=1)


# --- Attack side ---


@dataclass(frozen=True)
class TripletConfig:
    alpha: float = 1.0
    """Margin of the triplet term, in squared embedding distance units."""

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class ClsConfig:
    sigma: float = 0.1
    """Offset in the inverse cross-entropy term; keeps the loss finite."""

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the three attack terms. A zero weight ablates that term."""

    feat: float = 1.0
    tri: float = 1.0
    cls: float = 1.0


@dataclass(frozen=True)
class AttackLossReport:
    """Batch means of the (weighted) attack terms of one generator step."""

    feat: float
    tri: float
    cls: float
    total: float

    @classmethod
    def from_components(cls, feat: float, tri: float, cls_: float) -> AttackLossReport:
        return cls(feat=feat, tri=tri, cls=cls_, total=feat + tri + cls_)

    @classmethod
    def mean_of(cls, reports: list[AttackLossReport]) -> AttackLossReport:
        if not reports:
            return cls.from_components(0.0, 0.0, 0.0)
        n = len(reports)
        return cls.from_components(
            sum(r.feat for r in reports) / n,
            sum(r.tri for r in reports) / n,
            sum(r.cls for r in reports) / n,
        )

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


# --- Training ---


@dataclass(frozen=True)
class TrainSchedule:
    outer_iterations: int = 10
    """Number of attack + defense cycles."""

    num_g: int = 2
    """Full passes over the training set per attack phase."""

    batch_size: int = 32
    defense_batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.outer_iterations < 1:
            raise ConfigurationError("outer_iterations must be >= 1")
        if self.num_g < 1:
            raise ConfigurationError("num_g must be >= 1")
        if self.batch_size < 1 or self.defense_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")


@dataclass
class IterationRecord:
    """Everything measured at the end of one outer iteration."""

    iteration: int
    seed: int
    loss: AttackLossReport
    prompt: str
    """Prompt in force after this iteration's defense."""

    text_fingerprint: str
    """Hash of the class text embeddings the attack phase used."""

    surrogate_clean_acc: float
    surrogate_adv_acc: float
    """Surrogate zero-shot accuracy on held-out adversarial images, initial prompt."""

    surrogate_adv_acc_current: float
    """Same, under the prompt in force after this iteration."""

    target_adv_acc: dict[str, float] = field(default_factory=dict)
    defense: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["loss"] = self.loss.to_dict()
        return data


# --- Evaluation ---


@dataclass(frozen=True)
class TargetResult:
    name: str
    group: str
    clean_acc: float
    adv_acc: float
    attack_success_rate: float


@dataclass
class TransferReport:
    """Per-target accuracies and the group-wise overall scores of one split."""

    split: str
    results: list[TargetResult]
    group_map: dict[str, list[str]]
    overall: float
    """Group-wise average of adversarial accuracy."""

    clean_overall: float
    epsilon: float | None = None
    source_dataset: str = ""
    eval_dataset: str = ""

    def adversarial_accuracies(self) -> dict[str, float]:
        return {r.name: r.adv_acc for r in self.results}

    def clean_accuracies(self) -> dict[str, float]:
        return {r.name: r.clean_acc for r in self.results}

    def to_dict(self) -> dict[str, Any]:
        return {
            "split": self.split,
            "source_dataset": self.source_dataset,
            "eval_dataset": self.eval_dataset,
            "epsilon": self.epsilon,
            "group_map": {g: list(names) for g, names in self.group_map.items()},
            "overall": self.overall,
            "clean_overall": self.clean_overall,
            "results": [asdict(r) for r in self.results],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TransferReport:
        return cls(
            split=data["split"],
            results=[TargetResult(**r) for r in data["results"]],
            group_map={g: list(v) for g, v in data["group_map"].items()},
            overall=float(data["overall"]),
            clean_overall=float(data["clean_overall"]),
            epsilon=data.get("epsilon"),
            source_dataset=data.get("source_dataset", ""),
            eval_dataset=data.get("eval_dataset", ""),
        )
