"""Run configuration.

A run is described by one flat YAML mapping. Every key maps to a field of
:class:`RunConfig`; unknown keys, out-of-range values and missing
conditional fields raise :class:`~mutualattack.errors.ConfigurationError`
naming the offending field.

Only two environment variables are honoured, and only at load time:

- ``MUTUALATTACK_OUTPUT_DIR`` overrides ``output_dir``
- ``MUTUALATTACK_DEVICE`` overrides ``device``
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from io import StringIO
from pathlib import Path
from typing import Any

from ruamel.yaml import YAML

from . import registry
from .attack import AttackConfig
from .errors import ConfigurationError
from .models import ClsConfig, LossWeights, PromptTemplate, TrainSchedule, TripletConfig

SCHEMA_VERSION = 1

ENV_OUTPUT_DIR = "MUTUALATTACK_OUTPUT_DIR"
ENV_DEVICE = "MUTUALATTACK_DEVICE"

DATA_FIELDS = (
    "image_size", "channels", "dataset", "dataset_name", "class_names",
    "synthetic_per_class", "val_fraction", "seed",
)
SURROGATE_FIELDS = DATA_FIELDS + (
    "surrogate", "surrogate_model", "surrogate_checkpoint", "mask_token", "tiny_dim",
    "tiny_hidden", "tiny_token_dim", "prompt", "candidate_provider", "lm_model",
)
TARGET_FIELDS = DATA_FIELDS + ("target_epochs",)

DESK_CLASS_NAMES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION

    # surrogate
    surrogate: str = "tiny"
    """Registered surrogate backend: ``tiny`` or ``clip``."""
    surrogate_model: str = "ViT-B-32"
    """open_clip architecture name; always explicit."""
    surrogate_checkpoint: str | None = None
    """open_clip pretrained tag or file for ``clip``; tiny weights blob for ``tiny``."""
    mask_token: str | None = None
    tiny_dim: int = 32
    tiny_hidden: int = 64
    tiny_token_dim: int = 32

    # data
    image_size: int = 32
    channels: int = 3
    dataset: str | None = None
    """Dataset manifest; the synthetic desk dataset when unset."""
    dataset_name: str = "synthetic"
    class_names: list[str] = field(default_factory=lambda: list(DESK_CLASS_NAMES))
    synthetic_per_class: int = 200
    val_fraction: float = 0.2

    # attack
    prompt: str = "a photo of a"
    epsilon: float = 0.04
    lr: float = 1e-4
    tau: float | None = None
    """Softmax temperature; the backend default when unset."""
    alpha: float = 1.0
    sigma: float = 0.1
    weight_feat: float = 1.0
    weight_tri: float = 1.0
    weight_cls: float = 1.0

    # defense
    rho: float | None = None
    """Absolute saliency threshold; the ``rho_percentile`` of the scores when unset."""
    rho_percentile: float = 60.0
    k: int = 10
    candidate_provider: str = "static"
    lm_model: str = "gpt2"

    # generator
    generator_ngf: int = 16
    generator_blocks: int = 2
    generator_scale: float = 2.0

    # schedule
    outer_iterations: int = 10
    num_g: int = 2
    batch_size: int = 32
    defense_batch_size: int = 64
    seed: int = 0

    # evaluation
    targets: dict[str, str] = field(default_factory=lambda: {"cnn": "cnn", "mlp": "mlp"})
    """Target name -> desk family name or path to a saved target blob."""
    group_map: dict[str, list[str]] = field(
        default_factory=lambda: {"surrogate": ["surrogate"], "cnn": ["cnn"], "mlp": ["mlp"]}
    )
    target_epochs: int = 10

    output_dir: str = "runs/default"
    device: str = "cpu"

    def __post_init__(self) -> None:
        _require(self.schema_version == SCHEMA_VERSION, "schema_version",
                 f"unsupported schema version {self.schema_version}; expected {SCHEMA_VERSION}")
        _require(self.surrogate in registry.available("surrogate"), "surrogate",
                 f"'{self.surrogate}' is not one of {registry.available('surrogate')}")
        if self.surrogate == "clip" and not self.surrogate_checkpoint:
            raise ConfigurationError(
                "missing required field 'surrogate_checkpoint' (pretrained tag) for surrogate 'clip'"
            )
        _require(self.candidate_provider in registry.available("candidate_provider"),
                 "candidate_provider",
                 f"'{self.candidate_provider}' is not one of "
                 f"{registry.available('candidate_provider')}")

        _require(self.epsilon > 0, "epsilon", f"must be > 0, got {self.epsilon}")
        _require(self.lr >= 0, "lr", f"must be >= 0, got {self.lr}")
        _require(self.sigma > 0, "sigma", f"must be > 0, got {self.sigma}")
        _require(self.tau is None or self.tau > 0, "tau", f"must be > 0, got {self.tau}")
        _require(self.alpha >= 0, "alpha", f"must be >= 0, got {self.alpha}")
        _require(self.rho is None or self.rho >= 0, "rho", f"must be >= 0, got {self.rho}")
        _require(0 <= self.rho_percentile <= 100, "rho_percentile",
                 f"must be in [0, 100], got {self.rho_percentile}")
        _require(self.k >= 1, "k", f"must be >= 1, got {self.k}")
        _require(0 < self.val_fraction < 1, "val_fraction",
                 f"must be in (0, 1), got {self.val_fraction}")
        _require(self.image_size >= 8, "image_size", f"must be >= 8, got {self.image_size}")
        _require(self.image_size % 4 == 0, "image_size",
                 f"must be divisible by the generator stride 4, got {self.image_size}")
        _require(self.channels >= 1, "channels", f"must be >= 1, got {self.channels}")
        _require(len(self.class_names) >= 2, "class_names", "needs at least two classes")
        _require(all(c.strip() for c in self.class_names), "class_names", "contains an empty name")
        _require(len(set(self.class_names)) == len(self.class_names), "class_names",
                 "contains duplicates")
        _require(bool(self.prompt.split()), "prompt", "needs at least one token")
        for name in ("outer_iterations", "num_g", "batch_size", "defense_batch_size",
                     "synthetic_per_class", "tiny_dim", "tiny_hidden", "tiny_token_dim",
                     "generator_ngf", "target_epochs"):
            value = getattr(self, name)
            _require(value >= 1, name, f"must be >= 1, got {value}")
        _require(self.generator_blocks >= 0, "generator_blocks",
                 f"must be >= 0, got {self.generator_blocks}")
        _require(self.generator_scale > 0, "generator_scale",
                 f"must be > 0, got {self.generator_scale}")
        self._check_group_map()

    def _check_group_map(self) -> None:
        assigned: dict[str, str] = {}
        for group, members in self.group_map.items():
            _require(bool(members), "group_map", f"group '{group}' is empty")
            for name in members:
                _require(name not in assigned, "group_map",
                         f"target '{name}' is in both '{assigned.get(name)}' and '{group}'")
                assigned[name] = group
        evaluated = set(self.targets) | {"surrogate"}
        unknown = sorted(set(assigned) - evaluated)
        _require(not unknown, "group_map", f"names targets that are not configured: {unknown}")
        missing = sorted(set(self.targets) - set(assigned))
        _require(not missing, "group_map", f"targets without a group: {missing}")

    # --- derived views ---

    def prompt_template(self) -> PromptTemplate:
        return PromptTemplate.from_text(self.prompt)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            outer_iterations=self.outer_iterations,
            num_g=self.num_g,
            batch_size=self.batch_size,
            defense_batch_size=self.defense_batch_size,
            seed=self.seed,
        )

    def attack_config(self, temperature: float) -> AttackConfig:
        return AttackConfig(
            temperature=temperature,
            triplet=TripletConfig(alpha=self.alpha),
            cls=ClsConfig(sigma=self.sigma),
            weights=LossWeights(feat=self.weight_feat, tri=self.weight_tri, cls=self.weight_cls),
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self, names: tuple[str, ...], *extra: str) -> str:
        """Stable hash of the named fields, used to tell whether a cached artifact still fits."""
        payload = {name: getattr(self, name) for name in names}
        payload["_extra"] = list(extra)
        blob = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _require(condition: bool, name: str, message: str) -> None:
    if not condition:
        raise ConfigurationError(f"{name}: {message}")


_OPTIONAL: dict[str, type] = {
    "surrogate_checkpoint": str,
    "mask_token": str,
    "dataset": str,
    "tau": float,
    "rho": float,
}


def _coerce(name: str, value: Any, default: Any) -> Any:
    """Convert a YAML scalar to the type of the field default."""
    if value is None:
        if name in _OPTIONAL:
            return None
        raise ConfigurationError(f"{name}: must not be empty")
    kind = _OPTIONAL.get(name) or type(default)
    try:
        if kind is bool or isinstance(value, bool):
            raise TypeError("booleans are not accepted")
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise TypeError("expected an integer")
            return int(value)
        if kind is float:
            return float(value)
        if kind is str:
            return str(value)
        if kind is list:
            if not isinstance(value, list):
                raise TypeError("expected a list")
            return [str(v) for v in value]
        if kind is dict and name == "group_map":
            if not isinstance(value, dict):
                raise TypeError("expected a mapping")
            return {str(g): [str(m) for m in (members or [])] for g, members in value.items()}
        if kind is dict:
            if not isinstance(value, dict):
                raise TypeError("expected a mapping")
            return {str(k): str(v) for k, v in value.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{name}: invalid value {value!r} ({exc})") from None
    raise ConfigurationError(f"{name}: unsupported field type {kind.__name__}")  # pragma: no cover


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    """Validate a raw mapping and fill in defaults."""
    allowed = {f.name: f for f in fields(RunConfig)}
    unknown = set(data).difference(allowed)
    if unknown:
        ks = ", ".join(sorted(map(str, unknown)))
        raise ConfigurationError(
            f"Unknown configuration key(s): {ks}. Allowed: {', '.join(sorted(allowed))}"
        )
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        f = allowed[name]
        if f.default is not dataclasses.MISSING:
            default = f.default
        else:
            assert f.default_factory is not dataclasses.MISSING
            default = f.default_factory()
        kwargs[name] = _coerce(name, value, default)
    return RunConfig(**kwargs)


def _yaml() -> YAML:
    return YAML(typ="safe", pure=True)


def _writer() -> YAML:
    # round-trip dumper: keys stay in field order
    yaml = YAML()
    yaml.indent(mapping=2, sequence=4, offset=2)
    yaml.default_flow_style = False
    yaml.width = 4096
    return yaml


def load_config(path: str | Path | None = None, apply_env: bool = True) -> RunConfig:
    """Load and validate a run configuration; ``None`` gives the defaults.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        ConfigurationError: On unknown keys, bad values or missing fields.
    """
    data: Any = {}
    if path is not None:
        src = Path(path)
        if not src.is_file():
            raise FileNotFoundError(f"config file not found: {src}")
        data = _yaml().load(src.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{src}: expected a key-value mapping at the top level")
    cfg = config_from_dict(data)
    if apply_env:
        cfg = apply_environment(cfg)
    return cfg


def apply_environment(cfg: RunConfig) -> RunConfig:
    overrides: dict[str, Any] = {}
    if os.environ.get(ENV_OUTPUT_DIR):
        overrides["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    if os.environ.get(ENV_DEVICE):
        overrides["device"] = os.environ[ENV_DEVICE]
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def dump_config(cfg: RunConfig) -> str:
    """The YAML text of ``cfg``, keys in field order, ``schema_version`` first."""
    buffer = StringIO()
    _writer().dump(cfg.to_dict(), buffer)
    return buffer.getvalue()


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dump_config(cfg), encoding="utf-8")
    return out
