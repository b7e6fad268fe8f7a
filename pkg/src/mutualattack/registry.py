"""Component registry.

This module keeps one name -> factory table per extension point:

    - ``surrogate``: builds a :class:`~mutualattack.encoders.base.DualEncoder` from a RunConfig
    - ``candidate_provider``: builds a candidate word provider from a RunConfig
    - ``defense``: a defense strategy used by the trainer between attack phases
    - ``target_family``: builds an untrained desk-scale target classifier

Notes:
    - Built-in components are referenced by import path and resolved lazily,
      so importing the registry never pulls in torch-heavy optional packages.
    - Registering a name that already exists replaces it; this is how tests
      and plugins swap a backend.
    - ``reset_registry`` drops everything registered at runtime and restores
      the built-ins.
"""

from __future__ import annotations

import importlib
from collections.abc import Callable
from typing import Any, TypeVar, overload

from .errors import ConfigurationError

F = TypeVar("F", bound=Callable[..., Any])

_BUILTINS: dict[str, dict[str, str]] = {
    "surrogate": {
        "tiny": "mutualattack.encoders.tiny:build_tiny_surrogate",
        "clip": "mutualattack.encoders.clip:build_clip_surrogate",
    },
    "candidate_provider": {
        "static": "mutualattack.defense.candidates:build_static_provider",
        "gpt2": "mutualattack.defense.candidates:build_gpt2_provider",
    },
    "defense": {
        "prompt": "mutualattack.trainer:prompt_defense",
        "none": "mutualattack.trainer:no_defense",
        "random": "mutualattack.trainer:random_prompt_defense",
    },
    "target_family": {
        "cnn": "mutualattack.targets:SmallConvNet",
        "mlp": "mutualattack.targets:MLPClassifier",
        "resnet": "mutualattack.targets:TinyResNet",
    },
}

# Runtime registrations, checked before the built-ins.
_registry: dict[str, dict[str, Callable[..., Any]]] = {kind: {} for kind in _BUILTINS}


def _check_kind(kind: str) -> None:
    if kind not in _BUILTINS:
        raise ConfigurationError(
            f"Unknown component kind '{kind}'. Allowed: {', '.join(sorted(_BUILTINS))}"
        )


def _resolve(path: str) -> Callable[..., Any]:
    module_name, _, attr = path.partition(":")
    module = importlib.import_module(module_name)
    factory: Callable[..., Any] = getattr(module, attr)
    return factory


def available(kind: str) -> list[str]:
    """Return the sorted names registered for ``kind``."""
    _check_kind(kind)
    return sorted(set(_BUILTINS[kind]) | set(_registry[kind]))


def get(kind: str, name: str) -> Callable[..., Any]:
    """Retrieve a component factory by kind and name.

    Raises:
        ConfigurationError: If nothing is registered under that name.
    """
    _check_kind(kind)
    if name in _registry[kind]:
        return _registry[kind][name]
    if name in _BUILTINS[kind]:
        return _resolve(_BUILTINS[kind][name])
    raise ConfigurationError(
        f"Unknown {kind} '{name}'. Available: {', '.join(available(kind))}"
    )


def register(kind: str, name: str, factory: Callable[..., Any]) -> Callable[..., Any]:
    """Register ``factory`` under ``name``; replaces an existing entry."""
    _check_kind(kind)
    if not name:
        raise ConfigurationError(f"{kind} name must be a non-empty string")
    _registry[kind][name] = factory
    return factory


@overload
def component(kind: str, name: F) -> F: ...


@overload
def component(kind: str, name: str | None = None) -> Callable[[F], F]: ...


def component(kind: str, name: str | F | None = None) -> F | Callable[[F], F]:
    """Decorator registering a factory; usable with or without a name.

    ``@component("surrogate")`` registers under the function name,
    ``@component("surrogate", "mine")`` under ``"mine"``.
    """
    if callable(name):
        func = name
        register(kind, func.__name__, func)
        return func

    def wrapper(func: F) -> F:
        register(kind, name or func.__name__, func)
        return func

    return wrapper


def reset_registry() -> None:
    """Drop runtime registrations, keeping only the built-in components.

    Useful for ensuring test isolation between runs.
    """
    for table in _registry.values():
        table.clear()
