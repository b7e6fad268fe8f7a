"""Quick built-in invariant suite behind ``mutualattack selfcheck``.

Every check is a zero-argument function returning ``None`` on success and
raising ``AssertionError`` (or any package error) on failure. Checks use
small seeded tensors and a fresh tiny surrogate, so the suite runs in a
few seconds on CPU without downloads.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import torch

from .attack import cls_loss, feat_loss, triplet_loss
from .defense.candidates import StaticSynonymProvider
from .defense.prompts import DEFAULT_PROMPT, build_text_input
from .defense.saliency import PromptScorer, defend, saliency, wrong_labels
from .desk import desk_vocabulary
from .encoders.base import normalize, predict_from_features, probs_from_features
from .encoders.tiny import TinyDualEncoder
from .generator import bound
from .harness import group_overall
from .models import AdversarialBatch, ClsConfig, ImageBatch, PromptTemplate, TripletConfig

CheckFn = Callable[[], None]

_CLASSES = ["cat", "dog", "ship", "truck"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _tiny_setup(seed: int = 0) -> tuple[TinyDualEncoder, AdversarialBatch]:
    torch.manual_seed(seed)
    provider = StaticSynonymProvider()
    encoder = TinyDualEncoder(desk_vocabulary(_CLASSES, DEFAULT_PROMPT, provider), image_size=8)
    encoder.freeze()
    gen = torch.Generator().manual_seed(seed)
    clean = torch.rand(16, 3, 8, 8, generator=gen)
    noise = 0.04 * (2 * torch.rand(16, 3, 8, 8, generator=gen) - 1)
    labels = torch.randint(0, len(_CLASSES), (16,), generator=gen)
    adv = AdversarialBatch(ImageBatch(clean, labels), (clean + noise).clamp(0, 1))
    return encoder, adv


def check_normalization() -> None:
    x = torch.randn(64, 16, generator=torch.Generator().manual_seed(1))
    norms = normalize(x).norm(dim=-1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-6), "rows are not unit length"


def check_simplex() -> None:
    gen = torch.Generator().manual_seed(2)
    probs = probs_from_features(
        normalize(torch.randn(32, 8, generator=gen)), normalize(torch.randn(5, 8, generator=gen)), 0.01
    )
    assert bool((probs >= 0).all()), "negative probability"
    assert torch.allclose(probs.sum(dim=-1), torch.ones(32), atol=1e-5), "rows do not sum to one"


def check_temperature_invariance() -> None:
    gen = torch.Generator().manual_seed(3)
    images = normalize(torch.randn(32, 8, generator=gen))
    texts = normalize(torch.randn(5, 8, generator=gen))
    expected = predict_from_features(images, texts)
    for tau in (0.01, 0.1, 1.0, 10.0):
        got = probs_from_features(images, texts, tau).argmax(dim=-1)
        assert torch.equal(got, expected), f"arg-max changed at temperature {tau}"


def check_bound_projection() -> None:
    gen = torch.Generator().manual_seed(4)
    for _ in range(1000):
        clean = torch.rand(1, 3, 4, 4, generator=gen)
        raw = clean + 0.5 * torch.randn(1, 3, 4, 4, generator=gen)
        out = bound(raw, clean, 0.04)
        assert float((out - clean).abs().max()) <= 0.04 + 1e-6, "projection exceeds epsilon"
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0, "projection leaves [0, 1]"


def check_loss_identities() -> None:
    gen = torch.Generator().manual_seed(5)
    a = normalize(torch.randn(4, 8, generator=gen))
    assert float(feat_loss(a, a)) == 0.0, "feat loss of identical embeddings is not zero"
    assert math.isclose(float(feat_loss(a, -a)), -4.0, abs_tol=1e-5), "feat loss of opposite embeddings"
    # adversarial == far text, and far from the true text by more than alpha.
    assert float(triplet_loss(a, a, -a, TripletConfig(alpha=1.0))) == 0.0, "triplet loss not zero"
    ones = torch.zeros(4, 3)
    ones[:, 0] = 1.0
    got = float(cls_loss(ones, torch.zeros(4, dtype=torch.long), ClsConfig(sigma=0.1)))
    assert math.isclose(got, 10.0, rel_tol=1e-6), f"cls loss at p=1 is {got}, expected 1/sigma"


def check_group_overall_fixtures() -> None:
    rows = {
        "clip": ({"clip": [7.2], "resnet": [38.5, 40.2, 41.8], "vgg": [64.5, 38.9],
                  "light": [45.2, 20.0], "vit": [20.6]}, 30.453),
        "uan": ({"clip": [64.2], "resnet": [19.6, 23.9, 13.4], "vgg": [71.7, 38.7],
                 "light": [58.2, 15.3], "vit": [31.7]}, 41.363),
    }
    for label, (groups, expected) in rows.items():
        acc = {f"{g}{i}": v for g, vs in groups.items() for i, v in enumerate(vs)}
        group_map = {g: [f"{g}{i}" for i in range(len(vs))] for g, vs in groups.items()}
        got = group_overall(acc, group_map)
        assert math.isclose(got, expected, abs_tol=1e-3), f"{label}: overall {got:.3f} != {expected}"


def check_saliency_non_negative() -> None:
    encoder, adv = _tiny_setup(6)
    scorer = PromptScorer(encoder, _CLASSES, adv.adversarial, encoder.default_temperature)
    y_prime = wrong_labels(scorer.probs(DEFAULT_PROMPT), adv.labels)
    for n in range(1, DEFAULT_PROMPT.m + 1):
        assert saliency(scorer, n, DEFAULT_PROMPT, y_prime) >= 0.0, f"negative saliency at {n}"


def check_defense_non_regression() -> None:
    encoder, adv = _tiny_setup(7)
    result = defend(
        DEFAULT_PROMPT, adv, encoder, _CLASSES, encoder.default_temperature,
        StaticSynonymProvider(), rho=0.0,
    )
    assert result.p_true_after >= result.p_true_before - 1e-6, "defense lowered p(y_true)"
    assert result.prompt.m == DEFAULT_PROMPT.m, "defense changed the prompt length"


def check_label_immutability() -> None:
    encoder, adv = _tiny_setup(8)
    result = defend(
        DEFAULT_PROMPT, adv, encoder, _CLASSES, encoder.default_temperature,
        StaticSynonymProvider(), rho=0.0,
    )
    for name in _CLASSES:
        text = build_text_input(name, result.prompt)
        assert text.tokens[PromptTemplate.label_slot] == name, "label token moved or changed"
        assert len(text.tokens) == DEFAULT_PROMPT.m + 1, "text length changed"


CHECKS: dict[str, CheckFn] = {
    "normalization": check_normalization,
    "simplex": check_simplex,
    "temperature-invariance": check_temperature_invariance,
    "bound-projection": check_bound_projection,
    "loss-identities": check_loss_identities,
    "group-overall": check_group_overall_fixtures,
    "saliency-non-negative": check_saliency_non_negative,
    "defense-non-regression": check_defense_non_regression,
    "label-immutability": check_label_immutability,
}


def run_checks(checks: dict[str, CheckFn] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in (checks or CHECKS).items():
        try:
            fn()
        except Exception as exc:  # report every failure, keep going
            results.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))
        else:
            results.append(CheckResult(name, True))
    return results
