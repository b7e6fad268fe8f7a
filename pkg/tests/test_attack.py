import math

import pytest
import torch

from mutualattack.attack import (
    AttackConfig,
    attack_objective,
    attack_step,
    cls_loss,
    cls_loss_from_logits,
    feat_loss,
    least_similar_label,
    triplet_loss,
)
from mutualattack.defense.prompts import DEFAULT_PROMPT, TextFeatureCache
from mutualattack.encoders.base import normalize
from mutualattack.errors import InputContractError, TrainingDivergenceError
from mutualattack.generator import forward
from mutualattack.models import ClsConfig, ImageBatch, LossWeights, TripletConfig

E1 = torch.tensor([[1.0, 0.0]])
E2 = torch.tensor([[0.0, 1.0]])


def test_feat_loss_extremes():
    assert float(feat_loss(E1, E1)) == 0.0
    assert float(feat_loss(E1, -E1)) == pytest.approx(-4.0)
    assert float(feat_loss(E1, E2)) == pytest.approx(-2.0)


def test_least_similar_label_is_argmin():
    texts = torch.cat([E1, E2, -E1])
    assert least_similar_label(E1, texts).tolist() == [2]
    with pytest.raises(InputContractError):
        least_similar_label(E1, E1)


def test_triplet_loss_examples():
    assert float(triplet_loss(E1, E1, E2, TripletConfig(alpha=1.0))) == pytest.approx(0.0)
    # pull ||e1 - e2||^2 = 2, push max(0, 1 - 0) = 1
    assert float(triplet_loss(E1, E2, E1, TripletConfig(alpha=1.0))) == pytest.approx(3.0)
    assert float(triplet_loss(E1, E2, E1, TripletConfig(alpha=0.0))) == pytest.approx(2.0)


@pytest.mark.parametrize(
    "p, expected",
    [
        (1.0, 10.0),
        (0.1, 1.0 / (0.1 + math.log(10.0))),
        (0.0, 0.0),
    ],
)
def test_cls_loss_reference_values(p, expected):
    probs = torch.tensor([[p, 1.0 - p]])
    got = float(cls_loss(probs, torch.tensor([0]), ClsConfig(sigma=0.1)))
    assert got == pytest.approx(expected, rel=1e-6, abs=1e-12)


def test_cls_loss_from_logits_matches_probability_form():
    logits = torch.randn(6, 4, generator=torch.Generator().manual_seed(0))
    labels = torch.tensor([0, 1, 2, 3, 0, 1])
    assert float(cls_loss_from_logits(logits, labels)) == pytest.approx(
        float(cls_loss(torch.softmax(logits, dim=-1), labels)), rel=1e-5
    )


def test_triplet_loss_gradient_check():
    gen = torch.Generator().manual_seed(1)
    adv = normalize(torch.randn(3, 4, generator=gen, dtype=torch.float64)).requires_grad_(True)
    far = normalize(torch.randn(3, 4, generator=gen, dtype=torch.float64))
    true = normalize(torch.randn(3, 4, generator=gen, dtype=torch.float64))
    assert torch.autograd.gradcheck(lambda a: triplet_loss(a, far, true), (adv,))


def test_objective_report_sums_weighted_terms(tiny_encoder, class_names, tiny_dataset, tiny_generator):
    text = TextFeatureCache(tiny_encoder, class_names).features(DEFAULT_PROMPT)
    batch = tiny_dataset.train
    adv = forward(tiny_generator, batch.images)
    cfg = AttackConfig(temperature=1.0, weights=LossWeights(feat=1.0, tri=0.0, cls=2.0))
    total, report = attack_objective(tiny_encoder, batch.images, adv, batch.labels, text, cfg)
    assert report.tri == 0.0
    assert report.total == pytest.approx(report.feat + report.cls)
    assert float(total) == pytest.approx(report.total, rel=1e-5)


def test_attack_step_updates_generator_only(tiny_encoder, class_names, tiny_dataset, tiny_generator):
    text = TextFeatureCache(tiny_encoder, class_names).features(DEFAULT_PROMPT)
    before_g = [p.clone() for p in tiny_generator.network.parameters()]
    before_s = [p.clone() for p in tiny_encoder.parameters()]
    state, report = attack_step(
        tiny_generator, tiny_encoder, tiny_dataset.train, text, AttackConfig(temperature=1.0)
    )
    assert state.steps == 1
    assert math.isfinite(report.total)
    assert any(not torch.equal(a, b) for a, b in zip(before_g, state.network.parameters()))
    assert all(torch.equal(a, b) for a, b in zip(before_s, tiny_encoder.parameters()))


def test_attack_step_with_zero_lr_leaves_parameters(tiny_encoder, class_names, tiny_dataset):
    from mutualattack.generator import new_generator_state

    state = new_generator_state(lr=0.0, ngf=4, n_blocks=1, seed=0)
    text = TextFeatureCache(tiny_encoder, class_names).features(DEFAULT_PROMPT)
    before = [p.clone() for p in state.network.parameters()]
    attack_step(state, tiny_encoder, tiny_dataset.train, text, AttackConfig(temperature=1.0))
    assert all(torch.equal(a, b) for a, b in zip(before, state.network.parameters()))


def test_attack_step_refuses_non_finite_loss(tiny_encoder, class_names, tiny_dataset, tiny_generator):
    text = TextFeatureCache(tiny_encoder, class_names).features(DEFAULT_PROMPT).clone()
    text[0, 0] = float("nan")
    before = [p.clone() for p in tiny_generator.network.parameters()]
    batch = ImageBatch(tiny_dataset.train.images[:4], tiny_dataset.train.labels[:4])
    with pytest.raises(TrainingDivergenceError):
        attack_step(tiny_generator, tiny_encoder, batch, text, AttackConfig(temperature=1.0))
    assert tiny_generator.steps == 0
    assert all(torch.equal(a, b) for a, b in zip(before, tiny_generator.network.parameters()))


def test_combined_objective_gradient_matches_finite_differences(tiny_encoder, class_names, tiny_dataset):
    import copy

    encoder = copy.deepcopy(tiny_encoder).double()
    text = TextFeatureCache(encoder, class_names).features(DEFAULT_PROMPT)
    clean = tiny_dataset.train.images[:3].double()
    labels = tiny_dataset.train.labels[:3]
    gen = torch.Generator().manual_seed(2)
    cfg = AttackConfig(temperature=1.0)

    for _ in range(10):
        adv = (clean + 0.04 * (2 * torch.rand(clean.shape, generator=gen, dtype=torch.float64) - 1))
        adv.requires_grad_(True)

        def objective(x):
            return attack_objective(encoder, clean, x, labels, text, cfg)[0]

        assert torch.autograd.gradcheck(objective, (adv,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_attack_step_descends_on_the_same_batch(tiny_encoder, class_names, tiny_dataset):
    from mutualattack.generator import new_generator_state

    text = TextFeatureCache(tiny_encoder, class_names).features(DEFAULT_PROMPT)
    batch = tiny_dataset.train
    cfg = AttackConfig(temperature=1.0)
    descended = 0
    for trial in range(50):
        state = new_generator_state(lr=1e-4, ngf=4, n_blocks=1, seed=trial)
        state, before = attack_step(state, tiny_encoder, batch, text, cfg)
        with torch.no_grad():
            _, after = attack_objective(
                tiny_encoder, batch.images, forward(state, batch.images), batch.labels, text, cfg
            )
        descended += after.total <= before.total
    assert descended >= 45
