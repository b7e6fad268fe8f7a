import pytest
import torch

from mutualattack.errors import ConfigurationError, InputContractError
from mutualattack.generator import (
    adversarial_batch,
    bound,
    forward,
    generate_raw,
    load_generator,
    new_generator_state,
    save_generator,
)


def test_bound_examples():
    clean = torch.tensor([0.5, 0.98, 0.01])
    raw = torch.tensor([0.9, 1.5, -0.3])
    out = bound(raw, clean, 0.04)
    assert out.tolist() == pytest.approx([0.54, 1.0, 0.0])


def test_bound_keeps_values_inside_the_box():
    clean = torch.tensor([0.5])
    assert bound(torch.tensor([0.52]), clean, 0.04).item() == pytest.approx(0.52)


def test_bound_with_zero_epsilon_returns_clean():
    clean = torch.rand(2, 3, 4, 4)
    assert torch.equal(bound(clean + 1.0, clean, 0.0), clean)


def test_bound_rejects_negative_epsilon_and_shape_mismatch():
    with pytest.raises(ConfigurationError):
        bound(torch.zeros(1), torch.zeros(1), -0.1)
    with pytest.raises(InputContractError):
        bound(torch.zeros(2), torch.zeros(3), 0.1)


def test_bound_holds_on_random_cases():
    gen = torch.Generator().manual_seed(0)
    for _ in range(200):
        clean = torch.rand(1, 3, 4, 4, generator=gen)
        raw = clean + torch.randn(1, 3, 4, 4, generator=gen)
        out = bound(raw, clean, 0.04)
        assert float((out - clean).abs().max()) <= 0.04 + 1e-6
        assert 0.0 <= float(out.min()) and float(out.max()) <= 1.0


def test_forward_respects_budget(tiny_generator):
    images = torch.rand(4, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    out = forward(tiny_generator, images)
    assert out.shape == images.shape
    assert float((out - images).abs().max()) <= tiny_generator.epsilon + 1e-6


def test_zero_initialized_head_is_identity():
    state = new_generator_state(ngf=4, n_blocks=1, seed=0, zero_init_head=True)
    images = torch.rand(2, 3, 8, 8)
    assert torch.equal(forward(state, images), images)


def test_generate_raw_input_contract(tiny_generator):
    with pytest.raises(InputContractError):
        generate_raw(tiny_generator, torch.rand(1, 1, 8, 8))
    with pytest.raises(InputContractError, match="stride"):
        generate_raw(tiny_generator, torch.rand(1, 3, 10, 10))


def test_generator_state_requires_positive_epsilon():
    with pytest.raises(ConfigurationError):
        new_generator_state(epsilon=0.0, ngf=4, n_blocks=1)


def test_checkpoint_round_trip_reproduces_outputs(tiny_generator, tiny_dataset, tmp_path):
    tiny_generator.ensure_optimizer()
    tiny_generator.iteration = 3
    path = save_generator(tiny_generator, tmp_path / "checkpoints" / "generator_iter03.pt")
    loaded = load_generator(path)
    assert loaded.iteration == 3
    assert loaded.epsilon == tiny_generator.epsilon
    assert loaded.optimizer is not None
    held_out = tiny_dataset.val
    assert torch.equal(
        adversarial_batch(loaded, held_out).adversarial, adversarial_batch(tiny_generator, held_out).adversarial
    )


def test_frozen_copy_is_independent(tiny_generator):
    snapshot = tiny_generator.frozen_copy()
    with torch.no_grad():
        for p in tiny_generator.network.parameters():
            p.add_(1.0)
    for frozen, live in zip(snapshot.network.parameters(), tiny_generator.network.parameters()):
        assert not torch.equal(frozen, live)
        assert not frozen.requires_grad
    assert snapshot.optimizer is None


def test_forward_gradient_wrt_parameters_matches_central_differences(tiny_dataset):
    # scale < 1 keeps the epsilon clamp inactive, interior pixels keep the [0, 1] clamp inactive
    state = new_generator_state(ngf=4, n_blocks=1, scale=0.5, seed=0)
    state.network.double()
    images = 0.25 + 0.5 * tiny_dataset.train.images[:2].double()
    weights = torch.randn(images.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    param = state.network.head[1].weight

    def objective():
        return (forward(state, images) * weights).sum()

    state.network.zero_grad()
    objective().backward()
    grad = param.grad.clone()

    gen = torch.Generator().manual_seed(1)
    h = 1e-6
    for _ in range(10):
        direction = torch.randn(param.shape, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            param.add_(h * direction)
            plus = float(objective())
            param.sub_(2 * h * direction)
            minus = float(objective())
            param.add_(h * direction)
        numeric = (plus - minus) / (2 * h)
        analytic = float((grad * direction).sum())
        assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic), 1e-6)


def test_bound_is_idempotent():
    gen = torch.Generator().manual_seed(3)
    for _ in range(1000):
        clean = torch.rand(1, 3, 4, 4, generator=gen)
        raw = clean + 0.2 * torch.randn(1, 3, 4, 4, generator=gen)
        once = bound(raw, clean, 0.04)
        assert torch.equal(bound(once, clean, 0.04), once)


def test_forward_on_a_batch_equals_forward_per_sample(tiny_generator):
    images = torch.rand(5, 3, 8, 8, generator=torch.Generator().manual_seed(4))
    batched = forward(tiny_generator, images)
    single = torch.cat([forward(tiny_generator, images[i : i + 1]) for i in range(len(images))])
    assert torch.allclose(batched, single, atol=1e-6)


def test_generate_raw_is_finite_on_random_images(tiny_generator):
    images = torch.rand(100, 3, 8, 8, generator=torch.Generator().manual_seed(5))
    assert bool(torch.isfinite(generate_raw(tiny_generator, images)).all())
