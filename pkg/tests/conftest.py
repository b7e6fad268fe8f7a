import os
from pathlib import Path

import pytest
import torch

from mutualattack import registry
from mutualattack.data import DatasetSplits
from mutualattack.defense.candidates import StaticSynonymProvider
from mutualattack.defense.prompts import DEFAULT_PROMPT
from mutualattack.desk import desk_vocabulary, synthetic_dataset
from mutualattack.encoders.tiny import TinyDualEncoder
from mutualattack.generator import adversarial_batch, new_generator_state
from mutualattack.models import AdversarialBatch

CLASSES = ["cat", "dog", "ship", "truck"]


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    # Put goldens next to the tests
    return Path(__file__).parent / "golden"


def _read_text(path: Path) -> str:
    # Normalize newlines so tests are stable on Windows/macOS/Linux
    return path.read_text(encoding="utf-8").replace("\r\n", "\n")


@pytest.fixture
def assert_matches_golden(golden_dir: Path):
    """
    Usage: assert_matches_golden(actual_text, "file.csv")
    If UPDATE_GOLDEN=1 is set in env, rewrite the golden.
    """

    def _inner(actual: str, golden_name: str):
        golden_path = golden_dir / golden_name
        actual_norm = actual.replace("\r\n", "\n")

        if os.getenv("UPDATE_GOLDEN") == "1":
            golden_path.parent.mkdir(parents=True, exist_ok=True)
            golden_path.write_text(actual_norm, encoding="utf-8")
            expected = _read_text(golden_path)
            assert actual_norm == expected, f"rewrote {golden_name}, but mismatch remains"
        else:
            assert golden_path.exists(), f"Golden file missing: {golden_path}"
            expected = _read_text(golden_path)
            assert actual_norm == expected, (
                f"Golden mismatch for {golden_name}.\n"
                f"--- EXPECTED ({golden_name}) ---\n{expected}\n"
                f"--- ACTUAL ---\n{actual_norm}\n"
                f"Tip: set UPDATE_GOLDEN=1 to accept changes."
            )

    return _inner


@pytest.fixture(autouse=True)
def clean_registry():
    """Drop runtime registrations so tests don't leak components."""
    registry.reset_registry()
    yield
    registry.reset_registry()


@pytest.fixture(autouse=True)
def no_env_overrides(monkeypatch):
    monkeypatch.delenv("MUTUALATTACK_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("MUTUALATTACK_DEVICE", raising=False)


@pytest.fixture
def class_names() -> list[str]:
    return list(CLASSES)


@pytest.fixture
def provider() -> StaticSynonymProvider:
    return StaticSynonymProvider()


@pytest.fixture
def tiny_encoder(provider) -> TinyDualEncoder:
    torch.manual_seed(0)
    encoder = TinyDualEncoder(desk_vocabulary(CLASSES, DEFAULT_PROMPT, provider), image_size=8)
    return encoder.freeze()


@pytest.fixture
def tiny_dataset() -> DatasetSplits:
    return synthetic_dataset(CLASSES, per_class=10, image_size=8, val_fraction=0.2, seed=0)


@pytest.fixture
def tiny_generator():
    return new_generator_state(epsilon=0.04, lr=1e-3, ngf=4, n_blocks=1, seed=0)


@pytest.fixture
def adv_batch(tiny_dataset, tiny_generator) -> AdversarialBatch:
    return adversarial_batch(tiny_generator, tiny_dataset.train)
