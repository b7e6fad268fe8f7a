import pytest
import torch
from PIL import Image

from mutualattack.config import config_from_dict
from mutualattack.data import (
    load_adversarial_pairs,
    load_dataset,
    load_manifest,
    load_manifest_dataset,
    make_loader,
    sample_batch,
)
from mutualattack.desk import synthetic_dataset
from mutualattack.errors import ConfigurationError, InputContractError


def save_png(path, value, size=12):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (size, size), (value, value, value)).save(path)


@pytest.fixture
def image_tree(tmp_path):
    root = tmp_path / "images"
    for name, value in [("train/a.png", 0), ("train/b.png", 255), ("val/c.png", 128), ("adv/c.png", 133)]:
        save_png(root / name, value)
    return tmp_path


def write_manifest(directory, body, name="data.yaml"):
    path = directory / name
    path.write_text(body, encoding="utf-8")
    return path


MANIFEST = """\
root: images
name: toy
labels: [cat, dog]
splits:
  train:
    - [train/a.png, 0]
    - [train/b.png, 1]
  val:
    - [val/c.png, 1]
adversarial:
  - [adv/c.png, val/c.png, 1]
"""


def test_manifest_dataset_loads_and_resizes(image_tree):
    splits = load_manifest_dataset(write_manifest(image_tree, MANIFEST), image_size=8, channels=3)
    assert splits.name == "toy"
    assert splits.class_names == ["cat", "dog"]
    assert splits.train.images.shape == (2, 3, 8, 8)
    assert splits.train.labels.tolist() == [0, 1]
    assert float(splits.train.images[0].max()) == 0.0
    assert float(splits.train.images[1].min()) == 1.0
    assert splits.split("val") is splits.val
    with pytest.raises(ConfigurationError, match="unknown split"):
        splits.split("test")


def test_grayscale_loading(image_tree):
    splits = load_manifest_dataset(write_manifest(image_tree, MANIFEST), image_size=8, channels=1)
    assert splits.val.images.shape == (1, 1, 8, 8)


def test_adversarial_pairs(image_tree):
    adv = load_adversarial_pairs(write_manifest(image_tree, MANIFEST), image_size=8, channels=3)
    assert len(adv) == 1
    assert adv.labels.tolist() == [1]
    assert float(adv.max_deviation()[0]) == pytest.approx(5 / 255, abs=1e-6)


def test_missing_image_names_file(image_tree):
    body = MANIFEST.replace("train/b.png", "train/missing.png")
    with pytest.raises(FileNotFoundError, match="missing.png"):
        load_manifest(write_manifest(image_tree, body))


def test_label_out_of_range(image_tree):
    body = MANIFEST.replace("[train/b.png, 1]", "[train/b.png, 2]")
    with pytest.raises(ConfigurationError, match="outside"):
        load_manifest(write_manifest(image_tree, body))


@pytest.mark.parametrize(
    "body, match",
    [
        ("labels: [cat]\nsplits: {train: [[a, 0]], val: [[b, 0]]}\n", "two class names"),
        ("labels: [cat, dog]\nsplits: {train: [[a, 0]]}\n", "val"),
        ("labels: [cat, dog]\nextra: 1\n", "unknown manifest key"),
        ("- just\n- a list\n", "mapping"),
    ],
)
def test_malformed_manifests(tmp_path, body, match):
    with pytest.raises(ConfigurationError, match=match):
        load_manifest(write_manifest(tmp_path, body))


def test_manifest_without_adversarial_pairs(image_tree):
    body = MANIFEST.split("adversarial:")[0]
    with pytest.raises(ConfigurationError, match="no 'adversarial'"):
        load_adversarial_pairs(write_manifest(image_tree, body), image_size=8, channels=3)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest not found"):
        load_manifest(tmp_path / "nope.yaml")


def test_synthetic_dataset_is_seeded():
    a = synthetic_dataset(["x", "y", "z"], per_class=10, image_size=8, seed=3)
    b = synthetic_dataset(["x", "y", "z"], per_class=10, image_size=8, seed=3)
    c = synthetic_dataset(["x", "y", "z"], per_class=10, image_size=8, seed=4)
    assert torch.equal(a.train.images, b.train.images)
    assert not torch.equal(a.train.images, c.train.images)
    assert len(a.val) == 6 and len(a.train) == 24
    assert float(a.train.images.min()) >= 0.0 and float(a.train.images.max()) <= 1.0


def test_load_dataset_falls_back_to_synthetic():
    cfg = config_from_dict(
        {
            "class_names": ["cat", "dog"],
            "synthetic_per_class": 5,
            "image_size": 8,
            "targets": {},
            "group_map": {"surrogate": ["surrogate"]},
        }
    )
    splits = load_dataset(cfg)
    assert splits.class_names == ["cat", "dog"]
    assert splits.train.images.shape[1:] == (3, 8, 8)


def test_loader_order_depends_only_on_seed(tiny_dataset):
    def order(seed):
        return torch.cat([labels for _, labels in make_loader(tiny_dataset.train, 8, seed)]).tolist()

    assert order(1) == order(1)
    assert sorted(order(1)) == sorted(tiny_dataset.train.labels.tolist())


def test_sample_batch(tiny_dataset):
    batch = sample_batch(tiny_dataset.train, 5, seed=0)
    assert len(batch) == 5
    assert torch.equal(batch.images, sample_batch(tiny_dataset.train, 5, seed=0).images)
    assert len(sample_batch(tiny_dataset.train, 1000, seed=0)) == len(tiny_dataset.train)
    with pytest.raises(InputContractError):
        sample_batch(tiny_dataset.train.subset(torch.tensor([], dtype=torch.long)), 3, seed=0)
