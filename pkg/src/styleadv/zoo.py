"""Toy classifier zoo: three small convolutional families, deterministic
training, accuracy bookkeeping and checkpoint persistence.

These models stand in for large pretrained classifiers so transfer
experiments run on a desktop. Members carry role tags (surrogate / target /
ensemble-member) used by the evaluation harness.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (ClassifierHandle, ConfigError, Tensor, TrainingFailure,
                   state_dict_digest)

log = logging.getLogger(__name__)

ARCH_FAMILIES = ("plain", "resnet", "incept")


class PlainCNN(nn.Module):
    """Three conv/pool stages without normalization layers.

    All families classify from a flattened coarse 4x4 grid rather than a
    global average: the class signal in the glyph data is purely geometric
    (colors are random), so spatial layout must reach the classifier.
    """

    def __init__(self, width: int = 16, num_classes: int = 10):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.ReLU(),
            nn.AdaptiveMaxPool2d(4),
        )
        self.head = nn.Linear(4 * w * 16, num_classes)

    def forward(self, x):
        x = (x - 0.5) / 0.5
        return self.head(self.features(x).flatten(1))


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(x + h)


class ToyResNet(nn.Module):
    """Small residual network with batch normalization."""

    def __init__(self, width: int = 16, num_classes: int = 10):
        super().__init__()
        w = width
        self.stem = nn.Sequential(nn.Conv2d(3, w, 3, padding=1),
                                  nn.BatchNorm2d(w), nn.ReLU())
        self.block1 = _ResBlock(w)
        self.down = nn.Sequential(nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
                                  nn.BatchNorm2d(2 * w), nn.ReLU())
        self.block2 = _ResBlock(2 * w)
        self.head = nn.Linear(2 * w * 16, num_classes)

    def forward(self, x):
        x = (x - 0.5) / 0.5
        h = self.block2(self.down(self.block1(self.stem(x))))
        return self.head(F.adaptive_max_pool2d(h, 4).flatten(1))


class _MixedBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        b = out_ch // 4
        self.b1 = nn.Conv2d(in_ch, b, 1)
        self.b3 = nn.Conv2d(in_ch, b, 3, padding=1)
        self.b5 = nn.Conv2d(in_ch, b, 5, padding=2)
        self.bp = nn.Conv2d(in_ch, out_ch - 3 * b, 1)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        pooled = F.max_pool2d(x, 3, stride=1, padding=1)
        h = torch.cat([self.b1(x), self.b3(x), self.b5(x), self.bp(pooled)], dim=1)
        return F.relu(self.bn(h))


class ToyInception(nn.Module):
    """Parallel multi-kernel branches, loosely inception-flavored."""

    def __init__(self, width: int = 16, num_classes: int = 10):
        super().__init__()
        w = width
        self.stem = nn.Sequential(nn.Conv2d(3, w, 3, padding=1), nn.ReLU())
        self.mix1 = _MixedBlock(w, 2 * w)
        self.mix2 = _MixedBlock(2 * w, 4 * w)
        self.head = nn.Linear(4 * w * 16, num_classes)

    def forward(self, x):
        x = (x - 0.5) / 0.5
        h = F.max_pool2d(self.mix1(self.stem(x)), 2)
        h = F.max_pool2d(self.mix2(h), 2)
        return self.head(F.adaptive_max_pool2d(h, 4).flatten(1))


def build_arch(family: str, width: int, num_classes: int) -> nn.Module:
    if family == "plain":
        return PlainCNN(width, num_classes)
    if family == "resnet":
        return ToyResNet(width, num_classes)
    if family == "incept":
        return ToyInception(width, num_classes)
    raise ConfigError(f"unknown architecture family {family!r}; "
                      f"choose from {ARCH_FAMILIES}")


def train_classifier(images: Tensor, labels: Tensor, *, family: str,
                     width: int = 16, num_classes: int = 10, seed: int = 0,
                     epochs: int = 8, batch_size: int = 64,
                     lr: float = 1e-3) -> nn.Module:
    """Train one toy classifier; fully determined by the seed."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = build_arch(family, width, num_classes)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = len(images)
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            xb = images[idx].permute(0, 3, 1, 2)
            yb = labels[idx]
            opt.zero_grad()
            loss = F.cross_entropy(model(xb), yb)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.debug("train %s seed=%d epoch %d loss %.4f", family, seed, epoch, total / n)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@dataclass
class ZooMember:
    handle: ClassifierHandle
    family: str
    seed: int
    test_accuracy: float
    roles: tuple[str, ...] = ()


class ModelZoo:
    """Named classifiers with role tags and recorded clean accuracies."""

    def __init__(self, members: dict[str, ZooMember]):
        if len({m.family for m in members.values()}) < 2:
            raise ConfigError("a zoo needs at least 2 distinct architecture families")
        counts = {m.handle.class_count for m in members.values()}
        if len(counts) != 1:
            raise ConfigError(f"zoo members disagree on class count: {counts}")
        self.members = dict(members)
        self.class_count = counts.pop()

    def __contains__(self, name):
        return name in self.members

    def __len__(self):
        return len(self.members)

    @property
    def names(self) -> list[str]:
        return list(self.members)

    def member(self, name: str) -> ZooMember:
        if name not in self.members:
            raise ConfigError(f"model {name!r} not in zoo (have {self.names})")
        return self.members[name]

    def handle(self, name: str) -> ClassifierHandle:
        return self.member(name).handle

    def with_role(self, role: str) -> list[str]:
        return [n for n, m in self.members.items() if role in m.roles]

    def accuracy_table(self) -> dict[str, float]:
        return {n: m.test_accuracy for n, m in self.members.items()}


# name -> (family, width, seed, roles); the first three entries form the
# fine-tuning ensemble, the last three are held-out transfer targets
DEFAULT_ZOO_SPEC = {
    "plain_a": ("plain", 16, 10, ("surrogate", "ensemble-member")),
    "plain_b": ("plain", 16, 11, ("ensemble-member",)),
    "res_a": ("resnet", 16, 12, ("ensemble-member",)),
    "res_b": ("resnet", 16, 13, ("target",)),
    "incept_a": ("incept", 16, 14, ("target",)),
    "incept_b": ("incept", 16, 15, ("target",)),
}


def train_toy_classifiers(dataset, arch_specs: dict | None = None, *,
                          epochs: int = 8, accuracy_floor: float = 0.70,
                          num_classes: int | None = None) -> ModelZoo:
    """Train the zoo and verify every member clears the accuracy floor.

    ``arch_specs`` maps name -> (family, width, seed, roles); defaults to
    three families x two seeds.
    """
    specs = dict(arch_specs) if arch_specs else dict(DEFAULT_ZOO_SPEC)
    if len({fam for fam, *_ in specs.values()}) < 2:
        raise ConfigError("zoo spec needs at least 2 architecture families")
    k = num_classes if num_classes is not None else int(dataset.train_labels.max()) + 1
    members = {}
    for name, (family, width, seed, roles) in specs.items():
        model = train_classifier(dataset.train_images, dataset.train_labels,
                                 family=family, width=width, num_classes=k,
                                 seed=seed, epochs=epochs)
        handle = ClassifierHandle(model, class_count=k, name=name)
        acc = handle.accuracy(dataset.test_images, dataset.test_labels)
        log.info("zoo member %s (%s, seed %d): test accuracy %.3f", name, family, seed, acc)
        if acc < accuracy_floor:
            raise TrainingFailure(
                f"model {name} ({family}, width {width}, seed {seed}) reached "
                f"test accuracy {acc:.3f} < floor {accuracy_floor:.2f} after "
                f"{epochs} epochs on {len(dataset.train_images)} images")
        members[name] = ZooMember(handle, family, seed, acc, tuple(roles))
    return ModelZoo(members)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

ZOO_FORMAT_VERSION = 1


def save_zoo(zoo: ModelZoo, directory) -> dict:
    """Write per-member checkpoints plus a manifest; returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": ZOO_FORMAT_VERSION,
                "class_count": zoo.class_count, "members": {}}
    for name, m in zoo.members.items():
        fname = f"{name}.pt"
        width = _infer_width(m.handle.model)
        torch.save({"format_version": ZOO_FORMAT_VERSION, "family": m.family,
                    "width": width, "num_classes": zoo.class_count,
                    "seed": m.seed, "test_accuracy": m.test_accuracy,
                    "roles": list(m.roles),
                    "state": m.handle.model.state_dict()}, directory / fname)
        manifest["members"][name] = {
            "file": fname, "family": m.family, "seed": m.seed,
            "test_accuracy": m.test_accuracy, "roles": list(m.roles),
            "checksum": m.handle.checksum,
        }
    with open(directory / "zoo_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _infer_width(model: nn.Module) -> int:
    for mod in model.modules():
        if isinstance(mod, nn.Conv2d):
            return mod.out_channels
    raise ConfigError("model has no convolution layers")


def load_zoo(directory) -> ModelZoo:
    directory = Path(directory)
    manifest_path = directory / "zoo_manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no zoo manifest at {manifest_path}; run zoo training first")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    members = {}
    for name, meta in manifest["members"].items():
        blob = torch.load(directory / meta["file"], weights_only=True)
        model = build_arch(blob["family"], blob["width"], blob["num_classes"])
        model.load_state_dict(blob["state"])
        model.eval()
        handle = ClassifierHandle(model, class_count=blob["num_classes"], name=name)
        if handle.checksum != meta["checksum"]:
            raise ConfigError(f"checksum mismatch for zoo member {name}; "
                              f"checkpoint does not match the manifest")
        members[name] = ZooMember(handle, blob["family"], blob["seed"],
                                  blob["test_accuracy"], tuple(blob.get("roles", ())))
    return ModelZoo(members)
