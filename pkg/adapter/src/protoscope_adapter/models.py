"""Toy part-prototype torch models plus a synthetic dataset to train them on.

Three architectures cover the three classifier-head families the engine
understands:

* ``ClassSpecificProtoNet`` — every prototype is owned by one class and the
  head is a dense map from prototype scores to class logits.
* ``SharedSlotProtoNet``   — classes hold slots, each slot mixes all
  prototypes through a per-slot assignment distribution over focal scores.
* ``IndirectProtoNet``     — feature channels are the prototypes; per-cell
  softmax produces presence maps and a non-negative head combines the
  max-pooled presences log-quadratically.

The dataset is deliberately trivial (one colored square per class on a dim
noisy background) so a few hundred full-batch steps reach 100% training
accuracy on CPU in well under a second.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .interchange import AdapterError

MODEL_KINDS = ("explicit-class-specific", "explicit-shared", "indirect")

BLOB_COLORS = (
    (0.90, 0.10, 0.10),
    (0.10, 0.80, 0.15),
    (0.15, 0.20, 0.90),
    (0.85, 0.80, 0.10),
    (0.80, 0.15, 0.80),
    (0.10, 0.80, 0.80),
)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class BlobDataset:
    """Square-blob images with per-sample masks and blob-center landmarks."""

    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: list[int]
    masks: np.ndarray  # (N, H, W) float32, 1 inside the blob
    centers: list[tuple[int, int]]  # (row, col) of each blob center

    @property
    def torch_images(self) -> torch.Tensor:
        return torch.from_numpy(self.images).permute(0, 3, 1, 2).contiguous()

    def __len__(self) -> int:
        return len(self.labels)


def make_blob_dataset(
    class_count: int,
    per_class: int,
    *,
    seed: int = 0,
    size: int = 16,
    blob: int = 6,
) -> BlobDataset:
    """Generate ``class_count * per_class`` images, one colored blob each."""
    if class_count < 2 or class_count > len(BLOB_COLORS):
        raise AdapterError(f"class_count must be in 2..{len(BLOB_COLORS)}, got {class_count}")
    rng = np.random.default_rng(seed)
    images, labels, masks, centers = [], [], [], []
    for klass in range(class_count):
        color = np.asarray(BLOB_COLORS[klass], dtype=np.float64)
        for _ in range(per_class):
            img = rng.uniform(0.0, 0.25, size=(size, size, 3))
            row = int(rng.integers(1, size - blob))
            col = int(rng.integers(1, size - blob))
            jitter = rng.uniform(-0.08, 0.08, size=3)
            img[row : row + blob, col : col + blob, :] = np.clip(color + jitter, 0.0, 1.0)
            mask = np.zeros((size, size), dtype=np.float32)
            mask[row : row + blob, col : col + blob] = 1.0
            images.append(img.astype(np.float32))
            labels.append(klass)
            masks.append(mask)
            centers.append((row + blob // 2, col + blob // 2))
    return BlobDataset(
        images=np.stack(images),
        labels=labels,
        masks=np.stack(masks),
        centers=centers,
    )


# ---------------------------------------------------------------------------
# Architectures


class TinyBackbone(nn.Module):
    """Two stride-2 convolutions: (B, 3, 16, 16) -> (B, depth, 4, 4)."""

    def __init__(self, depth: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 12, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(12, depth, kernel_size=3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv2(F.relu(self.conv1(x))))


def log_ratio_similarity(
    features: torch.Tensor, prototypes: torch.Tensor, epsilon: float
) -> torch.Tensor:
    """Per-cell log((d2+1)/(d2+eps)) maps: (B, D, H, W) x (n, D) -> (B, n, H, W)."""
    b, d, h, w = features.shape
    n = prototypes.shape[0]
    flat = features.permute(0, 2, 3, 1).reshape(b, h * w, 1, d)
    diff = flat - prototypes.view(1, 1, n, d)
    d2 = (diff * diff).sum(dim=-1)  # (B, HW, n)
    sim = torch.log((d2 + 1.0) / (d2 + epsilon))
    return sim.permute(0, 2, 1).reshape(b, n, h, w)


class ClassSpecificProtoNet(nn.Module):
    """Prototype-per-class model: logits = W @ max-pooled similarity scores."""

    kind = "explicit-class-specific"

    def __init__(
        self,
        class_count: int,
        *,
        per_class_prototypes: int = 2,
        depth: int = 8,
        epsilon: float = 1e-4,
    ):
        super().__init__()
        self.class_count = class_count
        self.epsilon = float(epsilon)
        self.backbone = TinyBackbone(depth)
        n = class_count * per_class_prototypes
        self.prototypes = nn.Parameter(torch.randn(n, depth) * 0.3)
        owner = torch.arange(class_count).repeat_interleave(per_class_prototypes)
        self.register_buffer("class_of_prototype", owner)
        weight = torch.full((class_count, n), -0.5)
        weight[owner.unsqueeze(0) == torch.arange(class_count).unsqueeze(1)] = 1.0
        self.weight = nn.Parameter(weight)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        sim = log_ratio_similarity(self.features(x), self.prototypes, self.epsilon)
        scores = sim.amax(dim=(2, 3))
        return scores @ self.weight.T

    def head_tensors(self) -> dict[str, np.ndarray]:
        return {
            "classifier_weights": self.weight.detach().numpy(),
            "prototypes": self.prototypes.detach().numpy(),
            "class_of_prototype": self.class_of_prototype.numpy(),
        }


class SharedSlotProtoNet(nn.Module):
    """Shared-prototype model: per-class slots mix focal scores of all prototypes."""

    kind = "explicit-shared"

    def __init__(
        self,
        class_count: int,
        *,
        slots: int = 2,
        prototype_count: int = 6,
        depth: int = 8,
        epsilon: float = 1e-4,
    ):
        super().__init__()
        self.class_count = class_count
        self.epsilon = float(epsilon)
        self.backbone = TinyBackbone(depth)
        self.prototypes = nn.Parameter(torch.randn(prototype_count, depth) * 0.3)
        # Start each class's slots leaning toward the prototypes the warm
        # start will anchor to that class (owner pattern: prototype m serves
        # class m mod K); training refines the assignment from there.
        owner = torch.arange(prototype_count) % class_count
        bias = 1.5 * (owner.view(1, 1, -1) == torch.arange(class_count).view(-1, 1, 1)).float()
        self.slot_logits = nn.Parameter(bias + torch.randn(class_count, slots, prototype_count) * 0.1)
        self.weight = nn.Parameter(torch.ones(class_count, slots))

    def slot_assignment(self) -> torch.Tensor:
        return torch.softmax(self.slot_logits, dim=2)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        sim = log_ratio_similarity(self.features(x), self.prototypes, self.epsilon)
        focal = sim.amax(dim=(2, 3)) - sim.mean(dim=(2, 3))  # (B, n)
        slot_scores = torch.einsum("klm,bm->bkl", self.slot_assignment(), focal)
        return (slot_scores * self.weight).sum(dim=-1)

    def head_tensors(self) -> dict[str, np.ndarray]:
        return {
            "classifier_weights": self.weight.detach().numpy(),
            "prototypes": self.prototypes.detach().numpy(),
            "slot_assignment": self.slot_assignment().detach().numpy(),
        }


class IndirectProtoNet(nn.Module):
    """Channels-as-prototypes model with a non-negative log-quadratic head."""

    kind = "indirect"

    def __init__(self, class_count: int, *, prototype_count: int = 8, epsilon: float = 1e-4):
        super().__init__()
        self.class_count = class_count
        self.epsilon = float(epsilon)
        self.backbone = TinyBackbone(prototype_count)
        self.raw_weight = nn.Parameter(torch.zeros(class_count, prototype_count))

    def weight(self) -> torch.Tensor:
        return F.softplus(self.raw_weight)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        maps = torch.softmax(self.features(x), dim=1)
        scores = maps.amax(dim=(2, 3))  # (B, n)
        scaled = scores.unsqueeze(1) * self.weight().unsqueeze(0)  # (B, K, n)
        return torch.log(scaled * scaled + 1.0).sum(dim=-1)

    def head_tensors(self) -> dict[str, np.ndarray]:
        return {"classifier_weights": self.weight().detach().numpy()}


# ---------------------------------------------------------------------------
# Construction, training, persistence


def build_model(kind: str, class_count: int, *, seed: int = 0, **kwargs) -> nn.Module:
    """Instantiate one of the three architectures with seeded initialization."""
    torch.manual_seed(seed)
    if kind == "explicit-class-specific":
        return ClassSpecificProtoNet(class_count, **kwargs)
    if kind == "explicit-shared":
        return SharedSlotProtoNet(class_count, **kwargs)
    if kind == "indirect":
        return IndirectProtoNet(class_count, **kwargs)
    raise AdapterError(f"unknown architecture kind '{kind}' (expected one of {MODEL_KINDS})")


def warm_start_prototypes(model: nn.Module, images: torch.Tensor, labels: list[int]) -> None:
    """Anchor each prototype to the strongest feature cell of a class image.

    Distance-based heads barely move when prototypes start far from the
    feature manifold (all similarities flatten toward zero); copying real
    feature vectors in gives every prototype a live gradient from step one.
    """
    prototypes = getattr(model, "prototypes", None)
    if prototypes is None:
        return
    with torch.no_grad():
        feats = model.backbone(images)  # (N, D, h, w)
        norms = feats.square().sum(dim=1)  # (N, h, w)
        by_class: dict[int, list[int]] = {}
        for idx, label in enumerate(labels):
            by_class.setdefault(int(label), []).append(idx)
        classes = sorted(by_class)
        for m in range(prototypes.shape[0]):
            if model.kind == "explicit-class-specific":
                klass = int(model.class_of_prototype[m])
            else:
                klass = classes[m % len(classes)]
            pool = by_class[klass]
            img = pool[(m // len(classes)) % len(pool)]
            cell = int(norms[img].flatten().argmax())
            row, col = divmod(cell, norms.shape[2])
            prototypes[m] = feats[img, :, row, col]


def train_model(
    model: nn.Module,
    images: torch.Tensor,
    labels: list[int],
    *,
    steps: int = 200,
    lr: float = 0.01,
    seed: int = 0,
) -> float:
    """Full-batch cross-entropy training; returns final training accuracy.

    Prototypes get a 10x smaller learning rate: near a warm-started
    prototype the similarity gradient scales like 1/epsilon, and full-rate
    steps would fling it straight off the feature manifold.
    """
    torch.manual_seed(seed)
    warm_start_prototypes(model, images, labels)
    target = torch.as_tensor(labels, dtype=torch.long)
    groups = [{"params": [p for n, p in model.named_parameters() if n != "prototypes"], "lr": lr}]
    if getattr(model, "prototypes", None) is not None:
        groups.append({"params": [model.prototypes], "lr": lr * 0.1})
    optimizer = torch.optim.Adam(groups)
    model.train()
    for _ in range(steps):
        optimizer.zero_grad()
        loss = F.cross_entropy(model(images), target)
        loss.backward()
        optimizer.step()
    model.eval()
    with torch.no_grad():
        accuracy = (model(images).argmax(dim=1) == target).float().mean().item()
    return accuracy


def save_checkpoint(model: nn.Module, path: Path | str) -> None:
    """Persist architecture kind, constructor arguments, and weights."""
    spec: dict = {"kind": model.kind, "class_count": model.class_count, "epsilon": model.epsilon}
    if isinstance(model, ClassSpecificProtoNet):
        spec["per_class_prototypes"] = model.prototypes.shape[0] // model.class_count
        spec["depth"] = model.prototypes.shape[1]
    elif isinstance(model, SharedSlotProtoNet):
        spec["slots"] = model.weight.shape[1]
        spec["prototype_count"] = model.prototypes.shape[0]
        spec["depth"] = model.prototypes.shape[1]
    elif isinstance(model, IndirectProtoNet):
        spec["prototype_count"] = model.raw_weight.shape[1]
    else:
        raise AdapterError(f"cannot checkpoint unknown model type {type(model).__name__}")
    torch.save({"spec": spec, "state_dict": model.state_dict()}, str(path))


def load_checkpoint(path: Path | str) -> nn.Module:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`."""
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise AdapterError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "spec" not in payload or "state_dict" not in payload:
        raise AdapterError(f"checkpoint {path} missing spec/state_dict")
    spec = dict(payload["spec"])
    kind = spec.pop("kind")
    class_count = spec.pop("class_count")
    model = build_model(kind, class_count, **spec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
