"""Prototype-based episode classification.

Images are embedded by a convolutional backbone; each class prototype is
the mean of its support embeddings; queries get logits equal to the
negative squared euclidean distance to each prototype, and the episode
loss is the mean cross entropy of those logits against the query labels.
"""

import os
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import PreprocessConfig
from .episodes import Episode

CHECKPOINT_VERSION = 1

BACKBONE_DESCRIPTORS = ("conv4", "resnet18", "resnet18-random")


def conv_block(in_channels, out_channels):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


class Conv4(nn.Module):
    """From-scratch 4-block conv embedding, globally pooled to 64-d."""

    out_dim = 64

    def __init__(self, in_channels=3, hidden=64):
        super().__init__()
        self.blocks = nn.Sequential(
            conv_block(in_channels, hidden),
            conv_block(hidden, hidden),
            conv_block(hidden, hidden),
            conv_block(hidden, hidden),
        )

    def forward(self, x):
        z = self.blocks(x)
        return F.adaptive_avg_pool2d(z, 1).flatten(1)


class ResNet18Trunk(nn.Module):
    """torchvision resnet18 with the classifier removed, 512-d output."""

    out_dim = 512

    def __init__(self, pretrained=True):
        super().__init__()
        from torchvision.models import resnet18

        if pretrained:
            from torchvision.models import ResNet18_Weights

            try:
                net = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
            except Exception as e:
                raise RuntimeError(
                    "could not load pretrained resnet18 weights (download failed?); "
                    "use the 'conv4' or 'resnet18-random' backbone for offline runs"
                ) from e
        else:
            net = resnet18(weights=None)
        net.fc = nn.Identity()
        self.trunk = net

    def forward(self, x):
        return self.trunk(x)


def build_backbone(descriptor: str) -> nn.Module:
    """Instantiate an embedding backbone from its descriptor string."""
    if descriptor == "conv4":
        return Conv4()
    if descriptor == "resnet18":
        return ResNet18Trunk(pretrained=True)
    if descriptor == "resnet18-random":
        return ResNet18Trunk(pretrained=False)
    raise ValueError(f"unknown backbone descriptor {descriptor!r}, expected one of {BACKBONE_DESCRIPTORS}")


class ProtoNet(nn.Module):
    """Embedding backbone plus the prototype classification head."""

    def __init__(self, backbone: nn.Module, descriptor: str):
        super().__init__()
        self.backbone = backbone
        self.descriptor = descriptor
        self.out_dim = backbone.out_dim

    @classmethod
    def from_descriptor(cls, descriptor: str) -> "ProtoNet":
        return cls(build_backbone(descriptor), descriptor)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Map a batch of (B, 3, H, W) images to (B, D) embeddings."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) image batch, got shape {tuple(images.shape)}")
        if images.shape[0] == 0:
            return images.new_zeros((0, self.out_dim))
        return self.backbone(images)

    forward = embed


def compute_prototypes(
    support_embeddings: torch.Tensor, local_labels, way: int
) -> torch.Tensor:
    """Per-class means of the support embeddings, ordered by local class.

    Every class 0..way-1 must appear the same number of times (= shot).
    """
    labels = torch.as_tensor(local_labels, dtype=torch.long, device=support_embeddings.device)
    if labels.ndim != 1 or labels.shape[0] != support_embeddings.shape[0]:
        raise ValueError(
            f"labels shape {tuple(labels.shape)} does not match "
            f"{support_embeddings.shape[0]} support embeddings"
        )
    counts = torch.bincount(labels, minlength=way)
    if labels.numel() and (labels.min() < 0 or labels.max() >= way):
        raise ValueError(f"local labels outside 0..{way - 1}")
    if (counts == 0).any():
        raise ValueError(f"missing class: no support embeddings for classes {torch.nonzero(counts == 0).flatten().tolist()}")
    if len(set(counts.tolist())) != 1:
        raise ValueError(f"unequal per-class support counts {counts.tolist()}")
    return torch.stack([support_embeddings[labels == k].mean(dim=0) for k in range(way)])


def squared_distances(queries: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Pairwise squared euclidean distances, (Q, D) x (W, D) -> (Q, W)."""
    if queries.shape[-1] != prototypes.shape[-1]:
        raise ValueError(
            f"dimension mismatch: queries D={queries.shape[-1]}, prototypes D={prototypes.shape[-1]}"
        )
    q = queries.unsqueeze(1)  # Q x 1 x D
    p = prototypes.unsqueeze(0)  # 1 x W x D
    return ((q - p) ** 2).sum(dim=2)


class Classification(NamedTuple):
    logits: torch.Tensor  # Q x W, negative squared distance
    predictions: torch.Tensor  # Q, argmin distance (ties -> smallest class)
    probabilities: torch.Tensor  # Q x W softmax rows


def classify(distances: torch.Tensor) -> Classification:
    """Nearest-prototype decision with softmax confidence over -distance."""
    logits = -distances
    # torch.argmin returns the first minimal index, i.e. the smallest class on ties
    predictions = torch.argmin(distances, dim=1)
    probabilities = F.softmax(logits, dim=1)
    return Classification(logits=logits, predictions=predictions, probabilities=probabilities)


def episode_loss(logits: torch.Tensor, true_local_labels) -> torch.Tensor:
    """Mean cross entropy of query logits against their local labels."""
    labels = torch.as_tensor(true_local_labels, dtype=torch.long, device=logits.device)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels outside 0..{logits.shape[1] - 1}: {labels.tolist()}")
    return F.cross_entropy(logits, labels)


def episode_tensors(ep: Episode, device="cpu"):
    """Stack an Episode into (support_x, support_y, query_x, query_y)."""
    sx = torch.from_numpy(np.stack([g.pixels for g, _ in ep.support])).to(device)
    sy = torch.tensor([local for _, local in ep.support], dtype=torch.long, device=device)
    qx = torch.from_numpy(np.stack([g.pixels for g, _ in ep.query])).to(device)
    qy = torch.tensor([local for _, local in ep.query], dtype=torch.long, device=device)
    return sx, sy, qx, qy


def forward_episode(model: ProtoNet, ep: Episode, device="cpu"):
    """Embed support and query in one batch; return (loss, result, query_y).

    One batch keeps batch-norm statistics identical for support and
    query images of the same episode.
    """
    sx, sy, qx, qy = episode_tensors(ep, device)
    z = model.embed(torch.cat([sx, qx]))
    z_support, z_query = z[: len(sx)], z[len(sx) :]
    prototypes = compute_prototypes(z_support, sy, ep.spec.way)
    distances = squared_distances(z_query, prototypes)
    result = classify(distances)
    loss = episode_loss(result.logits, qy)
    return loss, result, qy


def save_checkpoint(model: ProtoNet, path, preprocess: PreprocessConfig, extra=None):
    """Atomically write backbone descriptor + weights + preprocessing."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "backbone": model.descriptor,
        "state_dict": model.backbone.state_dict(),
        "preprocess": {
            "size": preprocess.size,
            "mean": list(preprocess.mean),
            "std": list(preprocess.std),
            "interpolation": preprocess.interpolation,
        },
        "extra": extra or {},
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, expected_backbone: str = None):
    """Load a checkpoint; returns (model, metadata dict).

    Fails when the stored descriptor is unknown or does not match
    `expected_backbone`.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version} != {CHECKPOINT_VERSION}")
    descriptor = payload["backbone"]
    if expected_backbone is not None and descriptor != expected_backbone:
        raise CheckpointError(
            f"{path}: checkpoint backbone {descriptor!r} does not match requested {expected_backbone!r}"
        )
    # weights come from the file, so never fetch pretrained ones here
    arch = "resnet18-random" if descriptor.startswith("resnet18") else descriptor
    model = ProtoNet(build_backbone(arch), descriptor)
    model.backbone.load_state_dict(payload["state_dict"])
    pp = payload["preprocess"]
    meta = {
        "backbone": descriptor,
        "preprocess": PreprocessConfig(
            size=pp["size"], mean=tuple(pp["mean"]), std=tuple(pp["std"]), interpolation=pp["interpolation"]
        ),
        "extra": payload.get("extra", {}),
    }
    return model, meta
