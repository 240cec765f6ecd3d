"""Tensor primitives shared by the rest of the package.

Probability and logit maps keep their class axis at ``dim=-4`` so the same
functions work on single maps ``(C, H, W, D)`` and batches ``(N, C, H, W, D)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

IGNORE = 255
PROB_CLAMP = 1e-12
CLASS_DIM = -4


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LabelMask:
    data: np.ndarray
    num_classes: int = 2
    ignore: int = field(default=IGNORE)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        bad = (self.data != self.ignore) & ((self.data < 0) | (self.data >= self.num_classes))
        if np.any(bad):
            raise ValueError("label entries must be class indices or IGNORE")

    @property
    def shape(self):
        return self.data.shape

    @property
    def has_ignore(self) -> bool:
        return bool(np.any(self.data == self.ignore))


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def softmax(logits, temperature: float = 1.0) -> torch.Tensor:
    """Temperature-scaled softmax over the class axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = _as_tensor(logits)
    z = logits / temperature
    z = z - z.amax(dim=CLASS_DIM, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=CLASS_DIM, keepdim=True)


def argmax_labels(probs) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lower class
    return torch.argmax(_as_tensor(probs), dim=CLASS_DIM)


def entropy_map(probs) -> torch.Tensor:
    """Per-voxel Shannon entropy in bits."""
    p = _as_tensor(probs)
    logp = torch.log2(p.clamp_min(PROB_CLAMP))
    ent = -(p * logp).sum(dim=CLASS_DIM)
    return ent.clamp_min(0.0)


def one_hot(labels, num_classes: int = 2, dtype=torch.float32) -> torch.Tensor:
    labels = _as_tensor(labels).long()
    if torch.any(labels == IGNORE):
        raise ValueError("one_hot got IGNORE entries; mask them before encoding")
    if torch.any((labels < 0) | (labels >= num_classes)):
        raise ValueError("label out of range for one_hot")
    oh = torch.nn.functional.one_hot(labels, num_classes).to(dtype)
    # (..., H, W, D, C) -> (..., C, H, W, D)
    return torch.movedim(oh, -1, CLASS_DIM)


def max_entropy(num_classes: int) -> float:
    return math.log2(num_classes)
