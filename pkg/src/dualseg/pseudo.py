"""Masks and pseudo-labels built from the two subnets' predictions.

Everything here is non-differentiable bookkeeping except
:func:`compute_prototypes`, which keeps the autograd graph of the features so
the contrastive loss can pull on them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .volume import CLASS_DIM, IGNORE, argmax_labels


@dataclass
class EntropyThresholds:
    tau_A: float
    tau_B: float
    gamma_percentile: float


@dataclass
class ClassSubsets:
    """Boolean voxel masks; together they partition the voxel grid."""

    reliable_fg: torch.Tensor
    reliable_bg: torch.Tensor
    uncertain: torch.Tensor

    def sizes(self):
        return int(self.reliable_fg.sum()), int(self.reliable_bg.sum()), int(self.uncertain.sum())

    def indices(self):
        return tuple(torch.nonzero(m.reshape(-1)).flatten() for m in (self.reliable_fg, self.reliable_bg, self.uncertain))


@dataclass
class Prototypes:
    c_f: torch.Tensor | None
    c_b: torch.Tensor | None
    n_f: int
    n_b: int

    @property
    def defined_f(self) -> bool:
        return self.c_f is not None

    @property
    def defined_b(self) -> bool:
        return self.c_b is not None


def _same_shape(*ts):
    shapes = {tuple(t.shape) for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def disagreement_mask(prob_A, prob_B, lam: float, mode: str = "xor") -> torch.Tensor:
    """Confident-foreground disagreement between the subnets.

    A subnet's condition holds where its argmax is foreground and its
    foreground probability is at least ``lam``. ``mode="xor"`` flags voxels
    where exactly one condition holds; ``mode="or"`` where either does.
    """
    _same_shape(prob_A, prob_B)
    if not 0 < lam < 1:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    conds = []
    for p in (prob_A, prob_B):
        p = p.detach()
        fg = p.select(CLASS_DIM, 1)
        conds.append((argmax_labels(p) == 1) & (fg >= lam))
    if mode == "xor":
        return conds[0] ^ conds[1]
    if mode == "or":
        return conds[0] | conds[1]
    raise ValueError(f"unknown disagreement mode {mode!r}")


def percentile(values, gamma: float) -> float:
    arr = values.detach().cpu().numpy() if isinstance(values, torch.Tensor) else np.asarray(values)
    if arr.size == 0:
        raise ValueError("percentile of an empty entropy map")
    return float(np.percentile(arr.reshape(-1).astype(np.float64), gamma, method="linear"))


def percentile_thresholds(ent_A, ent_B, gamma: float) -> EntropyThresholds:
    if not 0 < gamma < 100:
        raise ValueError(f"gamma must lie in (0, 100), got {gamma}")
    return EntropyThresholds(percentile(ent_A, gamma), percentile(ent_B, gamma), float(gamma))


def efs_pseudo_labels(prob_src, ent_A, ent_B, thresholds: EntropyThresholds) -> torch.Tensor:
    """Argmax of ``prob_src`` with high-entropy voxels (in either subnet) set to IGNORE."""
    _same_shape(ent_A, ent_B)
    labels = argmax_labels(prob_src.detach())
    _same_shape(labels, ent_A)
    drop = (ent_A > thresholds.tau_A) | (ent_B > thresholds.tau_B)
    return torch.where(drop, torch.full_like(labels, IGNORE), labels)


def reliability_mask(prob_A, prob_B, ent_A, ent_B, thresholds: EntropyThresholds) -> torch.Tensor:
    _same_shape(prob_A, prob_B)
    _same_shape(ent_A, ent_B)
    agree = argmax_labels(prob_A.detach()) == argmax_labels(prob_B.detach())
    _same_shape(agree, ent_A)
    return agree & (ent_A < thresholds.tau_A) & (ent_B < thresholds.tau_B)


def class_subsets(mask, labels_A) -> ClassSubsets:
    _same_shape(mask, labels_A)
    mask = mask.bool()
    return ClassSubsets(
        reliable_fg=mask & (labels_A == 1),
        reliable_bg=mask & (labels_A == 0),
        # classes >= 2 never appear in binary runs, but keep the partition total
        uncertain=~mask | ((labels_A != 0) & (labels_A != 1)),
    )


def voxel_features(features: torch.Tensor) -> torch.Tensor:
    """(N, F, H, W, D) or (F, H, W, D) -> (voxels, F) in the same voxel order as a flattened mask."""
    f = torch.movedim(features, CLASS_DIM, -1)
    return f.reshape(-1, f.shape[-1])


def compute_prototypes(features, reliable_fg, reliable_bg) -> Prototypes:
    fv = voxel_features(features)
    out = []
    for m in (reliable_fg, reliable_bg):
        m = m.reshape(-1)
        if m.shape[0] != fv.shape[0]:
            raise ValueError(f"mask has {m.shape[0]} voxels but features have {fv.shape[0]}")
        n = int(m.sum())
        out.append((fv[m].mean(dim=0) if n else None, n))
    (c_f, n_f), (c_b, n_b) = out
    return Prototypes(c_f, c_b, n_f, n_b)
