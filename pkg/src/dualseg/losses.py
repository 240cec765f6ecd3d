"""Training objectives for the dual-subnet model.

Cross-entropy terms use the natural log and work from logits. Entropy maps
used for masking live in :mod:`dualseg.volume` and use log base 2; the two
conventions never mix.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F

from .pseudo import ClassSubsets, Prototypes
from .volume import CLASS_DIM, IGNORE, PROB_CLAMP, argmax_labels, one_hot, softmax

DICE_SMOOTH = 1e-5
CR_EPS = 1e-8


@dataclass
class LossWeights:
    alpha: float = 0.5
    lambda_c: float = 0.1
    T_p: float = 0.5
    epsilon: float = CR_EPS

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_c < 0:
            raise ValueError("alpha and lambda_c must be >= 0")
        if self.T_p <= 0 or self.epsilon <= 0:
            raise ValueError("T_p and epsilon must be > 0")


@dataclass
class Toggles:
    """Component switches; ``cps`` and ``efs`` together make up CCE."""

    cps: bool = True
    efs: bool = True
    pgl: bool = True
    ue: bool = True
    cr: bool = True
    cr_distance: str = "mse"
    contrastive_third_term: bool = True
    disagreement_mode: str = "xor"
    double_count_unsup: bool = False

    def __post_init__(self):
        if self.cr_distance not in ("mse", "kl"):
            raise ValueError(f"cr_distance must be 'mse' or 'kl', got {self.cr_distance!r}")
        if self.disagreement_mode not in ("xor", "or"):
            raise ValueError(f"disagreement_mode must be 'xor' or 'or', got {self.disagreement_mode!r}")

    @property
    def cce(self) -> bool:
        return self.cps and self.efs

    @property
    def any_unsupervised(self) -> bool:
        return self.cps or self.efs or self.ue or self.pgl

    @classmethod
    def preset(cls, name: str) -> "Toggles":
        presets = {
            "full": dict(),
            "supervised-only": dict(cps=False, efs=False, pgl=False, ue=False, cr=False),
            "cps-only": dict(cps=True, efs=False, pgl=False, ue=False, cr=False),
            "efs-only": dict(cps=False, efs=True, pgl=False, ue=False, cr=False),
            "cce-only": dict(cps=True, efs=True, pgl=False, ue=False, cr=False),
            "pgl-ue-cr": dict(cps=False, efs=False),
            "no-cr": dict(cr=False),
            "no-pgl": dict(pgl=False),
            "no-ue": dict(ue=False),
        }
        if name not in presets:
            raise ValueError(f"unknown toggle preset {name!r}; choose from {sorted(presets)}")
        return cls(**presets[name])


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x if x.dim() == 5 else x.unsqueeze(0)


def _check_no_ignore(target):
    if torch.any(target == IGNORE):
        raise ValueError("target contains IGNORE entries; use efs_ce_loss")


def ce_loss(logits, target) -> torch.Tensor:
    """Mean voxelwise cross-entropy from logits."""
    _check_no_ignore(target)
    return F.cross_entropy(_batched(logits), _batched_labels(target, logits))


def _batched_labels(target, logits):
    target = target.long()
    return target if logits.dim() == 5 else target.unsqueeze(0)


def dice_loss(probs, target, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss on the foreground channels, averaged over foreground classes."""
    _check_no_ignore(target)
    target = _batched_labels(target, probs)
    probs = _batched(probs)
    t = one_hot(target, probs.shape[1], dtype=probs.dtype)
    losses = []
    for c in range(1, probs.shape[1]):
        p, g = probs[:, c], t[:, c]
        losses.append(1 - (2 * (p * g).sum() + smooth) / (p.sum() + g.sum() + smooth))
    return torch.stack(losses).mean()


def cr_term(probs, target, mask, epsilon: float = CR_EPS, distance: str = "mse") -> torch.Tensor:
    """Masked consistency penalty for one subnet, normalised by the mask size."""
    if probs.shape[:CLASS_DIM] + probs.shape[CLASS_DIM + 1 :] != target.shape or target.shape != mask.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)}, target {tuple(target.shape)}, mask {tuple(mask.shape)}")
    m = mask.to(probs.dtype)
    if distance == "mse":
        per_voxel = (probs.select(CLASS_DIM, 1) - (target == 1).to(probs.dtype)) ** 2
    elif distance == "kl":
        # KL(one-hot target || p) reduces to -log p[target]
        picked = torch.gather(probs, CLASS_DIM % probs.dim(), target.long().unsqueeze(CLASS_DIM % probs.dim()))
        per_voxel = -torch.log(picked.squeeze(CLASS_DIM % probs.dim()).clamp_min(PROB_CLAMP))
    else:
        raise ValueError(f"unknown cr distance {distance!r}")
    return (m * per_voxel).sum() / (m.sum() + epsilon)


def cr_loss(prob_A, prob_B, target, mask, epsilon: float = CR_EPS, distance: str = "mse") -> torch.Tensor:
    return 0.5 * (cr_term(prob_A, target, mask, epsilon, distance) + cr_term(prob_B, target, mask, epsilon, distance))


def cps_loss(logits_A, logits_B) -> torch.Tensor:
    """Each subnet is supervised by the other's (detached) argmax."""
    y_A = argmax_labels(logits_A.detach())
    y_B = argmax_labels(logits_B.detach())
    return ce_loss(logits_B, y_A) + ce_loss(logits_A, y_B)


def efs_ce_loss(logits, pseudo) -> torch.Tensor:
    """Cross-entropy averaged over non-IGNORE voxels; 0 when every voxel is ignored."""
    target = _batched_labels(pseudo, logits)
    valid = target != IGNORE
    if not torch.any(valid):
        return logits.sum() * 0.0
    per_voxel = F.cross_entropy(_batched(logits), torch.where(valid, target, 0), reduction="none")
    return (per_voxel * valid).sum() / valid.sum()


def kl_map(p_A, p_B) -> torch.Tensor:
    """Voxelwise sum_c p_B log(p_B / p_A)."""
    if p_A.shape != p_B.shape:
        raise ValueError(f"shape mismatch: {tuple(p_A.shape)} vs {tuple(p_B.shape)}")
    a = p_A.clamp_min(PROB_CLAMP)
    b = p_B.clamp_min(PROB_CLAMP)
    return (p_B * (torch.log(b) - torch.log(a))).sum(dim=CLASS_DIM).clamp_min(0.0)


def sharpened_target(logits, T_p: float) -> torch.Tensor:
    return softmax(logits.detach(), T_p)


def une_direction(logits_student, logits_teacher, T_p: float, soft=None) -> torch.Tensor:
    p_s = softmax(logits_student)
    p_t = softmax(logits_teacher)
    kl = kl_map(p_s, p_t)
    if soft is None:
        soft = sharpened_target(logits_teacher, T_p)
    l_p = -(soft * F.log_softmax(logits_student, dim=CLASS_DIM)).sum(dim=CLASS_DIM)
    return (torch.exp(-kl) * l_p + kl).mean()


def une_loss(logits_A, logits_B, T_p: float, soft_targets=None) -> torch.Tensor:
    """KL-weighted soft pseudo-supervision, averaged over both directions.

    ``soft_targets`` optionally fixes the (detached) sharpened targets for A and B.
    """
    if T_p <= 0:
        raise ValueError("T_p must be positive")
    soft_A, soft_B = soft_targets if soft_targets is not None else (None, None)
    return 0.5 * (une_direction(logits_A, logits_B, T_p, soft_A) + une_direction(logits_B, logits_A, T_p, soft_B))


def contrastive_term(features, uncertain, labels, protos: Prototypes, third_term: bool = True):
    """One subnet's prototype pull.

    Returns the loss and a flag telling whether any prototype was undefined.
    """
    f = torch.movedim(features, CLASS_DIM, -1).reshape(-1, features.shape[CLASS_DIM])
    unc = uncertain.reshape(-1)
    lab = labels.reshape(-1)
    zero = features.sum() * 0.0
    total = zero
    for cls, proto in ((1, protos.c_f), (0, protos.c_b)):
        sel = unc & (lab == cls)
        if proto is None or not torch.any(sel):
            continue
        total = total + torch.linalg.vector_norm(f[sel] - proto, dim=1).mean()
    if third_term and protos.c_f is not None and protos.c_b is not None:
        total = total + torch.linalg.vector_norm(protos.c_f - protos.c_b)
    return total, not (protos.defined_f and protos.defined_b)


def contrastive_loss(features_A, features_B, subsets: ClassSubsets, protos_A, protos_B, labels_A, labels_B, third_term=True):
    """Average of the per-subnet prototype pulls. Returns ``(loss, undefined_flag)``."""
    la, ua = contrastive_term(features_A, subsets.uncertain, labels_A, protos_A, third_term)
    lb, ub = contrastive_term(features_B, subsets.uncertain, labels_B, protos_B, third_term)
    return 0.5 * (la + lb), ua or ub


COMPONENTS = ("ce_A", "dice_A", "cr_A", "ce_B", "dice_B", "cr_B", "l_c", "l_cps", "l_efs", "l_une")


@dataclass
class LossReport:
    l_s_A: float
    l_s_B: float
    l_cr: float
    l_cps: float
    l_efs: float
    l_une: float
    l_c: float
    lambda_c: float
    total: float
    toggles: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    loss: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("loss", "toggles", "flags")}
        flags = self.flags
        d.update({f"flag_{k}": int(v) for k, v in flags.items()})
        return d

    def recompute_total(self) -> float:
        unsup_scale = 2.0 if self.toggles.get("double_count_unsup") else 1.0
        return self.l_s_A + self.l_s_B + self.lambda_c * self.l_c + unsup_scale * (self.l_cps + self.l_efs + self.l_une)


def total_loss(components: dict, weights: LossWeights, toggles: Toggles, flags: dict | None = None) -> LossReport:
    """Combine component tensors into the training objective.

    ``components`` maps names in :data:`COMPONENTS` to scalar tensors; disabled
    or missing components count as zero. Bidirectional unsupervised terms are
    counted once unless ``toggles.double_count_unsup``.
    """

    def get(name, enabled=True):
        t = components.get(name)
        if t is None or not enabled:
            return None
        return t

    def val(t):
        return 0.0 if t is None else float(t.detach())

    parts = []
    cr_A, cr_B = get("cr_A", toggles.cr), get("cr_B", toggles.cr)
    ls = {}
    for side, cr in (("A", cr_A), ("B", cr_B)):
        terms = [t for t in (get(f"ce_{side}"), get(f"dice_{side}")) if t is not None]
        if cr is not None:
            terms.append(weights.alpha * cr)
        tensor = sum(terms) if terms else None
        ls[side] = tensor
        if tensor is not None:
            parts.append(tensor)
    l_c = get("l_c", toggles.pgl)
    if l_c is not None and weights.lambda_c:
        parts.append(weights.lambda_c * l_c)
    unsup_scale = 2.0 if toggles.double_count_unsup else 1.0
    unsup = {n: get(n, on) for n, on in (("l_cps", toggles.cps), ("l_efs", toggles.efs), ("l_une", toggles.ue))}
    for t in unsup.values():
        if t is not None:
            parts.append(unsup_scale * t)
    loss = sum(parts) if parts else torch.zeros(())
    report = LossReport(
        l_s_A=val(ls["A"]),
        l_s_B=val(ls["B"]),
        l_cr=0.5 * (val(cr_A) + val(cr_B)),
        l_cps=val(unsup["l_cps"]),
        l_efs=val(unsup["l_efs"]),
        l_une=val(unsup["l_une"]),
        l_c=val(l_c),
        lambda_c=float(weights.lambda_c),
        total=0.0,
        toggles=asdict(toggles),
        flags=dict(flags or {}),
        loss=loss,
    )
    report.total = report.recompute_total()
    for name in ("l_s_A", "l_s_B", "l_cr", "l_cps", "l_efs", "l_une", "l_c", "total"):
        if not math.isfinite(getattr(report, name)):
            raise FloatingPointError(f"non-finite loss component {name}")
    return report
