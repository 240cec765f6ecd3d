"""Central finite-difference checks for every training loss.

Each check builds a tiny float64 instance, differentiates the loss with
autograd and compares against central differences over every input entry.
Discrete pieces (argmax targets, entropy masks, reliable subsets) are built
once from the unperturbed inputs, as in training where they are detached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from . import losses as L
from .pseudo import class_subsets, compute_prototypes, efs_pseudo_labels, percentile_thresholds, reliability_mask
from .volume import argmax_labels, entropy_map, softmax

SHAPE = (4, 4, 2)
TOLERANCE = 1e-4


@dataclass
class GradResult:
    loss: str
    direction: str
    rel_error: float
    passed: bool
    error: str = ""


def numeric_grad(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn(x).item()
            flat[i] = orig - h
            down = fn(x).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(fn, x: torch.Tensor) -> float:
    x = x.detach().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = numeric_grad(fn, x.detach().clone())
    scale = max(numeric.norm().item(), analytic.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


def _instance(seed: int, channels: int = 2, scale: float = 2.0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn((1, channels) + SHAPE, generator=gen, dtype=torch.float64) * scale


def _labels(seed: int):
    gen = torch.Generator().manual_seed(seed)
    y = torch.randint(0, 2, (1,) + SHAPE, generator=gen)
    y.view(-1)[0], y.view(-1)[1] = 0, 1
    return y


def build_checks(seed: int = 0, losses_module=L) -> list[tuple[str, str, Callable, torch.Tensor]]:
    """(loss name, direction, scalar fn of one tensor, point) for every loss and subnet direction."""
    Lm = losses_module
    la, lb = _instance(seed), _instance(seed + 1)
    y = _labels(seed + 2)
    mask = torch.rand((1,) + SHAPE, generator=torch.Generator().manual_seed(seed + 3)) > 0.4
    fa, fb = _instance(seed + 4, channels=3, scale=1.0), _instance(seed + 5, channels=3, scale=1.0)

    pa, pb = softmax(la), softmax(lb)
    ent_a, ent_b = entropy_map(pa), entropy_map(pb)
    th = percentile_thresholds(ent_a, ent_b, 70.0)
    pseudo_a = efs_pseudo_labels(pa, ent_a, ent_b, th)
    pseudo_b = efs_pseudo_labels(pb, ent_a, ent_b, th)
    rel = reliability_mask(pa, pb, ent_a, ent_b, th)
    # guarantee both reliable classes and some uncertain voxels exist
    rel.view(-1)[:4] = True
    rel.view(-1)[4:8] = False
    lab_a, lab_b = argmax_labels(pa), argmax_labels(pb)
    lab_a.view(-1)[0], lab_a.view(-1)[1] = 0, 1
    subsets = class_subsets(rel, lab_a)

    # targets for A come from B and vice versa
    soft = (L.sharpened_target(lb, 0.5), L.sharpened_target(la, 0.5))

    def contrastive(fa_, fb_):
        protos_a = compute_prototypes(fa_, subsets.reliable_fg, subsets.reliable_bg)
        protos_b = compute_prototypes(fb_, subsets.reliable_fg, subsets.reliable_bg)
        return Lm.contrastive_loss(fa_, fb_, subsets, protos_a, protos_b, lab_a, lab_b)[0]

    return [
        ("ce", "A", lambda x: Lm.ce_loss(x, y), la),
        ("ce", "B", lambda x: Lm.ce_loss(x, y), lb),
        ("dice", "A", lambda x: Lm.dice_loss(softmax(x), y), la),
        ("dice", "B", lambda x: Lm.dice_loss(softmax(x), y), lb),
        ("cr-mse", "A", lambda x: Lm.cr_term(softmax(x), y, mask), la),
        ("cr-mse", "B", lambda x: Lm.cr_term(softmax(x), y, mask), lb),
        ("cr-kl", "A", lambda x: Lm.cr_term(softmax(x), y, mask, distance="kl"), la),
        ("cr-kl", "B", lambda x: Lm.cr_term(softmax(x), y, mask, distance="kl"), lb),
        ("cps", "A", lambda x: Lm.cps_loss(x, lb), la),
        ("cps", "B", lambda x: Lm.cps_loss(la, x), lb),
        ("efs", "A", lambda x: Lm.efs_ce_loss(x, pseudo_b), la),
        ("efs", "B", lambda x: Lm.efs_ce_loss(x, pseudo_a), lb),
        ("kl", "A", lambda x: Lm.kl_map(softmax(x), pb).sum(), la),
        ("kl", "B", lambda x: Lm.kl_map(pa, softmax(x)).sum(), lb),
        ("une", "A", lambda x: Lm.une_loss(x, lb, 0.5, soft), la),
        ("une", "B", lambda x: Lm.une_loss(la, x, 0.5, soft), lb),
        ("contrastive", "A", lambda x: contrastive(x, fb), fa),
        ("contrastive", "B", lambda x: contrastive(fa, x), fb),
    ]


def run_gradchecks(seed: int = 0, tolerance: float = TOLERANCE, losses_module=L) -> list[GradResult]:
    results = []
    for name, direction, fn, x in build_checks(seed, losses_module):
        try:
            err = relative_error(fn, x)
        except Exception as exc:  # a broken loss must show up as a failed row, not a crash
            results.append(GradResult(name, direction, float("nan"), False, f"{type(exc).__name__}: {exc}"))
            continue
        results.append(GradResult(name, direction, err, err < tolerance))
    return results
