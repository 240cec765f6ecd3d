"""Sliding-window inference and overlap / surface-distance metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .volume import softmax

SIX_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


class UndefinedMetricError(ValueError):
    pass


@dataclass
class InferencePlan:
    window_shape: tuple = (48, 48, 32)
    stride: tuple = (16, 16, 16)
    aggregation: str = "mean-of-probabilities"

    def __post_init__(self):
        self.window_shape = tuple(int(w) for w in self.window_shape)
        self.stride = tuple(int(s) for s in self.stride)
        if any(s < 1 or s > w for s, w in zip(self.stride, self.window_shape)):
            raise ValueError(f"stride {self.stride} must be in [1, window] per axis for window {self.window_shape}")


def window_starts(n: int, window: int, stride: int) -> list[int]:
    if window > n:
        raise ValueError(f"window {window} larger than volume axis {n}")
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


@torch.no_grad()
def sliding_window_predict(nets, volume, plan: InferencePlan) -> np.ndarray:
    """Stitched class probabilities (C, H, W, D), averaged over windows and over ``nets``."""
    if not isinstance(nets, (list, tuple)):
        nets = [nets]
    data = volume.data if hasattr(volume, "data") and not isinstance(volume, np.ndarray) else volume
    data = np.asarray(data)
    shape = data.shape
    for axis, (n, w) in enumerate(zip(shape, plan.window_shape)):
        if w > n:
            raise ValueError(f"window {plan.window_shape} larger than volume {shape} on axis {axis}")
    starts = [window_starts(n, w, s) for n, w, s in zip(shape, plan.window_shape, plan.stride)]
    acc = None
    count = np.zeros(shape, dtype=np.float64)
    for net in nets:
        net.eval()
    dtype = next(nets[0].parameters()).dtype
    x_full = torch.from_numpy(np.ascontiguousarray(data)).to(dtype)
    for i in starts[0]:
        for j in starts[1]:
            for k in starts[2]:
                sl = (slice(i, i + plan.window_shape[0]), slice(j, j + plan.window_shape[1]), slice(k, k + plan.window_shape[2]))
                x = x_full[sl][None]
                probs = sum(softmax(net(x).logits)[0] for net in nets) / len(nets)
                probs = probs.double().numpy()
                if acc is None:
                    acc = np.zeros((probs.shape[0],) + shape, dtype=np.float64)
                acc[(slice(None),) + sl] += probs
                count[sl] += 1
    return acc / count


def _binary(x) -> np.ndarray:
    x = np.asarray(x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else x)
    return x == 1


def dice_jaccard(pred, gt) -> tuple[float, float]:
    """Dice and Jaccard in percent; two empty masks score 100 on both."""
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    inter = np.count_nonzero(p & g)
    sp, sg = np.count_nonzero(p), np.count_nonzero(g)
    if sp + sg == 0:
        return 100.0, 100.0
    return 200.0 * inter / (sp + sg), 100.0 * inter / (sp + sg - inter)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour; outside the grid counts as background."""
    eroded = ndimage.binary_erosion(mask, structure=SIX_NEIGHBOURS, border_value=0)
    return mask & ~eroded


def directed_distances(src_surface, dst_surface, spacing=None) -> np.ndarray:
    dt = ndimage.distance_transform_edt(~dst_surface, sampling=spacing)
    return dt[src_surface]


def surface_distances(pred, gt, spacing=None) -> tuple[float, float]:
    """(hd95, asd) over pooled bidirectional surface distances, in voxels unless ``spacing`` is given."""
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        raise UndefinedMetricError("surface distance undefined for an empty mask")
    sp, sg = surface(p), surface(g)
    d = np.concatenate([directed_distances(sp, sg, spacing), directed_distances(sg, sp, spacing)])
    return float(np.percentile(d, 95, method="linear")), float(d.mean())


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    jaccard: float
    hd95: float | None
    asd: float | None
    failed: bool = False
    error: str = ""


@dataclass
class MetricReport:
    per_case: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)

    @classmethod
    def from_cases(cls, rows: list[CaseMetrics]) -> "MetricReport":
        rows = sorted(rows, key=lambda r: r.case_id)
        mean, err = {}, {}
        for key in ("dice", "jaccard", "hd95", "asd"):
            vals = np.array([getattr(r, key) for r in rows if getattr(r, key) is not None], dtype=np.float64)
            if vals.size == 0:
                mean[key], err[key] = None, None
                continue
            mean[key] = float(vals.mean())
            err[key] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        return cls(rows, mean, err)

    def cell(self, key: str) -> str:
        if self.mean.get(key) is None:
            return "n/a"
        return f"{self.mean[key]:.2f} ± {self.stderr[key]:.2f}"

    def to_json(self) -> dict:
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "formatted": {k: self.cell(k) for k in ("dice", "jaccard", "hd95", "asd")},
            "num_cases": len(self.per_case),
            "num_failed": sum(r.failed for r in self.per_case),
            "per_case": [asdict(r) for r in self.per_case],
        }

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath = out_dir / f"{stem}.json"
        jpath.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        cpath = out_dir / f"{stem}_per_case.csv"
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "Dice(%)", "Jaccard(%)", "95HD(voxel)", "ASD(voxel)", "failed"])
            for r in self.per_case:
                w.writerow([r.case_id, repr(r.dice), repr(r.jaccard),
                            "" if r.hd95 is None else repr(r.hd95), "" if r.asd is None else repr(r.asd), int(r.failed)])
        return jpath, cpath


def case_metrics(case_id: str, pred: np.ndarray, gt: np.ndarray, spacing=None) -> CaseMetrics:
    dice, jac = dice_jaccard(pred, gt)
    try:
        hd95, asd = surface_distances(pred, gt, spacing)
    except UndefinedMetricError as exc:
        return CaseMetrics(case_id, dice, jac, None, None, True, str(exc))
    return CaseMetrics(case_id, dice, jac, hd95, asd)


def evaluate_split(net_A, net_B, cases, plan: InferencePlan, mode: str = "ensemble", spacing_aware: bool = False) -> MetricReport:
    """Predict every case (argmax of the averaged subnet probabilities by default) and score it."""
    nets = {"ensemble": [net_A, net_B], "A": [net_A], "B": [net_B]}.get(mode)
    if nets is None:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    rows = []
    for c in cases:
        probs = sliding_window_predict(nets, c.volume, plan)
        pred = np.argmax(probs, axis=0)
        rows.append(case_metrics(c.id, pred, c.label.data, c.volume.spacing if spacing_aware else None))
    return MetricReport.from_cases(rows)
