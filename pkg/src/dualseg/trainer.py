"""Dual-subnet training loop: batches, schedules, SGD, checkpoints and logs."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .data import Case, SplitManifest, crop_offset
from .nets import SubnetConfig, Subnet, init_subnet, load_tensors, save_tensors
from .pseudo import (
    class_subsets,
    compute_prototypes,
    disagreement_mask,
    efs_pseudo_labels,
    percentile_thresholds,
    reliability_mask,
)
from .volume import IGNORE, argmax_labels, entropy_map, softmax

log = logging.getLogger(__name__)

LOG_FIELDS = ["iter", "l_s_A", "l_s_B", "l_cr", "l_cps", "l_efs", "l_une", "l_c", "total", "lr", "lambda_c",
              "flag_efs_all_ignore", "flag_prototype_undefined"]


@dataclass
class TrainConfig:
    max_iters: int = 1500
    base_lr: float = 0.01
    lr_schedule: str = "step-decay"
    step_size: int = 600
    decay_factor: float = 0.1
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    labeled_per_batch: int = 2
    unlabeled_per_batch: int = 2
    crop_shape: tuple = (48, 48, 32)
    lam: float = 0.6
    alpha: float = 0.5
    T_p: float = 0.5
    gamma: float = 70.0
    lambda_c_schedule: str = "paper-literal"
    seed: int = 0
    base_channels: int = 8
    feature_dim: int = 16
    depth: int = 3
    checkpoint_every: int = 500
    normalize_features: bool = True
    toggles: L.Toggles = field(default_factory=L.Toggles)

    def __post_init__(self):
        if isinstance(self.toggles, dict):
            self.toggles = L.Toggles(**self.toggles)
        self.crop_shape = tuple(int(c) for c in self.crop_shape)
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        if self.labeled_per_batch < 1 or self.unlabeled_per_batch < 1:
            raise ValueError("batch counts must be >= 1")
        if self.lr_schedule not in ("step-decay", "poly"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lambda_c_schedule not in ("paper-literal", "gaussian-rampup"):
            raise ValueError(f"unknown lambda_c_schedule {self.lambda_c_schedule!r}")

    def subnet_configs(self):
        common = dict(base_channels=self.base_channels, feature_dim=self.feature_dim, depth=self.depth)
        return SubnetConfig(arch="residual-unet", **common), SubnetConfig(arch="vnet-style", **common)

    def weights(self, t: int) -> L.LossWeights:
        return L.LossWeights(alpha=self.alpha, lambda_c=lambda_c_at(t, self.max_iters, self.lambda_c_schedule), T_p=self.T_p)

    def to_json(self) -> dict:
        d = asdict(self)
        d["crop_shape"] = list(self.crop_shape)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lambda_c_at(t: int, t_max: int, mode: str = "paper-literal") -> float:
    if t < 0 or t > t_max:
        raise ValueError(f"iteration {t} outside [0, {t_max}]")
    x = (1.0 - t / t_max) ** 2
    if mode == "paper-literal":
        return 0.1 * math.exp(4.0 * x)
    if mode == "gaussian-rampup":
        return 0.1 * math.exp(-5.0 * x)
    raise ValueError(f"unknown lambda_c schedule {mode!r}")


def lr_at(t: int, config: TrainConfig) -> float:
    if config.lr_schedule == "step-decay":
        return config.base_lr * config.decay_factor ** (t // config.step_size)
    return config.base_lr * max(0.0, 1.0 - t / config.max_iters) ** config.poly_power


class SGD:
    """Momentum SGD with weight decay applied as a separate multiplicative shrink.

    ``p <- p * (1 - lr * wd) - lr * buf`` with ``buf <- momentum * buf + grad``.
    """

    def __init__(self, params: dict, momentum: float, weight_decay: float, buffers: dict | None = None):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = buffers if buffers is not None else {k: torch.zeros_like(p) for k, p in params.items()}

    @torch.no_grad()
    def step(self, lr: float):
        shrink = 1.0 - lr * self.weight_decay
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            buf = self.buffers[k]
            buf.mul_(self.momentum).add_(g)
            p.mul_(shrink).sub_(lr * buf)


@dataclass
class TrainState:
    net_A: Subnet
    net_B: Subnet
    buffers: dict
    t: int = 0
    seed: int = 0
    best: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        cfg_A, cfg_B = config.subnet_configs()
        net_A = init_subnet(cfg_A, config.seed)
        net_B = init_subnet(cfg_B, config.seed)
        buffers = {k: torch.zeros_like(p) for k, p in named_params(net_A, net_B).items()}
        return cls(net_A, net_B, buffers, 0, config.seed)

    def tensors(self) -> dict:
        out = {f"A.{k}": v for k, v in self.net_A.state_dict().items()}
        out.update({f"B.{k}": v for k, v in self.net_B.state_dict().items()})
        out.update({f"mom.{k}": v for k, v in self.buffers.items()})
        return out

    def save(self, path, extra: dict | None = None):
        meta = {"t": self.t, "seed": self.seed, "best": self.best,
                "config_A": asdict(self.net_A.config), "config_B": asdict(self.net_B.config)}
        meta.update(extra or {})
        save_tensors(path, self.tensors(), meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        tensors, meta = load_tensors(path)
        net_A = Subnet(SubnetConfig(**meta["config_A"]))
        net_B = Subnet(SubnetConfig(**meta["config_B"]))
        net_A.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("A.")})
        net_B.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("B.")})
        buffers = {k[4:]: v for k, v in tensors.items() if k.startswith("mom.")}
        return cls(net_A, net_B, buffers, meta["t"], meta["seed"], meta.get("best", {}))


def named_params(net_A, net_B) -> dict:
    out = {f"A.{k}": p for k, p in net_A.named_parameters()}
    out.update({f"B.{k}": p for k, p in net_B.named_parameters()})
    return out


@dataclass
class Batch:
    volumes: torch.Tensor  # (N, H, W, D)
    labels: torch.Tensor | None = None  # (N, H, W, D) int64


def _stream_rng(seed: int, *key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *[int(k) for k in key]])))


def batch_ids(ids, per_batch: int, t: int, seed: int, stream: int) -> list:
    """Ids for step ``t``; cycles through seeded per-epoch permutations statelessly."""
    n = len(ids)
    out = []
    for j in range(per_batch):
        k = t * per_batch + j
        perm = _stream_rng(seed, stream, k // n).permutation(n)
        out.append(ids[perm[k % n]])
    return out


def assemble_batch(cases: dict, ids, crop_shape, rng, with_labels: bool) -> Batch:
    vols, labs = [], []
    for cid in ids:
        c: Case = cases[cid]
        off = crop_offset(c.volume.shape, crop_shape, rng)
        sl = tuple(slice(o, o + n) for o, n in zip(off, crop_shape))
        vols.append(torch.from_numpy(np.ascontiguousarray(c.volume.data[sl], dtype=np.float32)))
        if with_labels:
            labs.append(torch.from_numpy(c.label.data[sl].astype(np.int64)))
    return Batch(torch.stack(vols), torch.stack(labs) if with_labels else None)


def make_batches(cases: dict, manifest: SplitManifest, config: TrainConfig, t: int):
    rng = _stream_rng(config.seed, 7, t)
    lab_ids = batch_ids(manifest.labeled_ids, config.labeled_per_batch, t, config.seed, 1)
    labeled = assemble_batch(cases, lab_ids, config.crop_shape, rng, True)
    unlabeled = None
    if manifest.unlabeled_ids:
        unl_ids = batch_ids(manifest.unlabeled_ids, config.unlabeled_per_batch, t, config.seed, 2)
        unlabeled = assemble_batch(cases, unl_ids, config.crop_shape, rng, False)
    return labeled, unlabeled


def compute_losses(state: TrainState, labeled: Batch, unlabeled: Batch | None, config: TrainConfig, weights: L.LossWeights):
    tg = config.toggles
    comps, flags = {}, {"efs_all_ignore": False, "prototype_undefined": False}
    out_A = state.net_A(labeled.volumes)
    out_B = state.net_B(labeled.volumes)
    y = labeled.labels
    p_A, p_B = softmax(out_A.logits), softmax(out_B.logits)
    comps["ce_A"], comps["dice_A"] = L.ce_loss(out_A.logits, y), L.dice_loss(p_A, y)
    comps["ce_B"], comps["dice_B"] = L.ce_loss(out_B.logits, y), L.dice_loss(p_B, y)
    if tg.cr:
        m = disagreement_mask(p_A, p_B, config.lam, tg.disagreement_mode)
        comps["cr_A"] = L.cr_term(p_A, y, m, weights.epsilon, tg.cr_distance)
        comps["cr_B"] = L.cr_term(p_B, y, m, weights.epsilon, tg.cr_distance)

    if unlabeled is not None and tg.any_unsupervised:
        u_A = state.net_A(unlabeled.volumes)
        u_B = state.net_B(unlabeled.volumes)
        q_A, q_B = softmax(u_A.logits.detach()), softmax(u_B.logits.detach())
        ent_A, ent_B = entropy_map(q_A), entropy_map(q_B)
        th = percentile_thresholds(ent_A, ent_B, config.gamma)
        if tg.cps:
            comps["l_cps"] = L.cps_loss(u_A.logits, u_B.logits)
        if tg.efs:
            pseudo_A = efs_pseudo_labels(q_A, ent_A, ent_B, th)
            pseudo_B = efs_pseudo_labels(q_B, ent_A, ent_B, th)
            flags["efs_all_ignore"] = bool(torch.all(pseudo_A == IGNORE))
            comps["l_efs"] = L.efs_ce_loss(u_B.logits, pseudo_A) + L.efs_ce_loss(u_A.logits, pseudo_B)
        if tg.ue:
            comps["l_une"] = L.une_loss(u_A.logits, u_B.logits, config.T_p)
        if tg.pgl:
            rel = reliability_mask(q_A, q_B, ent_A, ent_B, th)
            lab_A, lab_B = argmax_labels(q_A), argmax_labels(q_B)
            subsets = class_subsets(rel, lab_A)
            f_A, f_B = u_A.features, u_B.features
            if config.normalize_features:
                f_A, f_B = F.normalize(f_A, dim=1), F.normalize(f_B, dim=1)
            protos_A = compute_prototypes(f_A, subsets.reliable_fg, subsets.reliable_bg)
            protos_B = compute_prototypes(f_B, subsets.reliable_fg, subsets.reliable_bg)
            comps["l_c"], flags["prototype_undefined"] = L.contrastive_loss(
                f_A, f_B, subsets, protos_A, protos_B, lab_A, lab_B, tg.contrastive_third_term
            )
    for name in L.COMPONENTS:
        t = comps.get(name)
        if t is not None and not torch.isfinite(t):
            raise FloatingPointError(f"non-finite loss component {name} at iteration {state.t}")
    return L.total_loss(comps, weights, tg, flags)


def train_step(state: TrainState, labeled: Batch, unlabeled: Batch | None, config: TrainConfig):
    """One SGD step on both subnets from the shared total loss. Mutates and returns ``state``."""
    lr = lr_at(state.t, config)
    weights = config.weights(state.t)
    params = named_params(state.net_A, state.net_B)
    for p in params.values():
        p.grad = None
    state.net_A.train()
    state.net_B.train()
    report = compute_losses(state, labeled, unlabeled, config, weights)
    if report.loss.requires_grad:
        report.loss.backward()
    SGD(params, config.momentum, config.weight_decay, state.buffers).step(lr)
    for k, p in params.items():
        if not torch.all(torch.isfinite(p)):
            raise FloatingPointError(f"parameter {k} became non-finite at iteration {state.t}")
    state.t += 1
    return state, report


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path: Path, rows, append: bool):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        if not append:
            w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, 0)) for k in LOG_FIELDS})


def _truncate_log(path: Path, upto: int):
    """Keep only rows with iter < upto (used when resuming)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["iter"]) < upto]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("iter_*.ckpt"))
    return ckpts[-1] if ckpts else None


def run_training(config: TrainConfig, cases, manifest: SplitManifest, run_dir, resume: bool = False,
                 stop_at: int | None = None, evaluate=None) -> Path:
    """Run ``config.max_iters`` steps, writing config, log and checkpoints under ``run_dir``.

    ``stop_at`` ends early after that many total steps (the checkpoint written
    there can be resumed). ``evaluate`` is called as ``evaluate(state, run_dir)``
    once the run completes.
    """
    torch.use_deterministic_algorithms(True)
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    case_map = {c.id: c for c in cases}
    missing = [i for i in manifest.labeled_ids + manifest.unlabeled_ids if i not in case_map]
    if missing:
        raise FileNotFoundError(f"manifest references cases missing from the dataset: {missing[:5]}")
    if not manifest.labeled_ids:
        raise ValueError("manifest has no labeled cases")
    (run_dir / "train_config.json").write_text(json.dumps(config.to_json(), indent=1, sort_keys=True) + "\n")
    (run_dir / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1) + "\n")
    log_path = run_dir / "loss_log.csv"

    ckpt = latest_checkpoint(run_dir) if resume else None
    if ckpt is not None:
        state = TrainState.load(ckpt)
        log.info("resuming from %s at iteration %d", ckpt, state.t)
        if log_path.exists():
            _truncate_log(log_path, state.t)
        else:
            _write_rows(log_path, [], append=False)
    else:
        state = TrainState.fresh(config)
        _write_rows(log_path, [], append=False)

    end = config.max_iters if stop_at is None else min(stop_at, config.max_iters)
    pending = []
    while state.t < end:
        labeled, unlabeled = make_batches(case_map, manifest, config, state.t)
        state, report = train_step(state, labeled, unlabeled, config)
        row = report.row()
        row.update(iter=state.t - 1, lr=lr_at(state.t - 1, config))
        pending.append(row)
        if state.t % 50 == 0:
            log.info("iter %d total %.4f", state.t, report.total)
        if state.t % config.checkpoint_every == 0 or state.t == end:
            _write_rows(log_path, pending, append=True)
            pending = []
            state.save(ckpt_dir / f"iter_{state.t:06d}.ckpt")
    _write_rows(log_path, pending, append=True)
    if state.t >= config.max_iters:
        state.save(run_dir / "final.ckpt")
        if evaluate is not None:
            evaluate(state, run_dir)
    return run_dir
