"""``dualseg`` command line: generate-data, train, eval, gradcheck and sweep.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Relative output paths resolve under ``$DUALSEG_OUTPUT_ROOT`` (default ``runs``).
"""

from __future__ import annotations

import argparse
import csv
import filecmp
import importlib
import json
import logging
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as C
from . import plotting
from .data import FormatError, GenerationError, SplitManifest, generate_dataset, load_dataset, make_train_test_split, save_dataset
from .evaluation import evaluate_split
from .gradcheck import TOLERANCE, run_gradchecks
from .losses import Toggles
from .trainer import TrainState, read_log, run_training

log = logging.getLogger("dualseg")

EXPERIMENT_CONFIG = "experiment_config.json"

SWEEP_TABLES = {
    "4": "component ablation",
    "5": "consistency distance (mse vs kl)",
    "6": "contrastive third term",
    "7": "entropy percentile gamma",
}

ABLATION_VARIANTS = {
    "supervised-only": Toggles.preset("supervised-only"),
    "cps-only": Toggles.preset("cps-only"),
    "efs-only": Toggles.preset("efs-only"),
    "cce-only": Toggles.preset("cce-only"),
    "cce+pgl": Toggles(ue=False, cr=False),
    "cce+pgl+ue": Toggles(cr=False),
    "full": Toggles(),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _resolve(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else C.output_root() / p


def _data_dir(cfg) -> Path:
    return _resolve(cfg["data.path"] or "data")


# ---------------------------------------------------------------- generate-data


def cmd_generate_data(cfg: dict, out=None, check: bool = False) -> Path:
    """Write the dataset described by ``cfg``; with ``check`` verify an existing copy byte for byte."""
    spec = C.dataset_spec(cfg)
    out = Path(out) if out is not None else _data_dir(cfg)
    cases = generate_dataset(spec)
    if check:
        if not out.exists():
            raise FileNotFoundError(f"nothing to check at {out}")
        with tempfile.TemporaryDirectory() as tmp:
            save_dataset(cases, tmp, spec)
            names = sorted(p.name for p in Path(tmp).iterdir())
            match, mismatch, errors = filecmp.cmpfiles(tmp, out, names, shallow=False)
        if mismatch or errors:
            raise RuntimeError(f"dataset at {out} differs from a fresh generation: {sorted(mismatch + errors)[:5]}")
        print(f"{out}: {len(match)} files identical to a fresh generation")
    else:
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(cases, out, spec)
    fg = np.array([c.foreground_fraction for c in cases])
    print(f"cases: {len(cases)}  shape: {spec.volume_shape}  style: {spec.organ_style}")
    print(f"foreground fraction: mean {fg.mean():.4f}  min {fg.min():.4f}  max {fg.max():.4f}")
    return out


# ---------------------------------------------------------------- train / eval


def _load_cases(cfg):
    path = cfg["data.path"]
    if path is None:
        return generate_dataset(C.dataset_spec(cfg))
    root = _resolve(path)
    if not root.exists():
        raise FileNotFoundError(f"dataset directory {root} does not exist (run generate-data first)")
    return load_dataset(root)


def _manifest(cfg, cases) -> SplitManifest:
    return make_train_test_split([c.id for c in cases], cfg["split.labeled_ratio"], cfg["split.test_fraction"], cfg["split.seed"])


def _default_run_dir(cfg) -> Path:
    if cfg["output_dir"]:
        return _resolve(cfg["output_dir"])
    return _resolve(Path("train") / f"seed{cfg['train.seed']}")


def _write_eval(report, rows, out_dir: Path, stem: str):
    jpath, cpath = report.write(out_dir, stem)
    if rows:
        plotting.training_curves(rows, out_dir / "training_curves.png")
    if report.per_case:
        plotting.metric_bars(report, out_dir / f"{stem}_bars.png")
    return jpath, cpath


def cmd_train(cfg: dict, run_dir=None, resume: bool = False, evaluate: bool = True, stop_at=None) -> Path:
    C.validate(cfg)
    tc = C.train_config(cfg)
    cases = _load_cases(cfg)
    manifest = _manifest(cfg, cases)
    run_dir = Path(run_dir) if run_dir is not None else _default_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    C.dump(cfg, run_dir / EXPERIMENT_CONFIG)
    case_map = {c.id: c for c in cases}
    test_cases = [case_map[i] for i in manifest.test_ids or []]

    def final_eval(state, rd):
        if not test_cases:
            return
        report = evaluate_split(state.net_A, state.net_B, test_cases, C.inference_plan(cfg), cfg["eval.mode"], cfg["eval.spacing_aware"])
        _write_eval(report, read_log(Path(rd) / "loss_log.csv"), Path(rd), "final_metrics")
        print(f"test dice {report.cell('dice')}  jaccard {report.cell('jaccard')}  hd95 {report.cell('hd95')}  asd {report.cell('asd')}")

    run_training(tc, cases, manifest, run_dir, resume=resume, stop_at=stop_at, evaluate=final_eval if evaluate else None)
    print(f"run directory: {run_dir}")
    return run_dir


def _checkpoint(run_dir: Path) -> Path:
    for name in ("best.ckpt", "final.ckpt"):
        if (run_dir / name).exists():
            return run_dir / name
    raise FileNotFoundError(f"no best.ckpt or final.ckpt in {run_dir}")


def cmd_eval(run_dir, cfg_overrides: dict | None = None, split: str = "test") -> Path:
    run_dir = Path(run_dir)
    if not run_dir.exists():
        run_dir = _resolve(run_dir)
    snapshot = run_dir / EXPERIMENT_CONFIG
    if not snapshot.exists():
        raise FileNotFoundError(f"{snapshot} not found; is {run_dir} a training run directory?")
    cfg = C.load(snapshot, cfg_overrides)
    C.validate(cfg)
    ckpt = _checkpoint(run_dir)
    state = TrainState.load(ckpt)
    manifest = SplitManifest.from_json(json.loads((run_dir / "manifest.json").read_text()))
    ids = {"test": manifest.test_ids or [], "labeled": manifest.labeled_ids, "unlabeled": manifest.unlabeled_ids}[split]
    if not ids:
        raise ValueError(f"split {split!r} is empty for {run_dir}")
    case_map = {c.id: c for c in _load_cases(cfg)}
    report = evaluate_split(state.net_A, state.net_B, [case_map[i] for i in ids], C.inference_plan(cfg), cfg["eval.mode"], cfg["eval.spacing_aware"])
    out_dir = run_dir / f"eval_{split}"
    log_path = run_dir / "loss_log.csv"
    _write_eval(report, read_log(log_path) if log_path.exists() else [], out_dir, "metrics")
    print(f"{ckpt.name} on {split} ({len(ids)} cases): dice {report.cell('dice')}  jaccard {report.cell('jaccard')}  "
          f"hd95 {report.cell('hd95')}  asd {report.cell('asd')}")
    return out_dir


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(seed: int = 0, tolerance: float = TOLERANCE, losses_module: str | None = None) -> bool:
    module = importlib.import_module(losses_module) if losses_module else None
    rows = run_gradchecks(seed, tolerance, module) if module else run_gradchecks(seed, tolerance)
    print(f"{'loss':<12} {'dir':<4} {'rel_error':>12}  status")
    for r in rows:
        status = "pass" if r.passed else f"FAIL {r.error}".rstrip()
        print(f"{r.loss:<12} {r.direction:<4} {r.rel_error:12.3e}  {status}")
    failed = sorted({r.loss for r in rows if not r.passed})
    print(f"{len(rows) - sum(not r.passed for r in rows)}/{len(rows)} checks passed" + (f"; failing: {', '.join(failed)}" if failed else ""))
    return not failed


# ---------------------------------------------------------------- sweep


def sweep_variants(table: str, gammas=None, ratios=None) -> list[tuple[str, dict]]:
    """(variant name, config updates) for one of the ablation tables."""
    if table == "4":
        return [(name, {f"toggles.{k}": v for k, v in asdict(t).items()}) for name, t in ABLATION_VARIANTS.items()]
    if table == "5":
        return [(f"{d}@{r:g}", {"toggles.cr_distance": d, "split.labeled_ratio": r}) for r in ratios or [0.1] for d in ("kl", "mse")]
    if table == "6":
        return [("without-third-term", {"toggles.contrastive_third_term": False}), ("with-third-term", {"toggles.contrastive_third_term": True})]
    if table == "7":
        return [(f"gamma={g:g}", {"train.gamma": float(g)}) for g in gammas or range(10, 100, 10)]
    raise UsageError(f"unknown sweep table {table!r}; choose from {sorted(SWEEP_TABLES)}")


def cmd_sweep(cfg: dict, table: str, seeds, out_dir=None, gammas=None, ratios=None) -> Path:
    variants = sweep_variants(table, gammas, ratios)
    out_dir = Path(out_dir) if out_dir is not None else _resolve(Path("sweeps") / f"table{table}")
    out_dir.mkdir(parents=True, exist_ok=True)
    per_run, summary = [], []
    for name, updates in variants:
        dices = []
        for seed in seeds:
            run_cfg = C.apply(cfg, {**updates, "train.seed": seed, "split.seed": seed})
            rd = out_dir / name.replace("=", "_").replace("@", "_") / f"seed{seed}"
            cmd_train(run_cfg, rd)
            m = json.loads((rd / "final_metrics.json").read_text())
            per_run.append({"variant": name, "seed": seed, **{k: m["mean"][k] for k in ("dice", "jaccard", "hd95", "asd")}})
            dices.append(m["mean"]["dice"])
        arr = np.array(dices)
        summary.append({"variant": name, "dice": float(arr.mean()),
                        "dice_stderr": float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0, "seeds": len(arr)})
    with open(out_dir / "sweep_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "seed", "dice", "jaccard", "hd95", "asd"])
        w.writeheader()
        w.writerows(per_run)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "dice", "dice_stderr", "seeds"])
        w.writeheader()
        w.writerows(summary)
    plotting.sweep_bars(summary, out_dir / "sweep_dice.png")
    for row in summary:
        print(f"{row['variant']:<22} dice {row['dice']:.2f} ± {row['dice_stderr']:.2f}")
    return out_dir


# ---------------------------------------------------------------- argument parsing


def _add_config_args(p):
    p.add_argument("--config", help="flat JSON config file with dotted keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable, last wins)")


def _add_train_flags(p):
    p.add_argument("--toggle", choices=sorted(ABLATION_VARIANTS) + ["pgl-ue-cr", "no-cr", "no-pgl", "no-ue"],
                   help="component preset applied before --set overrides")
    p.add_argument("--labeled-ratio", type=float, help="fraction of training cases with labels")
    p.add_argument("--gamma", type=float, help="entropy percentile for the pseudo-label filter")
    p.add_argument("--seed", type=int, help="seed for initialisation, batching and the split")
    p.add_argument("--max-iters", type=int, help="number of training iterations")
    p.add_argument("--data", help="dataset directory (default: generate in memory from data.* keys)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualseg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="write the synthetic dataset to disk")
    _add_config_args(p)
    p.add_argument("--out", help="output directory (default: data.path or $DUALSEG_OUTPUT_ROOT/data)")
    p.add_argument("--check", action="store_true", help="verify an existing dataset is byte-identical instead of writing")

    p = sub.add_parser("train", help="train both subnets and evaluate on the held-out split")
    _add_config_args(p)
    _add_train_flags(p)
    p.add_argument("--run-dir", help="run directory (default: output_dir or $DUALSEG_OUTPUT_ROOT/train/seed<seed>)")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in the run directory")
    p.add_argument("--no-eval", action="store_true", help="skip the final evaluation")
    p.add_argument("--stop-at", type=int, metavar="ITER", help="stop after this many steps, leaving a resumable checkpoint")

    p = sub.add_parser("eval", help="score the best (or final) checkpoint of a run")
    p.add_argument("run_dir")
    p.add_argument("--split", choices=("test", "labeled", "unlabeled"), default="test")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override eval.* or data.* keys")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=TOLERANCE)
    p.add_argument("--losses-module", help="import path of an alternative losses module (for testing the harness)")

    p = sub.add_parser("sweep", help="run an ablation grid and collate sweep.csv")
    _add_config_args(p)
    _add_train_flags(p)
    p.add_argument("--table", required=True, choices=sorted(SWEEP_TABLES), help="; ".join(f"{k}: {v}" for k, v in SWEEP_TABLES.items()))
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--gammas", type=float, nargs="+", help="gamma values for the gamma sweep, --table 7 (default 10 20 ... 90)")
    p.add_argument("--ratios", type=float, nargs="+", help="labeled ratios for the CR distance sweep, --table 5 (default 0.1)")
    p.add_argument("--out", help="sweep directory")
    return parser


def config_from_args(args) -> dict:
    flags = {}
    if getattr(args, "toggle", None):
        flags.update({f"toggles.{k}": v for k, v in asdict(ABLATION_VARIANTS.get(args.toggle) or Toggles.preset(args.toggle)).items()})
    for attr, key in (("labeled_ratio", "split.labeled_ratio"), ("gamma", "train.gamma"), ("max_iters", "train.max_iters"), ("data", "data.path")):
        if getattr(args, attr, None) is not None:
            flags[key] = getattr(args, attr)
    if getattr(args, "seed", None) is not None:
        flags["train.seed"] = flags["split.seed"] = args.seed
    flags.update(C.parse_assignments(args.set))
    cfg = C.load(args.config, flags)
    C.validate(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "generate-data":
            cmd_generate_data(config_from_args(args), args.out, args.check)
        elif args.command == "train":
            cmd_train(config_from_args(args), args.run_dir, args.resume, not args.no_eval, args.stop_at)
        elif args.command == "eval":
            cmd_eval(args.run_dir, C.parse_assignments(args.set), args.split)
        elif args.command == "gradcheck":
            return 0 if cmd_gradcheck(args.seed, args.tolerance, args.losses_module) else 2
        elif args.command == "sweep":
            cmd_sweep(config_from_args(args), args.table, args.seeds, args.out, args.gammas, args.ratios)
    except (C.ConfigError, UsageError) as exc:
        print(f"dualseg: error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, FormatError, GenerationError, FloatingPointError, RuntimeError, ValueError, OSError) as exc:
        print(f"dualseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
