import json
import math

import pytest
import torch

from dualseg import losses as L
from dualseg.data import DatasetSpec, generate_dataset, make_split
from dualseg.trainer import (
    SGD,
    TrainConfig,
    TrainState,
    batch_ids,
    lambda_c_at,
    latest_checkpoint,
    lr_at,
    make_batches,
    named_params,
    read_log,
    run_training,
    train_step,
)

TINY = dict(crop_shape=(16, 16, 8), base_channels=2, feature_dim=4, depth=2, labeled_per_batch=1, unlabeled_per_batch=1)


@pytest.fixture(scope="module")
def cases():
    return generate_dataset(DatasetSpec(num_cases=6, volume_shape=(20, 20, 16), seed=1))


@pytest.fixture(scope="module")
def manifest(cases):
    return make_split([c.id for c in cases], 0.34, seed=0)


def test_lambda_c_examples():
    assert lambda_c_at(0, 100) == pytest.approx(0.1 * math.e**4, rel=1e-15)
    assert lambda_c_at(0, 100) == pytest.approx(5.459815003314424, rel=1e-15)
    assert lambda_c_at(100, 100) == 0.1
    assert lambda_c_at(0, 100, "gaussian-rampup") == pytest.approx(0.0006737946999085467, rel=1e-14)
    assert lambda_c_at(100, 100, "gaussian-rampup") == 0.1


def test_lambda_c_errors():
    with pytest.raises(ValueError):
        lambda_c_at(101, 100)
    with pytest.raises(ValueError):
        lambda_c_at(5, 100, "cosine")


def test_lambda_c_monotone():
    lit = [lambda_c_at(t, 50) for t in range(51)]
    ramp = [lambda_c_at(t, 50, "gaussian-rampup") for t in range(51)]
    assert lit == sorted(lit, reverse=True)
    assert ramp == sorted(ramp)


def test_lr_examples():
    cfg = TrainConfig(max_iters=6000, step_size=2500)
    assert lr_at(0, cfg) == 0.01
    assert lr_at(2499, cfg) == 0.01
    assert lr_at(2500, cfg) == pytest.approx(0.001, rel=1e-15)
    assert lr_at(5000, cfg) == pytest.approx(0.0001, rel=1e-15)
    poly = TrainConfig(max_iters=1000, lr_schedule="poly")
    assert lr_at(0, poly) == 0.01
    assert lr_at(500, poly) == pytest.approx(0.01 * 0.5358867312681466, rel=1e-14)
    assert lr_at(1000, poly) == 0.0


@pytest.mark.parametrize("kw", [dict(max_iters=0), dict(labeled_per_batch=0), dict(lr_schedule="cosine"), dict(lambda_c_schedule="x")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_json_round_trip():
    cfg = TrainConfig(gamma=30, toggles=L.Toggles.preset("cps-only"), **TINY)
    again = TrainConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert again == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_json({"gama": 3})


def test_weight_decay_only_step_shrinks_exactly():
    p = torch.nn.Parameter(torch.randn(5, 4, dtype=torch.float64))
    before = p.detach().clone()
    SGD({"p": p}, momentum=0.9, weight_decay=1e-4).step(0.01)
    assert torch.equal(p.detach(), before * (1 - 0.01 * 1e-4))


def test_sgd_momentum_accumulates():
    p = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
    opt = SGD({"p": p}, momentum=0.5, weight_decay=0.0)
    for _ in range(2):
        p.grad = torch.ones(3, dtype=torch.float64)
        opt.step(1.0)
    # buf: 1 then 1.5, so p = -1 - 1.5
    assert torch.allclose(p.detach(), torch.full((3,), -2.5, dtype=torch.float64))


def test_batch_ids_cycle_through_every_case():
    ids = [f"c{i}" for i in range(5)]
    seen = [i for t in range(5) for i in batch_ids(ids, 1, t, seed=0, stream=1)]
    assert sorted(seen) == ids
    assert batch_ids(ids, 2, 7, 3, 1) == batch_ids(ids, 2, 7, 3, 1)


def _state(cfg):
    torch.use_deterministic_algorithms(True)
    return TrainState.fresh(cfg)


def test_train_step_zero_lr_keeps_params(cases, manifest):
    cfg = TrainConfig(base_lr=0.0, max_iters=5, **TINY)
    state = _state(cfg)
    before = {k: p.detach().clone() for k, p in named_params(state.net_A, state.net_B).items()}
    lab, unl = make_batches({c.id: c for c in cases}, manifest, cfg, 0)
    state, report = train_step(state, lab, unl, cfg)
    assert state.t == 1 and math.isfinite(report.total)
    for k, p in named_params(state.net_A, state.net_B).items():
        assert torch.equal(p.detach(), before[k]), k


def test_train_step_deterministic(cases, manifest):
    cfg = TrainConfig(max_iters=5, **TINY)
    cm = {c.id: c for c in cases}
    lab, unl = make_batches(cm, manifest, cfg, 0)
    a, ra = train_step(_state(cfg), lab, unl, cfg)
    b, rb = train_step(_state(cfg), lab, unl, cfg)
    assert ra.row() == rb.row()
    for k, v in a.tensors().items():
        assert torch.equal(v, b.tensors()[k]), k


def test_supervised_only_ignores_unlabeled(cases, manifest):
    cfg = TrainConfig(max_iters=5, toggles=L.Toggles.preset("supervised-only"), **TINY)
    lab, unl = make_batches({c.id: c for c in cases}, manifest, cfg, 0)
    zeros = type(unl)(torch.zeros_like(unl.volumes))
    a, ra = train_step(_state(cfg), lab, unl, cfg)
    b, rb = train_step(_state(cfg), lab, zeros, cfg)
    assert ra.l_cps == ra.l_efs == ra.l_une == ra.l_c == 0.0
    for k, v in a.tensors().items():
        assert torch.equal(v, b.tensors()[k]), k


def test_full_step_reports_every_component(cases, manifest):
    cfg = TrainConfig(max_iters=5, **TINY)
    lab, unl = make_batches({c.id: c for c in cases}, manifest, cfg, 0)
    _, rep = train_step(_state(cfg), lab, unl, cfg)
    row = rep.row()
    for key in ("l_cps", "l_efs", "l_une", "l_cr"):
        assert row[key] > 0, key
    assert abs(rep.total - rep.recompute_total()) < 1e-10


def test_state_round_trip(tmp_path):
    cfg = TrainConfig(**TINY)
    state = _state(cfg)
    state.t = 17
    state.save(tmp_path / "s.ckpt")
    again = TrainState.load(tmp_path / "s.ckpt")
    assert again.t == 17 and again.seed == state.seed
    for k, v in state.tensors().items():
        assert v.numpy().tobytes() == again.tensors()[k].numpy().tobytes(), k


def test_run_single_step(tmp_path, cases, manifest):
    cfg = TrainConfig(max_iters=1, **TINY)
    run_training(cfg, cases, manifest, tmp_path)
    rows = read_log(tmp_path / "loss_log.csv")
    assert len(rows) == 1 and rows[0]["iter"] == 0
    assert (tmp_path / "final.ckpt").exists()
    assert json.loads((tmp_path / "train_config.json").read_text())["max_iters"] == 1


def test_supervised_only_log_all_labeled(tmp_path, cases):
    manifest = make_split([c.id for c in cases], 1.0, seed=0)
    cfg = TrainConfig(max_iters=3, toggles=L.Toggles.preset("supervised-only"), **TINY)
    run_training(cfg, cases, manifest, tmp_path)
    for r in read_log(tmp_path / "loss_log.csv"):
        assert r["l_cps"] == r["l_efs"] == r["l_une"] == r["l_c"] == 0.0


def test_log_total_matches_components(tmp_path, cases, manifest):
    cfg = TrainConfig(max_iters=3, **TINY)
    run_training(cfg, cases, manifest, tmp_path)
    for r in read_log(tmp_path / "loss_log.csv"):
        manual = r["l_s_A"] + r["l_s_B"] + r["lambda_c"] * r["l_c"] + r["l_cps"] + r["l_efs"] + r["l_une"]
        assert abs(manual - r["total"]) < 1e-10


def test_resume_reproduces_log(tmp_path, cases, manifest):
    cfg = TrainConfig(max_iters=4, checkpoint_every=2, **TINY)
    run_training(cfg, cases, manifest, tmp_path / "full")
    run_training(cfg, cases, manifest, tmp_path / "part", stop_at=2)
    assert latest_checkpoint(tmp_path / "part").name == "iter_000002.ckpt"
    assert not (tmp_path / "part" / "final.ckpt").exists()
    run_training(cfg, cases, manifest, tmp_path / "part", resume=True)
    a = (tmp_path / "full" / "loss_log.csv").read_text()
    b = (tmp_path / "part" / "loss_log.csv").read_text()
    assert a == b


def test_missing_cases_error(tmp_path, cases, manifest):
    cfg = TrainConfig(max_iters=1, **TINY)
    with pytest.raises(FileNotFoundError):
        run_training(cfg, cases[:1], manifest, tmp_path)


def test_evaluate_hook_called(tmp_path, cases, manifest):
    seen = []
    run_training(TrainConfig(max_iters=1, **TINY), cases, manifest, tmp_path, evaluate=lambda s, d: seen.append(s.t))
    assert seen == [1]
