import csv
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from dualseg.data import Case
from dualseg.evaluation import (
    CaseMetrics,
    InferencePlan,
    MetricReport,
    UndefinedMetricError,
    case_metrics,
    dice_jaccard,
    evaluate_split,
    sliding_window_predict,
    surface_distances,
    window_starts,
)
from dualseg.nets import SubnetConfig, SubnetOutput, init_subnet
from dualseg.volume import LabelMask, Volume, softmax


class Oracle(torch.nn.Module):
    """Logits that reproduce the ground truth from the input sign."""

    def __init__(self, value=None):
        super().__init__()
        self.w = torch.nn.Parameter(torch.ones(()))
        self.value = value

    def forward(self, x):
        x = x.reshape((-1, 1) + x.shape[-3:])
        fg = (x > 0).to(x.dtype) if self.value is None else torch.full_like(x, self.value)
        logits = torch.cat([-(fg * 2 - 1), fg * 2 - 1], dim=1) * 10 * self.w
        return SubnetOutput(logits, x)


def test_window_starts():
    assert window_starts(10, 4, 3) == [0, 3, 6]
    assert window_starts(10, 4, 4) == [0, 4, 6]
    assert window_starts(8, 8, 2) == [0]
    with pytest.raises(ValueError):
        window_starts(3, 4, 1)


def test_plan_validation():
    with pytest.raises(ValueError):
        InferencePlan((8, 8, 8), (9, 8, 8))


def test_full_window_equals_direct_forward():
    net = init_subnet(SubnetConfig(arch="vnet-style", base_channels=2, feature_dim=2, depth=2), 0)
    x = np.random.default_rng(0).normal(size=(16, 12, 8)).astype(np.float32)
    stitched = sliding_window_predict(net, Volume(x), InferencePlan((16, 12, 8), (16, 12, 8)))
    with torch.no_grad():
        net.eval()
        direct = softmax(net(torch.from_numpy(x)[None, None]).logits)[0].double().numpy()
    assert np.array_equal(stitched, direct)


@pytest.mark.parametrize("stride", [(1, 1, 1), (3, 2, 5), (8, 8, 8)])
def test_constant_network_gives_constant_map(stride):
    x = np.random.default_rng(1).normal(size=(20, 16, 12)).astype(np.float32)
    probs = sliding_window_predict(Oracle(value=1.0), Volume(x), InferencePlan((8, 8, 8), stride))
    assert np.allclose(probs[1], probs[1].flat[0], rtol=0, atol=1e-15)


def test_no_overlap_partition():
    x = np.sign(np.random.default_rng(2).normal(size=(16, 8, 8))).astype(np.float32)
    probs = sliding_window_predict(Oracle(), Volume(x), InferencePlan((8, 8, 8), (8, 8, 8)))
    expected = softmax(Oracle()(torch.from_numpy(x)).logits)[0].double().detach().numpy()
    assert np.allclose(probs, expected, atol=1e-12)


def test_window_larger_than_volume():
    with pytest.raises(ValueError):
        sliding_window_predict(Oracle(), Volume(np.zeros((4, 4, 4), np.float32)), InferencePlan((8, 4, 4), (8, 4, 4)))


def test_dice_jaccard_examples():
    m = np.zeros((4, 4, 4), np.uint8)
    m[:2, :2, :2] = 1
    assert dice_jaccard(m, m) == (100.0, 100.0)
    d = np.zeros_like(m)
    d[2:, 2:, 2:] = 1
    assert dice_jaccard(m, d) == (0.0, 0.0)
    half = np.zeros_like(m)
    half[1:3, :2, :2] = 1
    dice, jac = dice_jaccard(m, half)
    assert dice == 50.0 and jac == pytest.approx(100 / 3, rel=1e-15)
    z = np.zeros_like(m)
    assert dice_jaccard(z, z) == (100.0, 100.0)
    with pytest.raises(ValueError):
        dice_jaccard(m, m[:2])


def test_surface_examples():
    m = np.zeros((8, 8, 8), np.uint8)
    m[2:6, 2:6, 2:6] = 1
    assert surface_distances(m, m) == (0.0, 0.0)
    a, b = np.zeros((8, 3, 3), np.uint8), np.zeros((8, 3, 3), np.uint8)
    a[1, 1, 1], b[4, 1, 1] = 1, 1
    assert surface_distances(a, b) == (3.0, 3.0)


def test_surface_border_counts_as_background():
    full = np.ones((3, 3, 3), np.uint8)
    single = np.zeros((3, 3, 3), np.uint8)
    single[1, 1, 1] = 1
    # every voxel of a full grid except the centre touches the border
    hd, asd = surface_distances(full, single)
    assert hd > 0 and asd > 0


def test_surface_empty_mask_is_undefined():
    m = np.zeros((4, 4, 4), np.uint8)
    with pytest.raises(UndefinedMetricError):
        surface_distances(m, m)
    row = case_metrics("x", m, m)
    assert row.failed and row.dice == 100.0 and row.hd95 is None


@pytest.mark.parametrize("seed", range(12))
def test_surface_matches_all_pairs_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(n) for n in rng.integers(3, 13, size=3))
    p = rng.random(shape) < rng.uniform(0.1, 0.6)
    g = rng.random(shape) < rng.uniform(0.1, 0.6)
    p.flat[0] = g.flat[-1] = True
    hd, asd = surface_distances(p, g)
    ref_hd, ref_asd, ref_max = oracles.surface_distance_pair(p, g)
    assert hd == pytest.approx(ref_hd, rel=1e-10, abs=1e-12)
    assert asd == pytest.approx(ref_asd, rel=1e-10, abs=1e-12)
    assert hd <= ref_max + 1e-12 and asd <= ref_max + 1e-12


masks = arrays(np.bool_, (5, 4, 3))


@settings(max_examples=40, deadline=None)
@given(masks, masks)
def test_metric_symmetry_and_ordering(p, g):
    d1, j1 = dice_jaccard(p, g)
    d2, j2 = dice_jaccard(g, p)
    assert (d1, j1) == (d2, j2)
    assert 0 <= j1 <= d1 <= 100
    if p.any() and g.any():
        a = surface_distances(p, g)
        b = surface_distances(g, p)
        assert a[0] == pytest.approx(b[0], abs=1e-12) and a[1] == pytest.approx(b[1], abs=1e-12)
        assert a[0] >= 0 and a[1] >= 0


def test_spacing_aware_mode_scales():
    a, b = np.zeros((8, 3, 3), np.uint8), np.zeros((8, 3, 3), np.uint8)
    a[1, 1, 1], b[4, 1, 1] = 1, 1
    assert surface_distances(a, b, spacing=(2.0, 1.0, 1.0)) == (6.0, 6.0)


def _case(cid, seed):
    rng = np.random.default_rng(seed)
    lab = np.zeros((16, 16, 8), np.uint8)
    lo = rng.integers(2, 6, size=3)
    lab[lo[0]:lo[0] + 6, lo[1]:lo[1] + 6, 1:6] = 1
    vol = np.where(lab == 1, 1.0, -1.0).astype(np.float32)
    return Case(cid, Volume(vol), LabelMask(lab))


def test_perfect_network_scores_100():
    cases = [_case(f"c{i}", i) for i in range(3)]
    rep = evaluate_split(Oracle(), Oracle(), cases, InferencePlan((8, 8, 8), (4, 4, 4)))
    assert all(r.dice == 100.0 and r.hd95 == 0.0 for r in rep.per_case)
    assert rep.mean["dice"] == 100.0 and rep.stderr["dice"] == 0.0


def test_single_model_modes():
    cases = [_case("c0", 0)]
    bad = Oracle(value=0.0)
    assert evaluate_split(Oracle(), bad, cases, InferencePlan((8, 8, 8), (8, 8, 8)), mode="A").mean["dice"] == 100.0
    assert evaluate_split(Oracle(), bad, cases, InferencePlan((8, 8, 8), (8, 8, 8)), mode="B").mean["dice"] == 0.0
    with pytest.raises(ValueError):
        evaluate_split(Oracle(), bad, cases, InferencePlan(), mode="C")


def test_report_statistics_and_files(tmp_path):
    rows = [CaseMetrics("b", 90.0, 80.0, 1.0, 0.5), CaseMetrics("a", 80.0, 70.0, 2.0, 1.0)]
    rep = MetricReport.from_cases(rows)
    assert [r.case_id for r in rep.per_case] == ["a", "b"]
    assert rep.mean["dice"] == 85.0 and rep.stderr["dice"] == pytest.approx(5.0)
    assert rep.cell("dice") == "85.00 ± 5.00"
    single = MetricReport.from_cases(rows[:1])
    assert single.stderr["dice"] == 0.0
    jpath, cpath = rep.write(tmp_path)
    assert json.loads(jpath.read_text())["num_cases"] == 2
    with open(cpath) as fh:
        table = list(csv.reader(fh))
    assert table[0][:5] == ["case_id", "Dice(%)", "Jaccard(%)", "95HD(voxel)", "ASD(voxel)"] and len(table) == 3
