import numpy as np
import pytest

from hivesdf import tape as T
from hivesdf.grid import FeatureVolume, init_volume
from hivesdf.loss import (LossError, LossReport, LossWeights, color_loss, dense_pairs, eikonal_loss,
                          normal_loss, total_loss, tv_loss)
from hivesdf.sparse import NodeSet, build_sparse
from hivesdf.tape import Parameter, Tape

from conftest import constant_sdf, linear_sdf, probe_field


def brute_tv(grid):
    """Sum of |differences| over axis-adjacent pairs of a (z, y, x, C) grid."""
    return sum(np.abs(np.diff(grid, axis=a)).sum() for a in range(3))


def test_color_loss_examples():
    t = Tape()
    x = np.random.default_rng(0).uniform(size=(4, 3))
    assert color_loss(t.const(x), x).value == 0.0
    assert color_loss(t.const(np.zeros((4, 3))), np.ones((4, 3))).value == 1.0
    assert color_loss(t.const(np.zeros((4, 3))), np.ones((4, 3)), "l2").value == 1.0


def test_color_loss_shape_mismatch():
    with pytest.raises(ValueError):
        color_loss(Tape().const(np.zeros((4, 3))), np.zeros((3, 3)))


def test_eikonal_examples(rng):
    pts = Tape().const(rng.uniform(-0.8, 0.8, (50, 3)))
    u = np.array([2.0, -1.0, 2.0]) / 3.0
    assert eikonal_loss(probe_field(linear_sdf(u)), pts).value <= 1e-10
    assert eikonal_loss(probe_field(linear_sdf([1.0, 0, 0], scale=2.0)), pts).value == pytest.approx(1.0, abs=1e-10)
    assert eikonal_loss(probe_field(constant_sdf()), pts).value == 1.0


def test_tv_constant_is_zero():
    vol = FeatureVolume(4, 2, Parameter(np.full((64, 2), 0.3)))
    assert tv_loss(Tape(), [vol]).value == 0.0


def test_tv_single_node_example():
    vals = np.zeros((8, 1))
    vals[0] = 1.0
    vol = FeatureVolume(2, 1, Parameter(vals))
    assert tv_loss(Tape(), [vol], normalize=False).value == 3.0
    assert tv_loss(Tape(), [vol]).value == pytest.approx(3.0 / 12.0, abs=1e-15)


def test_tv_matches_brute_force(rng):
    vol = init_volume(5, 3, 1.0, rng)
    assert tv_loss(Tape(), [vol], normalize=False).value == pytest.approx(brute_tv(vol.grid()), rel=1e-13)


def test_tv_isolated_sparse_node_is_zero():
    sp = build_sparse(NodeSet([(1, 1, 1)], 4), 4, 2, 1.0, np.random.default_rng(0))
    assert tv_loss(Tape(), [], [sp]).value == 0.0


def test_sparse_tv_matches_masked_dense(rng):
    n = 5
    valid = NodeSet(rng.integers(0, n, (60, 3)), n)
    sp = build_sparse(valid, n, 2, 1.0, rng)
    grid = np.full((n ** 3, 2), np.nan)
    grid[valid.indices] = sp.embedding.view()[:-1]
    grid = grid.reshape(n, n, n, 2)
    ref = sum(np.nansum(np.abs(np.diff(grid, axis=a))) for a in range(3))
    assert tv_loss(Tape(), [], [sp], normalize=False).value == pytest.approx(ref, rel=1e-13)


def test_dense_pairs_are_adjacent(rng):
    n = 6
    pairs = dense_pairs(n, 500, rng)
    a = np.stack([pairs[:, 0] % n, pairs[:, 0] // n % n, pairs[:, 0] // (n * n)], 1)
    b = np.stack([pairs[:, 1] % n, pairs[:, 1] // n % n, pairs[:, 1] // (n * n)], 1)
    d = b - a
    assert np.all(d.sum(axis=1) == 1) and np.all(d >= 0) and np.all(b < n)


def test_sampled_tv_is_unbiased(rng):
    vol = init_volume(6, 2, 1.0, rng)
    full = tv_loss(Tape(), [vol]).value
    draws = [tv_loss(Tape(), [vol], max_pairs=100, rng=rng).value for _ in range(400)]
    se = np.std(draws) / np.sqrt(len(draws))
    assert abs(np.mean(draws) - full) < 4 * se


def test_sampled_tv_needs_rng():
    with pytest.raises(ValueError):
        tv_loss(Tape(), [init_volume(3, 1)], max_pairs=5)


def test_tv_gradient_is_sign_sum():
    vals = np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).reshape(8, 1)
    vol = FeatureVolume(2, 1, Parameter(vals))
    t = Tape()
    T.backward(t, tv_loss(t, [vol], normalize=False))
    # node 1 differs from its 3 neighbours: +3; each of those neighbours: -1
    g = vol.features.grad
    assert g[1] == 3.0 and g[0] == -1.0 and g[3] == -1.0 and g[5] == -1.0 and g[7] == 0.0


def test_normal_loss_examples():
    t = Tape()
    assert normal_loss(t.const(np.zeros((3, 3)))).value == 0.0
    assert normal_loss(t.const([[3.0, 4.0, 0.0]])).value == 5.0
    assert normal_loss(t.const([[1.0, 0.0, 0.0], [0.0, 3.0, 0.0]])).value == 2.0


def test_total_loss_examples():
    t = Tape()
    comps = {k: t.const(1.0) for k in ("color", "eikonal", "tv", "normal")}
    total, report = total_loss(comps, LossWeights(0.1, 0.01, 0.001))
    assert total.value == pytest.approx(1.111, abs=1e-15)
    assert report.color == 1.0
    total, _ = total_loss({"color": t.const(0.7), "tv": t.const(5.0)}, LossWeights(0.0, 0.0, 0.0))
    assert total.value == 0.7


def test_total_loss_non_finite_names_component():
    t = Tape()
    with pytest.raises(LossError, match="eikonal") as info:
        total_loss({"color": t.const(0.5), "eikonal": t.const(np.nan)}, LossWeights())
    assert "color=0.5" in str(info.value)


def test_loss_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(lambda_eik=-1.0)


def test_report_tsv_round_trips():
    r = LossReport(0.1, 0.2, 1 / 3, 0.4, 0.5)
    fields = r.tsv(7).split("\t")
    assert fields[0] == "7" and float(fields[3]) == 1 / 3
