import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxelforge import optimize as opt
from voxelforge.dcvae import DcvaeConfig, DcvaeModel
from voxelforge.errors import ShapeError
from voxelforge.labels import LabelStats
from voxelforge.voxel import Dims, VoxelGrid, load_grid


def make_stats(seed=0):
    r = np.random.default_rng(seed)
    v = r.uniform(1, 10, size=(50, 9))
    return LabelStats(v.mean(0), v.std(0), v.min(0), v.max(0)), v


def test_schedule_endpoints_and_constants():
    stats, _ = make_stats()
    s = opt.build_schedule(stats, q=100)
    assert s.rows.shape == (100, 9)
    ramp = slice(4, 9)
    assert np.array_equal(s.rows[0, ramp], stats.max[ramp])
    assert np.array_equal(s.rows[-1, ramp], stats.min[ramp])
    assert np.all(s.rows[:, :4] == stats.mean[:4])
    assert np.all(np.diff(s.rows[:, 8]) < 0)
    assert np.all((s.rows >= stats.min) & (s.rows <= stats.max))
    assert np.allclose(s.normalized, stats.normalize(s.rows))


def test_schedule_custom_policy_and_roundtrip():
    stats, _ = make_stats()
    s = opt.build_schedule(stats, q=5, policy=("constant",) * 9, constant_values=stats.min)
    assert np.all(s.rows == stats.min)
    back = opt.ConditionSchedule.from_dict(json.loads(json.dumps(s.to_dict())))
    assert np.array_equal(back.rows, s.rows) and back.policy == s.policy
    with pytest.raises(ValueError):
        opt.build_schedule(stats, q=1)


def test_change_rate_examples():
    d = Dims(2, 2, 2)
    a = VoxelGrid.empty(d)
    b = VoxelGrid.full(d)
    series, total = opt.material_change_rate([a, a, b, b], d)
    assert series.tolist() == [0.0, 1.0, 0.0] and total == 1.0
    arr = np.array([[0] * 8, [1] + [0] * 7, [1] * 8])
    series, total = opt.material_change_rate(arr, d)
    assert series.tolist() == [1 / 8, 7 / 8]
    with pytest.raises(ShapeError):
        opt.material_change_rate([a, VoxelGrid.empty(Dims(2, 2, 3))], d)
    with pytest.raises(ValueError):
        opt.material_change_rate([a], d)


@given(st.integers(2, 8), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=50, deadline=None)
def test_change_rate_matches_loop(q, seed):
    r = np.random.default_rng(seed)
    arr = (r.random((q, 12)) < 0.5).astype(int)
    series, total = opt.material_change_rate(arr, Dims(2, 3, 2))
    ref = [sum(arr[i][k] != arr[i + 1][k] for k in range(12)) / 12 for i in range(q - 1)]
    assert np.allclose(series, ref) and np.all((series >= 0) & (series <= 1))
    assert total == pytest.approx(sum(ref))


def test_select_optimum_examples():
    s = np.zeros(99)
    s[84] = 0.3  # step i = 85
    s[10] = 0.9  # outside the tail
    assert opt.select_optimum(s, 100, 0.7) == 85
    assert opt.select_optimum(np.zeros(99), 100, 0.7) == 99
    s = np.zeros(99)
    s[19] = s[79] = 0.5
    assert opt.select_optimum(s, 100, 0.7) == 80
    assert opt.select_optimum(s, 100, 0.0) == 80


def test_select_optimum_empty_tail_falls_back():
    s = np.array([0.1, 0.4, 0.2])
    assert opt.select_optimum(s, 4, p_min=1.5) == 2


def test_fnet_constant_target_and_determinism():
    r = np.random.default_rng(0)
    C = r.standard_normal((40, 9))
    Z = np.tile([0.5, -1.0, 2.0], (40, 1))
    cfg = opt.FnetConfig(hidden=(16, 16), epochs=300, batch_size=8, lr=3e-3)
    f = opt.train_fnet(C, Z, cfg)
    assert f.report["mse"] < 1e-2
    assert f.report["latent_variance"] == 0.0
    g = opt.train_fnet(C, Z, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(f.params(), g.params()))


def test_fnet_fits_linear_map(tmp_path):
    r = np.random.default_rng(1)
    C = r.standard_normal((200, 9))
    Z = C @ r.standard_normal((9, 4)) * 0.3
    f = opt.train_fnet(C, Z, opt.FnetConfig(hidden=(32, 32), epochs=150, lr=3e-3))
    assert f.report["relative_mse"] < 0.05
    f.save(tmp_path / "f.nnp")
    back = opt.FnetModel.load(tmp_path / "f.nnp")
    assert np.array_equal(back(C), f(C)) and back.report == f.report
    with pytest.raises(ShapeError):
        f(np.zeros(8))


def test_validate_degenerate_best_design():
    r = np.random.default_rng(2)
    values = r.uniform(1, 5, size=(10, 9))
    retained = np.arange(10)
    best = opt.best_training_design(values, retained)
    rep = opt.validate_optimum(values[best], True, values, np.ones(10, bool), retained)
    assert rep["best_training_row"] == best
    assert all(row["deviation_percent"] == 0.0 for row in rep["conditions"])
    assert rep["improved_ramped"] == 0 and rep["held_within_range"]


def test_validate_infeasible():
    values = np.random.default_rng(3).uniform(1, 5, size=(6, 9))
    rep = opt.validate_optimum(np.zeros(9), False, values, np.ones(6, bool), np.arange(6))
    assert rep["feasible"] is False and rep["conditions"][0]["optimum"] is None


def test_best_training_design_prefers_dominant_row():
    values = np.ones((5, 9)) * 5.0
    values[3, 4:] = 1.0
    assert opt.best_training_design(values, np.arange(5)) == 3
    assert opt.best_training_design(values, np.array([0, 1, 2, 4])) in (0, 1, 2, 4)


def test_run_and_write_sweep(tmp_path):
    stats, _ = make_stats()
    cfg = DcvaeConfig(dims=Dims(3, 3, 3), encoder_widths=(8,), latent_dim=2, branch_widths=(2, 3), seed=1)
    model = DcvaeModel(cfg)
    fnet = opt.FnetModel(2, opt.FnetConfig(hidden=(4,), seed=1))
    sched = opt.build_schedule(stats, q=10)
    res = opt.run_sweep(sched, fnet, model, p_min=0.7)
    assert len(res.grids) == 10 and res.delta_m.shape == (9,)
    assert 7 <= res.opt_index <= 9
    opt.write_sweep(res, tmp_path, {"note": 1})
    doc = json.loads((tmp_path / "sweep.json").read_text())
    assert doc["opt_design"] == f"designs/{res.opt_index + 1:03d}.vxg"
    assert load_grid(tmp_path / doc["opt_design"]) == res.opt_grid
    assert np.array_equal(np.load(tmp_path / "probs.npy"), res.probs)
