import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxelforge.generation import Dataset, InterfaceSpec, generate_dataset
from voxelforge.labels import (
    LabelStats, LabelTable, compute_stats, label_dataset, label_grid, normalize_and_filter, read_labels,
    write_labels,
)
from voxelforge.noise import NoiseParams
from voxelforge.voxel import Dims, VoxelGrid

D = Dims(6, 8, 7)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(12, D, NoiseParams.for_dims(D), InterfaceSpec.default(D), seed=0, out_dir=root)
    return Dataset(root)


def test_relabel_is_byte_identical(small_dataset, tmp_path):
    label_dataset(small_dataset, tmp_path / "a.jsonl")
    label_dataset(small_dataset, tmp_path / "b.jsonl", jobs=2)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    t = read_labels(tmp_path / "a.jsonl")
    assert len(t) == 12 and t.feasible.all() and np.all(np.isfinite(t.values))
    header = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert header["schema"] == "voxelforge.labels" and header["version"] == 1


def test_infeasible_rows_written_as_null(tmp_path):
    spec = InterfaceSpec.default(D)
    v, ok = label_grid(VoxelGrid.empty(D), spec)
    assert not ok and np.all(np.isnan(v))
    t = LabelTable(np.array([0, 1]), np.vstack([np.arange(9.0), v]), np.array([True, False]))
    write_labels(t, tmp_path / "l.jsonl")
    rec = json.loads((tmp_path / "l.jsonl").read_text().splitlines()[2])
    assert rec == {"design_id": 1, "c": [None] * 9, "feasible": False}
    back = read_labels(tmp_path / "l.jsonl")
    assert np.array_equal(back.values[0], np.arange(9.0)) and np.all(np.isnan(back.values[1]))


def test_identical_labels_all_retained():
    vals = np.tile(np.arange(1.0, 10.0), (20, 1))
    z, stats, kept = normalize_and_filter(vals)
    assert len(kept) == 20 and np.all(z == 0)
    assert len(stats.degenerate) == 9


def test_single_outlier_dropped(rng):
    vals = rng.standard_normal((200, 9))
    vals = np.clip(vals, -1.5, 1.5)
    vals[17, 4] = 0.0
    std = vals[:, 4].std()
    vals[17, 4] = vals[:, 4].mean() + 40 * std
    z, _, kept = normalize_and_filter(vals)
    assert 17 not in kept and len(kept) == 199


def test_gaussian_retention_rate():
    vals = np.random.default_rng(0).standard_normal((100_000, 9))
    _, _, kept = normalize_and_filter(vals)
    assert abs(len(kept) / 1e5 - 0.9545 ** 9) < 0.01


def test_infeasible_rows_excluded_from_stats(rng):
    vals = rng.standard_normal((50, 9))
    feas = np.ones(50, dtype=bool)
    feas[3] = False
    vals[3] = np.nan
    z, stats, kept = normalize_and_filter(vals, feas)
    assert 3 not in kept and np.all(np.isfinite(stats.mean))
    assert np.allclose(stats.mean, np.delete(vals, 3, axis=0).mean(axis=0))


@given(st.integers(0, 2**30))
@settings(max_examples=30, deadline=None)
def test_normalize_roundtrip(seed):
    r = np.random.default_rng(seed)
    vals = r.normal(r.uniform(-100, 100, 9), r.uniform(0.1, 50, 9), size=(30, 9))
    stats = compute_stats(vals)
    back = stats.denormalize(stats.normalize(vals))
    assert np.allclose(back, vals, rtol=1e-12, atol=0)


def test_stats_roundtrip(tmp_path, rng):
    _, stats, _ = normalize_and_filter(rng.standard_normal((40, 9)))
    stats.save(tmp_path / "s.json")
    back = LabelStats.load(tmp_path / "s.json")
    for k in ("mean", "std", "min", "max"):
        assert np.array_equal(getattr(back, k), getattr(stats, k))
    assert json.loads((tmp_path / "s.json").read_text())["schema"] == "voxelforge.stats"
