import json

import numpy as np
import pytest

from voxelforge.errors import ConstraintError
from voxelforge.generation import (
    MATERIAL, VOID, Box, Dataset, InterfaceSpec, generate_dataset, is_valid_design, make_design,
    repair_connectivity, sample_design,
)
from voxelforge.noise import NoiseParams
from voxelforge.voxel import DESK_DIMS, Dims, VoxelGrid, connected_components_26, void_path_exists_6

D = Dims(10, 12, 10)
SPEC = InterfaceSpec.default(D)


def test_default_spec_is_consistent():
    SPEC.validate(D)
    assert not np.any(SPEC.material_mask(D) & SPEC.void_mask(D))
    assert SPEC.engine_mask(D).any()
    assert InterfaceSpec.from_dict(SPEC.to_dict()) == SPEC


def test_overlapping_spec_rejected():
    spec = InterfaceSpec((Box("a", (1, 1, 1), (2, 2, 2)), Box("b", (2, 2, 2), (3, 3, 3), VOID)))
    with pytest.raises(ConstraintError):
        spec.validate(D)


def test_threshold_extremes():
    only = sample_design(D, NoiseParams.for_dims(D, fill_threshold=np.inf), SPEC)
    assert np.array_equal(only.occupancy, SPEC.material_mask(D))
    full = sample_design(D, NoiseParams.for_dims(D, fill_threshold=-np.inf), SPEC)
    assert np.array_equal(full.occupancy, ~SPEC.void_mask(D))


def test_sample_is_deterministic():
    p = NoiseParams.for_dims(D, seed=42)
    assert sample_design(D, p, SPEC) == sample_design(D, p, SPEC)
    assert sample_design(D, p, SPEC) != sample_design(D, p.with_seed(43), SPEC)


def test_repair_leaves_valid_grid_unchanged():
    g = make_design(D, NoiseParams.for_dims(D, seed=3), SPEC)
    assert is_valid_design(g, SPEC)
    assert repair_connectivity(g, SPEC) == g


def test_repair_bridges_disjoint_blobs():
    spec = InterfaceSpec((Box("engine", (2, 1, 2), (3, 2, 3)), Box("attach", (7, 11, 7), (8, 12, 8))))
    occ = spec.material_mask(D)
    g = VoxelGrid(D, occ)
    assert len(connected_components_26(g)) == 2
    r = repair_connectivity(g, spec)
    assert len(connected_components_26(r)) == 1
    assert np.all(r.occupancy[occ])
    assert void_path_exists_6(r)


def test_repair_carves_channel_in_full_grid():
    g = VoxelGrid(D, ~SPEC.void_mask(D))
    assert not void_path_exists_6(g)
    r = repair_connectivity(g, SPEC)
    assert is_valid_design(r, SPEC)


def test_unsatisfiable_spec():
    wall = InterfaceSpec((Box("wall", (1, 5, 1), (10, 5, 10)),))
    with pytest.raises(ConstraintError):
        repair_connectivity(VoxelGrid.empty(D), wall)


def test_random_designs_valid():
    for s in range(40):
        g = make_design(D, NoiseParams.for_dims(D, seed=s), SPEC)
        assert is_valid_design(g, SPEC)


def test_dataset_roundtrip_and_determinism(tmp_path):
    p = NoiseParams.for_dims(D)
    m1 = generate_dataset(10, D, p, SPEC, seed=5, out_dir=tmp_path / "a")
    m2 = generate_dataset(10, D, p, SPEC, seed=5, out_dir=tmp_path / "b", jobs=2)
    assert [e["sha256"] for e in m1["entries"]] == [e["sha256"] for e in m2["entries"]]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    ds = Dataset(tmp_path / "a")
    assert len(ds) == 10 and ds.dims == D
    assert [e["seed"] for e in m1["entries"]] == list(range(5, 15))
    assert ds.matrix().shape == (10, D.total)
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert doc["schema"] == "voxelforge.dataset" and doc["version"] == 1
