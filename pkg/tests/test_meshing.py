import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxelforge import meshing
from voxelforge.errors import DataError, FormatError
from voxelforge.voxel import Dims, ProbGrid, VoxelGrid

from conftest import random_grid


def test_empty_grid_has_no_triangles():
    m = meshing.marching_cubes(VoxelGrid.empty(Dims(3, 3, 3)))
    assert m.n_triangles == 0
    assert meshing.mesh_stats(m)["triangles"] == 0


def test_single_voxel_octahedron():
    occ = np.zeros((3, 3, 3), bool)
    occ[1, 1, 1] = True
    s = meshing.mesh_stats(meshing.marching_cubes(VoxelGrid(Dims(3, 3, 3), occ)))
    assert s["triangles"] == 8 and s["vertices"] == 6
    assert s["watertight"] and s["euler"] == 2
    assert s["signed_volume"] > 0


def test_full_cube_bbox():
    m = meshing.marching_cubes(VoxelGrid.full(Dims(6, 6, 6)))
    s = meshing.mesh_stats(m)
    assert s["watertight"] and s["euler"] == 2
    assert np.allclose(s["bbox"][0], 0.0) and np.allclose(s["bbox"][1], 60.0)
    # corners are chamfered, so the volume sits a little below the full cube
    assert 0.9 * 60 ** 3 < s["signed_volume"] < 60 ** 3


def test_pitch_scales_coordinates():
    g = VoxelGrid.full(Dims(2, 3, 4), pitch=2.5)
    m = meshing.marching_cubes(g)
    assert np.allclose(m.vertices.max(axis=0), [5.0, 7.5, 10.0])


def test_nonfinite_input_rejected():
    vals = np.zeros((2, 2, 2))
    vals[0, 0, 0] = np.nan
    with pytest.raises(DataError):
        meshing.marching_cubes(vals)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 0.9))
@settings(max_examples=60, deadline=None)
def test_random_grids_watertight_and_inside_bbox(seed, fill):
    g = random_grid(np.random.default_rng(seed), (5, 4, 6), fill)
    m = meshing.marching_cubes(g)
    if not g.occupancy.any():
        assert m.n_triangles == 0
        return
    s = meshing.mesh_stats(m)
    assert s["watertight"]
    assert s["signed_volume"] > 0
    ext = np.array(g.dims.shape) * g.pitch
    assert np.all(m.vertices >= -1e-9) and np.all(m.vertices <= ext + 1e-9)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_genus_zero_heightmap_euler(seed):
    r = np.random.default_rng(seed)
    h = r.integers(1, 6, size=(6, 5))
    occ = np.arange(6)[None, None, :] < h[:, :, None]
    s = meshing.mesh_stats(meshing.marching_cubes(VoxelGrid(Dims(6, 5, 6), occ)))
    assert s["watertight"] and s["euler"] == 2


def test_ellipsoid_euler_and_probability_input():
    x, y, z = np.meshgrid(*(np.linspace(-1, 1, 9),) * 3, indexing="ij")
    vals = 1.0 - (x ** 2 + (y / 0.8) ** 2 + (z / 0.6) ** 2)
    m = meshing.marching_cubes(vals, iso=0.0)
    s = meshing.mesh_stats(m)
    assert s["watertight"] and s["euler"] == 2
    probs = np.clip(vals, 0, 1).ravel(order="F")
    pm = meshing.marching_cubes(ProbGrid(Dims(9, 9, 9), probs), iso=0.3)
    assert meshing.mesh_stats(pm)["watertight"]


def test_single_triangle_stl(tmp_path):
    m = meshing.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    meshing.export_stl(m, tmp_path / "t.stl")
    data = (tmp_path / "t.stl").read_bytes()
    assert len(data) == 134
    assert data[:80] == bytes(80)
    normal = np.frombuffer(data[84:96], "<f4")
    assert normal.tolist() == [0.0, 0.0, 1.0]
    (tmp_path / "bad.stl").write_bytes(data[:-1])
    with pytest.raises(FormatError):
        meshing.import_stl(tmp_path / "bad.stl")


def test_stl_roundtrip_and_determinism(tmp_path, rng):
    g = random_grid(rng, (5, 5, 5), 0.5)
    m = meshing.marching_cubes(g)
    meshing.export_stl(m, tmp_path / "a.stl")
    meshing.export_stl(meshing.marching_cubes(g), tmp_path / "b.stl")
    assert (tmp_path / "a.stl").read_bytes() == (tmp_path / "b.stl").read_bytes()
    back = meshing.import_stl(tmp_path / "a.stl")
    assert back.n_triangles == m.n_triangles
    sb, sm = meshing.mesh_stats(back), meshing.mesh_stats(m)
    assert sb["watertight"] and sb["euler"] == sm["euler"]
    assert sb["signed_volume"] == pytest.approx(sm["signed_volume"], rel=1e-5)


def test_obj_export(tmp_path):
    occ = np.zeros((2, 2, 2), bool)
    occ[0, 0, 0] = True
    m = meshing.marching_cubes(VoxelGrid(Dims(2, 2, 2), occ))
    meshing.export_obj(m, tmp_path / "m.obj")
    lines = (tmp_path / "m.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == 6
    assert sum(l.startswith("f ") for l in lines) == 8


def test_trimesh_validation():
    with pytest.raises(DataError):
        meshing.TriMesh([[0, 0, 0]], [[0, 1, 2]])
