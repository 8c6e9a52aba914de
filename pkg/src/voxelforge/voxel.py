"""Voxel design space: grids, indexing, connectivity and the VXG1 file format.

Grids are stored as boolean numpy arrays of shape ``(j_max, k_max, l_max)``.
The canonical flat order has ``j`` varying fastest, then ``k``, then ``l``,
which is numpy's Fortran order for that shape.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, FormatError, ShapeError

MAGIC = b"VXG1"
_HEADER = struct.Struct("<4sIIII")
MAX_VOXELS = 2**31 - 1


@dataclass(frozen=True)
class Dims:
    j_max: int
    k_max: int
    l_max: int

    def __post_init__(self):
        for name in ("j_max", "k_max", "l_max"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise ShapeError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.j_max * self.k_max * self.l_max

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.j_max, self.k_max, self.l_max)

    @classmethod
    def of(cls, value) -> "Dims":
        if isinstance(value, Dims):
            return value
        if isinstance(value, dict):
            return cls(value["j_max"], value["k_max"], value["l_max"])
        return cls(*value)

    def to_dict(self) -> dict:
        return {"j_max": self.j_max, "k_max": self.k_max, "l_max": self.l_max}


FULL_DIMS = Dims(30, 40, 42)
DESK_DIMS = Dims(12, 16, 14)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Binary occupancy over the design space. ``pitch`` is the voxel edge in mm."""

    dims: Dims
    occupancy: np.ndarray
    pitch: float = 10.0

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim == 1:
            if occ.size != self.dims.total:
                raise ShapeError(f"flat occupancy has {occ.size} cells, expected {self.dims.total}")
            occ = occ.reshape(self.dims.shape, order="F")
        if occ.shape != self.dims.shape:
            raise ShapeError(f"occupancy shape {occ.shape} != dims {self.dims.shape}")
        if not (self.pitch > 0 and np.isfinite(self.pitch)):
            raise ShapeError("voxel pitch must be strictly positive")
        occ = np.array(occ, dtype=bool, copy=True)
        occ.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)

    @classmethod
    def empty(cls, dims, pitch: float = 10.0) -> "VoxelGrid":
        dims = Dims.of(dims)
        return cls(dims, np.zeros(dims.shape, dtype=bool), pitch)

    @classmethod
    def full(cls, dims, pitch: float = 10.0) -> "VoxelGrid":
        dims = Dims.of(dims)
        return cls(dims, np.ones(dims.shape, dtype=bool), pitch)

    def flat(self) -> np.ndarray:
        return self.occupancy.ravel(order="F")

    def with_occupancy(self, occ: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(self.dims, occ, self.pitch)

    def complement(self) -> "VoxelGrid":
        return self.with_occupancy(~self.occupancy)

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    @property
    def fill_fraction(self) -> float:
        return self.count / self.dims.total

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (self.dims == other.dims and self.pitch == other.pitch
                and np.array_equal(self.occupancy, other.occupancy))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ProbGrid:
    """Real value per voxel, e.g. decoder probabilities. Values need not lie in [0, 1]."""

    dims: Dims
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            if v.size != self.dims.total:
                raise ShapeError(f"flat values have {v.size} cells, expected {self.dims.total}")
            v = v.reshape(self.dims.shape, order="F")
        if v.shape != self.dims.shape:
            raise ShapeError(f"values shape {v.shape} != dims {self.dims.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("probability grid contains non-finite values")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def flat(self) -> np.ndarray:
        return self.values.ravel(order="F")


def flat_index(dims: Dims, j: int, k: int, l: int) -> int:
    """Row-major flat index (j fastest) of the 1-based voxel ``(j, k, l)``."""
    if not (1 <= j <= dims.j_max and 1 <= k <= dims.k_max and 1 <= l <= dims.l_max):
        raise IndexError(f"voxel ({j}, {k}, {l}) outside {dims.shape}")
    return (j - 1) + (k - 1) * dims.j_max + (l - 1) * dims.j_max * dims.k_max


def unflat_index(dims: Dims, index: int) -> tuple[int, int, int]:
    if not 0 <= index < dims.total:
        raise IndexError(f"flat index {index} outside [0, {dims.total})")
    j = index % dims.j_max
    k = (index // dims.j_max) % dims.k_max
    l = index // (dims.j_max * dims.k_max)
    return j + 1, k + 1, l + 1


def _check_same_dims(a, b):
    if a.dims != b.dims:
        raise ShapeError(f"dims mismatch: {a.dims.shape} vs {b.dims.shape}")


def hamming(a: VoxelGrid, b: VoxelGrid) -> int:
    _check_same_dims(a, b)
    return int(np.count_nonzero(a.occupancy != b.occupancy))


def binarize(p: ProbGrid, threshold: float = 0.5, pitch: float = 10.0) -> VoxelGrid:
    if not np.isfinite(threshold):
        raise DataError("threshold must be finite")
    return VoxelGrid(p.dims, p.values >= threshold, pitch)


_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)
_STRUCT_6 = ndimage.generate_binary_structure(3, 1)


def connected_components_26(g: VoxelGrid) -> list[np.ndarray]:
    """Filled voxels split into 26-connected components.

    Each component is a sorted array of flat indices. Components are ordered
    by size (largest first), ties broken by smallest flat index.
    """
    labels, n = ndimage.label(g.occupancy, structure=_STRUCT_26)
    if n == 0:
        return []
    flat_labels = labels.ravel(order="F")
    order = np.argsort(flat_labels, kind="stable")
    sorted_labels = flat_labels[order]
    starts = np.searchsorted(sorted_labels, np.arange(1, n + 1))
    ends = np.searchsorted(sorted_labels, np.arange(1, n + 1), side="right")
    comps = [order[s:e] for s, e in zip(starts, ends)]
    comps.sort(key=lambda c: (-len(c), int(c[0])))
    return comps


def _face_mask(dims: Dims, face: str) -> np.ndarray:
    """Boolean mask of a boundary plane. Faces are named like ``"k-"`` / ``"k+"``."""
    axis = "jkl".index(face[0])
    mask = np.zeros(dims.shape, dtype=bool)
    idx = [slice(None)] * 3
    idx[axis] = 0 if face[1] == "-" else dims.shape[axis] - 1
    mask[tuple(idx)] = True
    return mask


def flow_reachable(g: VoxelGrid, inlet_face: str = "k-") -> np.ndarray:
    """Void voxels 6-connected to any empty voxel on the inlet face."""
    void = ~g.occupancy
    labels, _ = ndimage.label(void, structure=_STRUCT_6)
    inlet_labels = np.unique(labels[_face_mask(g.dims, inlet_face) & void])
    inlet_labels = inlet_labels[inlet_labels > 0]
    return np.isin(labels, inlet_labels)


def void_path_exists_6(g: VoxelGrid, inlet_face: str = "k-", outlet_face: str = "k+") -> bool:
    """True when air can pass from the inlet face to the outlet face through empty voxels."""
    reach = flow_reachable(g, inlet_face)
    return bool(np.any(reach & _face_mask(g.dims, outlet_face)))


def bfs_components(occ: np.ndarray, connectivity: int = 26) -> list[set]:
    """Plain breadth-first flood fill; slow, used as a cross-check."""
    if connectivity == 26:
        offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
                   if (a, b, c) != (0, 0, 0)]
    else:
        offsets = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    seen = np.zeros(occ.shape, dtype=bool)
    comps = []
    for start in zip(*np.nonzero(occ)):
        if seen[start]:
            continue
        seen[start] = True
        comp = {start}
        queue = deque([start])
        while queue:
            x, y, z = queue.popleft()
            for dx, dy, dz in offsets:
                n = (x + dx, y + dy, z + dz)
                if all(0 <= n[i] < occ.shape[i] for i in range(3)) and occ[n] and not seen[n]:
                    seen[n] = True
                    comp.add(n)
                    queue.append(n)
        comps.append(comp)
    return comps


def save_grid(g: VoxelGrid, path) -> None:
    path = Path(path)
    path.write_bytes(encode_grid(g))


def encode_grid(g: VoxelGrid) -> bytes:
    pitch_um = int(round(g.pitch * 1000.0))
    header = _HEADER.pack(MAGIC, g.dims.j_max, g.dims.k_max, g.dims.l_max, pitch_um)
    payload = np.packbits(g.flat().astype(np.uint8), bitorder="little")
    return header + payload.tobytes()


def decode_grid(data: bytes) -> VoxelGrid:
    if len(data) < _HEADER.size:
        raise FormatError("truncated VXG1 header")
    magic, j, k, l, pitch_um = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if min(j, k, l) == 0 or j * k * l > MAX_VOXELS:
        raise FormatError(f"invalid dims {j}x{k}x{l}")
    if pitch_um == 0:
        raise FormatError("zero voxel pitch")
    dims = Dims(j, k, l)
    nbytes = (dims.total + 7) // 8
    body = data[_HEADER.size:]
    if len(body) != nbytes:
        raise FormatError(f"payload is {len(body)} bytes, expected {nbytes}")
    bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), bitorder="little")[: dims.total]
    return VoxelGrid(dims, bits.astype(bool), pitch_um / 1000.0)


def load_grid(path) -> VoxelGrid:
    return decode_grid(Path(path).read_bytes())
