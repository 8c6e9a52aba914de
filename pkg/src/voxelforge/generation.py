"""Training population: noise-sampled designs, interface stamping and repair."""
from __future__ import annotations

import hashlib
import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConstraintError, FormatError, ShapeError
from .noise import NoiseParams, fbm3
from .voxel import (
    Dims,
    VoxelGrid,
    connected_components_26,
    load_grid,
    save_grid,
    void_path_exists_6,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MATERIAL = "material"
VOID = "void"
MIN_COMPONENT = 8

_OFFSETS_26 = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
                        if (a, b, c) != (0, 0, 0)])


@dataclass(frozen=True)
class Box:
    """Axis-aligned region given by 1-based inclusive voxel bounds."""

    name: str
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    kind: str = MATERIAL

    def __post_init__(self):
        if self.kind not in (MATERIAL, VOID):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"box {self.name!r} has lo > hi")
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))

    def mask(self, dims: Dims) -> np.ndarray:
        if any(v < 1 for v in self.lo) or any(h > d for h, d in zip(self.hi, dims.shape)):
            raise ShapeError(f"box {self.name!r} does not fit inside {dims.shape}")
        m = np.zeros(dims.shape, dtype=bool)
        m[self.lo[0] - 1:self.hi[0], self.lo[1] - 1:self.hi[1], self.lo[2] - 1:self.hi[2]] = True
        return m

    def to_dict(self) -> dict:
        return {"name": self.name, "lo": list(self.lo), "hi": list(self.hi), "kind": self.kind}


@dataclass(frozen=True)
class InterfaceSpec:
    regions: tuple[Box, ...] = ()
    flow_axis: int = 1

    def material_mask(self, dims: Dims) -> np.ndarray:
        return self._union(dims, MATERIAL)

    def void_mask(self, dims: Dims) -> np.ndarray:
        return self._union(dims, VOID)

    def engine_mask(self, dims: Dims) -> np.ndarray:
        """Regions named ``engine*``: the heat source and the load introduction point."""
        m = np.zeros(dims.shape, dtype=bool)
        for b in self.regions:
            if b.kind == MATERIAL and b.name.startswith("engine"):
                m |= b.mask(dims)
        return m

    def _union(self, dims, kind):
        m = np.zeros(dims.shape, dtype=bool)
        for b in self.regions:
            if b.kind == kind:
                m |= b.mask(dims)
        return m

    def validate(self, dims: Dims) -> None:
        if np.any(self.material_mask(dims) & self.void_mask(dims)):
            raise ConstraintError("material-mandatory and void-mandatory regions overlap")

    @classmethod
    def default(cls, dims: Dims) -> "InterfaceSpec":
        """Engine mount on the inlet face, two attachment pads on the outlet face,
        and matching air windows above the engine on both faces."""
        J, K, L = dims.shape
        j3, l3 = J // 3, L // 3
        side = max(1, J // 6)
        depth = 2 if K >= 4 else 1
        win_l = max(1, L // 4)
        mid_l = (l3 + 1, L - l3)
        regions = (
            Box("engine", (j3 + 1, 1, mid_l[0]), (J - j3, depth, mid_l[1])),
            Box("attach_a", (1, K - depth + 1, mid_l[0]), (side, K, mid_l[1])),
            Box("attach_b", (J - side + 1, K - depth + 1, mid_l[0]), (J, K, mid_l[1])),
            Box("inlet", (j3 + 1, 1, L - win_l + 1), (J - j3, 1, L), VOID),
            Box("outlet", (j3 + 1, K, L - win_l + 1), (J - j3, K, L), VOID),
        )
        spec = cls(regions)
        spec.validate(dims)
        return spec

    def to_dict(self) -> dict:
        return {"flow_axis": self.flow_axis, "regions": [b.to_dict() for b in self.regions]}

    @classmethod
    def from_dict(cls, d: dict) -> "InterfaceSpec":
        boxes = tuple(Box(r["name"], tuple(r["lo"]), tuple(r["hi"]), r.get("kind", MATERIAL))
                      for r in d.get("regions", []))
        return cls(boxes, int(d.get("flow_axis", 1)))


def _face_names(axis: int) -> tuple[str, str]:
    a = "jkl"[axis]
    return a + "-", a + "+"


def voxel_centers(dims: Dims) -> np.ndarray:
    """Voxel centres in voxel units, shape ``dims.shape + (3,)``."""
    axes = [np.arange(n, dtype=np.float64) + 0.5 for n in dims.shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def noise_field(dims: Dims, params: NoiseParams) -> np.ndarray:
    # A seeded sub-lattice shift keeps voxel centres off the integer lattice of
    # every octave; otherwise octaves with integer frequency vanish identically.
    shift = np.random.default_rng(params.seed & ((1 << 64) - 1)).uniform(0.0, 1.0, size=3)
    return fbm3(voxel_centers(dims) + shift, params)


def sample_design(dims: Dims, params: NoiseParams, spec: InterfaceSpec, pitch: float = 10.0) -> VoxelGrid:
    field = noise_field(dims, params)
    occ = field >= params.fill_threshold
    occ |= spec.material_mask(dims)
    occ &= ~spec.void_mask(dims)
    return VoxelGrid(dims, occ, pitch)


def _line_voxels(p0, p1) -> np.ndarray:
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    n = int(np.max(np.abs(p1 - p0)))
    if n == 0:
        return p0.astype(np.int64)[None, :]
    t = np.arange(n + 1)[:, None] / n
    pts = np.floor(p0 + t * (p1 - p0) + 0.5).astype(np.int64)
    return pts


def _representative(coords: np.ndarray) -> np.ndarray:
    """Member voxel closest to the component centroid (first in flat order on ties)."""
    c = coords.mean(axis=0)
    d = np.sum((coords - c) ** 2, axis=1)
    return coords[int(np.argmin(d))]


def _coords(flat_idx: np.ndarray, dims: Dims) -> np.ndarray:
    return np.stack(np.unravel_index(flat_idx, dims.shape, order="F"), axis=1)


def _bfs_bridge(occ, source, target, forbidden) -> np.ndarray | None:
    """Shortest 26-connected voxel path from ``source`` cells to ``target`` cells avoiding ``forbidden``."""
    shape = occ.shape
    prev = -np.ones(occ.size, dtype=np.int64)
    visited = source.copy()
    queue = deque(np.flatnonzero(source.ravel()))
    flat_target = target.ravel()
    flat_forbidden = forbidden.ravel()
    visited = visited.ravel()
    while queue:
        cur = queue.popleft()
        if flat_target[cur]:
            path = []
            while cur >= 0 and not source.ravel()[cur]:
                path.append(cur)
                cur = prev[cur]
            return np.array(path, dtype=np.int64)
        cc = np.array(np.unravel_index(cur, shape))
        for off in _OFFSETS_26:
            n = cc + off
            if np.any(n < 0) or np.any(n >= shape):
                continue
            ni = np.ravel_multi_index(tuple(n), shape)
            if visited[ni] or flat_forbidden[ni]:
                continue
            visited[ni] = True
            prev[ni] = cur
            queue.append(ni)
    return None


def _connect(occ: np.ndarray, dims: Dims, mandatory: np.ndarray, protected: np.ndarray) -> np.ndarray:
    occ = occ.copy()
    grid = VoxelGrid(dims, occ)
    comps = connected_components_26(grid)
    if not comps:
        raise ConstraintError("design has no material to repair")
    flat_mand = mandatory.ravel(order="F")
    main = comps[0]
    keep = []
    for comp in comps[1:]:
        if len(comp) < MIN_COMPONENT and not flat_mand[comp].any():
            occ[tuple(_coords(comp, dims).T)] = False
        else:
            keep.append(comp)
    if not keep:
        return occ
    target = _representative(_coords(main, dims))
    for comp in keep:
        start = _representative(_coords(comp, dims))
        line = _line_voxels(start, target)
        ok = ~protected[tuple(line.T)]
        occ[tuple(line[ok].T)] = True
    # Straight bridges can be interrupted by protected void; reconnect leftovers by shortest path.
    for _ in range(len(keep) + 1):
        comps = connected_components_26(VoxelGrid(dims, occ))
        if len(comps) == 1:
            break
        main_mask = np.zeros(dims.total, dtype=bool)
        main_mask[comps[0]] = True
        main_mask = main_mask.reshape(dims.shape, order="F")
        for comp in comps[1:]:
            src = np.zeros(dims.total, dtype=bool)
            src[comp] = True
            src = src.reshape(dims.shape, order="F")
            path = _bfs_bridge(occ, src, main_mask, protected)
            if path is None:
                raise ConstraintError("protected void separates mandatory material")
            occ.ravel()[path] = True  # occ is C-contiguous; BFS indices are C-order
    return occ


def _channel_column(dims: Dims, spec: InterfaceSpec) -> tuple[int, int] | None:
    """Cross-section cell for a straight flow channel, preferring the air windows."""
    axis = spec.flow_axis
    mat = spec.material_mask(dims)
    void = spec.void_mask(dims)
    blocked = mat.any(axis=axis)
    n = dims.shape[axis]
    inlet = np.take(void, 0, axis=axis)
    outlet = np.take(void, n - 1, axis=axis)
    for pref in (inlet & outlet & ~blocked, (inlet | outlet) & ~blocked, ~blocked):
        cells = np.argwhere(pref)
        if len(cells):
            centre = cells.mean(axis=0)
            d = np.sum((cells - centre) ** 2, axis=1)
            return tuple(int(v) for v in cells[int(np.argmin(d))])
    return None


def _channel_mask(dims: Dims, spec: InterfaceSpec, cell) -> np.ndarray:
    m = np.zeros(dims.shape, dtype=bool)
    idx = list(cell)
    idx.insert(spec.flow_axis, slice(None))
    m[tuple(idx)] = True
    return m


def is_valid_design(g: VoxelGrid, spec: InterfaceSpec) -> bool:
    inlet, outlet = _face_names(spec.flow_axis)
    mat = spec.material_mask(g.dims)
    return (len(connected_components_26(g)) == 1
            and void_path_exists_6(g, inlet, outlet)
            and bool(np.all(g.occupancy[mat]))
            and not np.any(g.occupancy[spec.void_mask(g.dims)]))


def repair_connectivity(g: VoxelGrid, spec: InterfaceSpec, max_rounds: int = 4) -> VoxelGrid:
    """Make ``g`` a single 26-connected body with a 6-connected air path along the flow axis.

    Material is only ever added (bridges) except for small floating fragments and
    a straight one-voxel channel carved when no air path exists. Mandatory
    material is never removed.
    """
    dims = g.dims
    spec.validate(dims)
    inlet, outlet = _face_names(spec.flow_axis)
    mandatory = spec.material_mask(dims)
    protected = spec.void_mask(dims)
    occ = (g.occupancy | mandatory) & ~protected
    if is_valid_design(VoxelGrid(dims, occ, g.pitch), spec):
        return VoxelGrid(dims, occ, g.pitch)
    for _ in range(max_rounds):
        occ = _connect(occ, dims, mandatory, protected)
        if void_path_exists_6(VoxelGrid(dims, occ), inlet, outlet):
            return VoxelGrid(dims, occ, g.pitch)
        cell = _channel_column(dims, spec)
        if cell is None:
            raise ConstraintError("mandatory material blocks every straight flow channel")
        channel = _channel_mask(dims, spec, cell)
        protected = protected | channel
        occ = occ & ~channel
    raise ConstraintError("repair did not converge")


def make_design(dims: Dims, params: NoiseParams, spec: InterfaceSpec, pitch: float = 10.0) -> VoxelGrid:
    return repair_connectivity(sample_design(dims, params, spec, pitch), spec)


def _design_job(args):
    i, dims, params, spec, pitch, seed = args
    g = make_design(dims, params.with_seed(seed + i), spec, pitch)
    return i, g


def generate_dataset(n: int, dims: Dims, params: NoiseParams, spec: InterfaceSpec, seed: int,
                     out_dir, pitch: float = 10.0, jobs: int = 1) -> dict:
    """Write ``n`` repaired designs plus ``manifest.json`` to ``out_dir``; returns the manifest."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate(dims)
    out = Path(out_dir)
    design_dir = out / "designs"
    design_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    entries = []
    tasks = [(i, dims, params, spec, pitch, seed) for i in range(n)]
    try:
        if jobs > 1:
            from multiprocessing import Pool
            with Pool(jobs) as pool:
                results = pool.imap(_design_job, tasks, chunksize=8)
                entries = _write_designs(results, design_dir, seed, written)
        else:
            entries = _write_designs(map(_design_job, tasks), design_dir, seed, written)
        manifest = {
            "schema": "voxelforge.dataset",
            "version": MANIFEST_VERSION,
            "dims": dims.to_dict(),
            "pitch_mm": pitch,
            "params": {k: v for k, v in params.to_dict().items() if k != "seed"},
            "seed": seed,
            "spec": spec.to_dict(),
            "entries": entries,
        }
        tmp = out / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=1))
        tmp.replace(out / "manifest.json")
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        (out / "manifest.json.tmp").unlink(missing_ok=True)
        raise
    return manifest


def _write_designs(results, design_dir: Path, seed: int, written: list) -> list:
    entries = []
    for i, g in results:
        path = design_dir / f"{i:05d}.vxg"
        save_grid(g, path)
        written.append(path)
        entries.append({
            "file": f"designs/{path.name}",
            "seed": seed + i,
            "fill_fraction": g.fill_fraction,
            "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
        })
    return entries


class Dataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.is_file():
            raise FormatError(f"{mpath}: no dataset manifest")
        self.manifest = json.loads(mpath.read_text())
        if self.manifest.get("schema") != "voxelforge.dataset" or self.manifest.get("version") != MANIFEST_VERSION:
            raise FormatError(f"{mpath}: unsupported manifest schema/version")
        self.dims = Dims.of(self.manifest["dims"])
        self.spec = InterfaceSpec.from_dict(self.manifest["spec"])

    def __len__(self):
        return len(self.manifest["entries"])

    def ids(self) -> list[int]:
        return list(range(len(self)))

    def grid(self, i: int) -> VoxelGrid:
        return load_grid(self.root / self.manifest["entries"][i]["file"])

    def grids(self):
        for i in range(len(self)):
            yield self.grid(i)

    def matrix(self, ids=None) -> np.ndarray:
        """Designs as a ``(n, dims.total)`` float array of 0/1 in canonical flat order."""
        ids = self.ids() if ids is None else ids
        return np.stack([self.grid(i).flat() for i in ids]).astype(np.float64)
