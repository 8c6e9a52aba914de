"""Isosurface extraction from voxel grids and mesh export.

Marching cubes over a grid padded with one empty layer, so every surface
closes. Vertices sit on grid edges and are shared between neighbouring cells
by their global edge id, which makes the output indexed and deterministic.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

# Cell corners in the usual order: bottom ring then top ring.
_CORNERS = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                     (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)])
_EDGES = np.array([(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
                   (0, 4), (1, 5), (2, 6), (3, 7)])

# Triangle table: one token per cube case (bit n set when corner n lies below
# iso), hex digits are cell-edge numbers taken three at a time, "-" is empty.
_TRI_HEX = (
    "- 083 019 183981 12a 08312a 92a029 2832a8a98 3b2 0b28b0 19023b 1b219b98b 3a1ba3 0a108a8ba "
    "3903b9ba9 98aa8b 478 430734 019847 419471731 12a847 34730412a 92a902847 2a9297273794 8473b2 "
    "b47b24204 90184723b 47b94b9b2921 3a13ba784 1ba14b1047b4 47890b9bab03 47b4b99ba 954 954083 "
    "054150 854835315 12a954 30812a495 52a542402 2a5325354348 95423b 0b208b495 05401523b "
    "21525828b485 a3ba13954 4950818a18ba 54050b5bab03 54858aa8b 978579 930953573 078017157 153357 "
    "978957a12 a12950530573 802825857a52 2a5253357 7957893b2 95797292027b 23b018178157 b21b17715 "
    "958857a13a3b 5705097b010aba0 ba0b03a50807570 ba57b5 a65 0835a6 9015a6 1831985a6 165261 "
    "165126308 965906026 598582526328 23ba65 b08b20a65 01923b5a6 5a61929b298b 63b653513 "
    "08b0b50515b6 3b6036065059 65969bb98 5a6478 43047365a 1905a6847 a65197173794 612651478 "
    "125526304347 847905065026 739794329596269 3b2784a65 5a647242027b 01947823b5a6 "
    "9219b294b7b45a6 8473b53515b6 51b5b610b7b404b 059065036b63847 65969b4797b9 a4964a 4a649a083 "
    "a01a60640 83181686461a 149124264 308129249264 024426 832824426 a49a64b23 08228b49a4a6 "
    "3b201606461a 64161a48121b8b1 964936913b63 8b1810b61914641 3b6360064 648b68 7a678a89a "
    "0730a709a67a a671a7178180 a67a71173 126168189867 269291679093739 780706602 732672 "
    "23ba68a89867 20727b09767a9a7 1801781a767a23b b21b17a61671 896867916b63136 091b67 "
    "7807063b0b60 7b6 76b 308b76 019b76 819831b76 a126b7 12a3086b7 2902a96b7 6b72a3a83a98 723627 "
    "708760620 276237019 162186198876 a76a17137 a7617a187108 03707a0a96a7 76a7a88a9 684b86 "
    "36b306046 86b846901 946963931b36 6846b82a1 12a30b06b046 4b846b0292a9 a93a32943b36463 "
    "823842462 042462 190234246438 194142246 8138618466a1 a10a06604 4634386a3039a93 a946a4 49576b "
    "083495b76 50154076b b76834354315 954a1276b 6b712a083495 76b54a42a402 348354325a52b76 "
    "723762549 954086062687 362376150540 628687218485158 954a16176137 16a176107870954 "
    "40a4a503a6a737a 76a7a854a48a 6956b9b89 36b063056095 0b805b01556b 6b3635531 12a95b9b8b56 "
    "0b306b09656912a b85b56805a52025 6b36352a3a53 589528562382 956960062 158180568382628 156216 "
    "13616a386569896 a10a06950560 03856a a56 b5a75b b5ab75830 5b75ab190 a75ab7981831 b12b71751 "
    "08312717572b 9759279022b7 75272b592328982 25a235375 820852875a25 9015a35373a2 "
    "982921872a25752 135375 087071175 903935537 987597 5845a8ab8 5045b05abb30 01984a8aba45 "
    "ab4a45b34941314 2512852b8458 04b0b345b2b151b 0250592b5458b85 9452b3 25a352345384 5a2524420 "
    "3a235a385458019 5a2524192942 845853351 045105 845853905035 945 4b749b9ab 0834979b79ab "
    "1ab1b414074b 3143481a474bab4 4b79b492b912 9749b791b2b1083 b74b42240 b74b42834324 "
    "29a279237749 9a7974a27870207 37a3a274a1a040a 1a2874 491417713 491417081871 403743 487 9a8ab8 "
    "30939bb9a 01a0a88ab 31ab3a 12b1b99b8 30939b1292b9 02b80b 32b 23828aa89 9a2092 23828a0181a8 "
    "1a2 138918 091 038 - "
)
TRI_TABLE = tuple(tuple(int(ch, 16) for ch in tok.strip("-")) for tok in "".join(_TRI_HEX).split())

_TRI = np.full((256, 15), -1, dtype=np.int64)
for _case, _row in enumerate(TRI_TABLE):
    _TRI[_case, :len(_row)] = _row
_EDGE_AXIS = np.argmax(_CORNERS[_EDGES[:, 1]] != _CORNERS[_EDGES[:, 0]], axis=1)
_EDGE_START = np.minimum(_CORNERS[_EDGES[:, 0]], _CORNERS[_EDGES[:, 1]])
# Vertex order that makes triangles wind counter-clockwise seen from outside.
_WINDING = [0, 1, 2]


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64, mm
    triangles: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise DataError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise DataError("non-finite vertex coordinates")

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def normals(self) -> np.ndarray:
        """Unit face normals (zero for degenerate faces)."""
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def _values(p) -> tuple[np.ndarray, float]:
    """Accepts a ProbGrid, a VoxelGrid or a raw 3-D array; returns values and pitch."""
    if hasattr(p, "occupancy"):
        return p.occupancy.astype(np.float64), p.pitch
    vals = np.asarray(getattr(p, "values", p), dtype=np.float64)
    if vals.ndim != 3:
        raise DataError("marching cubes needs a 3-D grid")
    return vals, 10.0


def marching_cubes(p, iso: float = 0.5, pitch: float | None = None) -> TriMesh:
    """Triangle mesh of the ``iso`` level set; material is where the value is >= iso.

    Coordinates are voxel centres in mm (voxel ``(0, 0, 0)`` centred at
    ``pitch / 2``). Vertices are ordered by global grid-edge id.
    """
    vals, grid_pitch = _values(p)
    pitch = grid_pitch if pitch is None else pitch
    if not np.all(np.isfinite(vals)) or not np.isfinite(iso):
        raise DataError("non-finite values in marching cubes input")
    # Pad with empty space (0, or anything below a non-positive iso) so the surface closes.
    pad = np.pad(vals, 1, constant_values=0.0 if iso > 0 else iso - 1.0)
    below = pad < iso
    cshape = tuple(s - 1 for s in pad.shape)
    case = np.zeros(cshape, dtype=np.int64)
    for n, (dx, dy, dz) in enumerate(_CORNERS):
        case |= below[dx:dx + cshape[0], dy:dy + cshape[1], dz:dz + cshape[2]].astype(np.int64) << n
    cells = np.flatnonzero((case != 0) & (case != 255))
    if cells.size == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cidx = np.stack(np.unravel_index(cells, cshape), axis=1)
    local = _TRI[case.ravel()[cells]]  # (cells, 15)
    used = local >= 0
    cell_of = np.repeat(np.arange(len(cells)), used.sum(axis=1))
    edge = local[used]
    start = cidx[cell_of] + _EDGE_START[edge]
    axis = _EDGE_AXIS[edge]
    n_nodes = int(np.prod(pad.shape))
    gid = axis * n_nodes + np.ravel_multi_index(tuple(start.T), pad.shape)
    uniq, inverse = np.unique(gid, return_inverse=True)
    tris = inverse.reshape(-1, 3)[:, _WINDING]

    u_axis, u_node = np.divmod(uniq, n_nodes)
    a = np.stack(np.unravel_index(u_node, pad.shape), axis=1)
    b = a.copy()
    b[np.arange(len(b)), u_axis] += 1
    va = pad[tuple(a.T)]
    vb = pad[tuple(b.T)]
    # Keep vertices strictly inside their edge so values equal to iso cannot
    # collapse neighbouring vertices into one point.
    t = np.clip((iso - va) / (vb - va), 1e-6, 1.0 - 1e-6)
    pos = a.astype(np.float64)
    pos[np.arange(len(pos)), u_axis] += t
    return TriMesh((pos - 0.5) * pitch, tris)


def _edge_counts(m: TriMesh):
    e = np.concatenate([m.triangles[:, [0, 1]], m.triangles[:, [1, 2]], m.triangles[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def mesh_stats(m: TriMesh) -> dict:
    """Triangle count, exact edge-incidence watertightness, Euler characteristic and bbox."""
    if m.n_triangles == 0:
        return {"triangles": 0, "vertices": 0, "edges": 0, "watertight": False, "euler": 0,
                "bbox": None, "signed_volume": 0.0}
    edges, counts = _edge_counts(m)
    n_vert = len(np.unique(m.triangles))
    return {
        "triangles": m.n_triangles,
        "vertices": int(n_vert),
        "edges": int(len(edges)),
        "watertight": bool(np.all(counts == 2)),
        "euler": int(n_vert - len(edges) + m.n_triangles),
        "bbox": [m.vertices.min(axis=0).tolist(), m.vertices.max(axis=0).tolist()],
        "signed_volume": m.signed_volume(),
    }


_STL_TRI = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])


def stl_bytes(m: TriMesh) -> bytes:
    rec = np.zeros(m.n_triangles, dtype=_STL_TRI)
    rec["normal"] = m.normals()
    rec["v"] = m.vertices[m.triangles]
    return bytes(80) + struct.pack("<I", m.n_triangles) + rec.tobytes()


def export_stl(m: TriMesh, path) -> None:
    """Binary STL: zero header, triangle count, then normal, three vertices and a zero attribute."""
    Path(path).write_bytes(stl_bytes(m))


def import_stl(path) -> TriMesh:
    """Read a binary STL, merging bitwise-identical vertices."""
    data = Path(path).read_bytes()
    if len(data) < 84:
        raise FormatError(f"{path}: truncated STL header")
    (n,) = struct.unpack_from("<I", data, 80)
    if len(data) != 84 + n * _STL_TRI.itemsize:
        raise FormatError(f"{path}: STL size does not match its triangle count")
    rec = np.frombuffer(data, dtype=_STL_TRI, count=n, offset=84)
    pts = rec["v"].reshape(-1, 3).astype(np.float64)
    verts, inverse = np.unique(pts, axis=0, return_inverse=True)
    return TriMesh(verts, inverse.reshape(-1, 3))


def export_obj(m: TriMesh, path) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in m.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in m.triangles]
    Path(path).write_text("\n".join(lines) + "\n")
