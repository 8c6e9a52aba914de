"""Fast voxel-level stand-ins for the mechanical, thermal, aerodynamic and
additive-manufacturing evaluations that label every design.

Each evaluator returns plain floats in the units listed in ``CONDITIONS``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, sparse

from .errors import InfeasibleDesignError
from .voxel import VoxelGrid, _face_mask

CONDITIONS = (
    ("c1", "mean residual stress", "MPa"),
    ("c2", "mean total deformation", "mm"),
    ("c3", "mean temperature", "K"),
    ("c4", "heat density", "kW/m^2"),
    ("c5", "mean outlet pressure", "Pa"),
    ("c6", "air resistance", "N"),
    ("c7", "print heat proxy", "mm^2/layer"),
    ("c8", "overhang surfaces", "surfaces"),
    ("c9", "lightweight metric", "fill fraction"),
)
N_CONDITIONS = len(CONDITIONS)

# Five physics categories; indices into the nine-condition vector.
CATEGORIES: tuple[tuple[int, ...], ...] = ((0, 1), (2, 3), (4, 5), (6, 7), (8,))


@dataclass(frozen=True)
class Constants:
    """Load cases and material data for the surrogates (SI unless noted)."""

    force_n: float = 1000.0
    e_mat_mpa: float = 1700.0
    t_hot: float = 400.0
    t_amb: float = 288.0
    conductivity: float = 0.2
    film_coefficient: float = 5.0
    drag_coefficient: float = 1.0
    q_inf: float = 200.0
    load_axis: int = 1
    flow_axis: int = 1
    build_axis: int = 2
    thermal_tol: float = 1e-6
    thermal_max_iter: int = 10_000

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULTS = Constants()


def eval_mechanics(g: VoxelGrid, force_n: float = DEFAULTS.force_n, axis: int = DEFAULTS.load_axis,
                   e_mat_mpa: float = DEFAULTS.e_mat_mpa, slices: tuple[int, int] | None = None):
    """Springs-in-series bar model along ``axis``.

    Every slice carries the full load, so its stress is ``F / area``. Returns
    ``(mean stress [MPa], total deformation [mm])``. ``slices`` is a 0-based
    inclusive range of slices on the load path (default: all).
    """
    areas = g.occupancy.sum(axis=tuple(a for a in range(3) if a != axis)).astype(np.float64)
    if slices is not None:
        areas = areas[slices[0]:slices[1] + 1]
    if np.any(areas == 0):
        raise InfeasibleDesignError("empty slice on the load path")
    stress = force_n / (areas * g.pitch ** 2)
    return float(stress.mean()), float(np.sum(stress / e_mat_mpa) * g.pitch)


@dataclass
class ThermalSolution:
    temperature: np.ndarray  # per voxel, NaN outside material
    iterations: int
    max_update: float
    converged: bool


def _thermal_system(occ, hot, cold, biot):
    """Off-diagonal coupling, diagonal and ambient drive of the nodal heat balance.

    Conductance between face-adjacent material voxels is 1; each material face
    exposed to air (including the bounding box) couples to ambient with ``biot``.
    """
    idx = -np.ones(occ.shape, dtype=np.int64)
    nodes = np.argwhere(occ)
    n = len(nodes)
    idx[tuple(nodes.T)] = np.arange(n)
    padded = np.pad(occ, 1)
    rows, cols = [], []
    exposed = np.zeros(n)
    for axis in range(3):
        for step in (-1, 1):
            nb = np.roll(padded, -step, axis=axis)[1:-1, 1:-1, 1:-1]
            both = occ & nb
            exposed += (occ & ~nb)[occ]
            src = np.argwhere(both)
            dst = src.copy()
            dst[:, axis] += step
            rows.append(idx[tuple(src.T)])
            cols.append(idx[tuple(dst.T)])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    degree = np.asarray(adj.sum(axis=1)).ravel()
    diag = degree + biot * exposed
    fixed = np.zeros(n, dtype=bool)
    fixed[hot[occ]] = True
    if cold is not None:
        fixed[cold[occ]] = True
    return idx, adj, diag, exposed, fixed


def solve_thermal(g: VoxelGrid, hot_mask, t_hot=DEFAULTS.t_hot, t_amb=DEFAULTS.t_amb,
                  biot=None, cold_mask=None, tol=DEFAULTS.thermal_tol,
                  max_iter=DEFAULTS.thermal_max_iter) -> ThermalSolution:
    """Steady conduction on material voxels by Jacobi iteration.

    Hot voxels are pinned at ``t_hot`` (and ``cold_mask`` voxels at ``t_amb``).
    Iterates until the largest update falls below ``tol * (t_hot - t_amb)``.
    """
    if biot is None:
        biot = DEFAULTS.film_coefficient * g.pitch * 1e-3 / DEFAULTS.conductivity
    occ = g.occupancy
    if not occ.any():
        raise InfeasibleDesignError("no material to conduct heat")
    hot = np.asarray(hot_mask, dtype=bool) & occ
    cold = None if cold_mask is None else np.asarray(cold_mask, dtype=bool) & occ
    idx, adj, diag, exposed, fixed = _thermal_system(occ, hot, cold, biot)
    n = adj.shape[0]
    T = np.full(n, float(t_amb))
    T[hot[occ]] = t_hot
    free = ~fixed
    drive = biot * exposed * t_amb
    safe_diag = np.where(diag > 0, diag, 1.0)
    limit = tol * abs(t_hot - t_amb)
    it, upd, prev = 0, np.inf, np.inf
    converged = False
    while it < max_iter:
        new = (adj @ T + drive) / safe_diag
        new = np.where(free & (diag > 0), new, T)
        upd = float(np.max(np.abs(new - T))) if n else 0.0
        T = new
        it += 1
        # The update alone understates the remaining error by 1/(1 - rho); bound
        # the error with the observed contraction rate as well.
        rho = min(upd / prev, 0.9999) if prev > 0 and np.isfinite(prev) else 0.9999
        prev = upd
        if upd < limit and upd * rho / (1.0 - rho) < limit:
            converged = True
            break
    field = np.full(occ.shape, np.nan)
    field[occ] = T
    return ThermalSolution(field, it, upd, converged or upd == 0.0)


def solve_thermal_dense(g: VoxelGrid, hot_mask, t_hot=DEFAULTS.t_hot, t_amb=DEFAULTS.t_amb,
                        biot=None, cold_mask=None) -> np.ndarray:
    """Direct solve of the same nodal balance; only for small grids."""
    if biot is None:
        biot = DEFAULTS.film_coefficient * g.pitch * 1e-3 / DEFAULTS.conductivity
    occ = g.occupancy
    hot = np.asarray(hot_mask, dtype=bool) & occ
    cold = None if cold_mask is None else np.asarray(cold_mask, dtype=bool) & occ
    _, adj, diag, exposed, fixed = _thermal_system(occ, hot, cold, biot)
    A = np.diag(diag) - adj.toarray()
    b = biot * exposed * t_amb
    fixed_val = np.where(hot[occ], t_hot, t_amb)
    A[fixed] = 0.0
    A[fixed, fixed] = 1.0
    b[fixed] = fixed_val[fixed]
    field = np.full(occ.shape, np.nan)
    field[occ] = np.linalg.solve(A, b)
    return field


def thermal_conditions(g: VoxelGrid, field: np.ndarray, conductivity=DEFAULTS.conductivity):
    """``(mean temperature [K], mean face heat flux [kW/m^2])`` of a solved field."""
    occ = g.occupancy
    c3 = float(np.mean(field[occ]))
    diffs = []
    for axis in range(3):
        a = np.take(field, np.arange(field.shape[axis] - 1), axis=axis)
        b = np.take(field, np.arange(1, field.shape[axis]), axis=axis)
        d = np.abs(a - b)
        diffs.append(d[np.isfinite(d)])
    diffs = np.concatenate(diffs)
    pitch_m = g.pitch * 1e-3
    c4 = float(conductivity * diffs.mean() / pitch_m * 1e-3) if diffs.size else 0.0
    return c3, c4


def eval_thermal(g: VoxelGrid, hot_mask, t_hot=DEFAULTS.t_hot, t_amb=DEFAULTS.t_amb, **kw):
    sol = solve_thermal(g, hot_mask, t_hot, t_amb, **kw)
    if not np.any(np.asarray(hot_mask) & g.occupancy):
        raise InfeasibleDesignError("heat source region holds no material")
    return thermal_conditions(g, sol.temperature)


def eval_aero(g: VoxelGrid, q_inf: float = DEFAULTS.q_inf, axis: int = DEFAULTS.flow_axis,
              drag_coefficient: float = DEFAULTS.drag_coefficient):
    """``(outlet pressure [Pa], drag [N])`` from frontal blockage and outlet porosity."""
    a = "jkl"[axis]
    inlet = _face_mask(g.dims, a + "-")
    outlet = _face_mask(g.dims, a + "+")
    void = ~g.occupancy
    labels, _ = ndimage.label(void, structure=ndimage.generate_binary_structure(3, 1))
    through = np.unique(labels[outlet & void])
    through = through[through > 0]
    open_inlet = np.isin(labels, through) & inlet
    n_frontal = int(inlet.sum())
    blocked = n_frontal - int(open_inlet.sum())
    pitch_m = g.pitch * 1e-3
    c6 = drag_coefficient * q_inf * blocked * pitch_m ** 2
    porosity = float(void[outlet].mean())
    c5 = q_inf * (1.0 - porosity)
    return float(c5), float(c6)


def eval_am(g: VoxelGrid, build_axis: int = DEFAULTS.build_axis):
    """``(mean layer area [mm^2/layer], downward-facing overhang count)``."""
    occ = g.occupancy
    n_layers = occ.shape[build_axis]
    per_layer = occ.sum(axis=tuple(a for a in range(3) if a != build_axis))
    c7 = float(per_layer.sum() / n_layers * g.pitch ** 2)
    above = np.take(occ, np.arange(1, n_layers), axis=build_axis)
    below = np.take(occ, np.arange(n_layers - 1), axis=build_axis)
    c8 = float(np.count_nonzero(above & ~below))
    return c7, c8


def eval_mass(g: VoxelGrid) -> float:
    return g.count / g.dims.total


def evaluate(g: VoxelGrid, spec, constants: Constants = DEFAULTS) -> np.ndarray:
    """All nine conditions; raises ``InfeasibleDesignError`` for mechanics/thermal failures."""
    c = constants
    span = load_path_slices(g.dims, spec, c.load_axis)
    c1, c2 = eval_mechanics(g, c.force_n, c.load_axis, c.e_mat_mpa, span)
    biot = c.film_coefficient * g.pitch * 1e-3 / c.conductivity
    hot = spec.engine_mask(g.dims)
    sol = solve_thermal(g, hot, c.t_hot, c.t_amb, biot=biot, tol=c.thermal_tol, max_iter=c.thermal_max_iter)
    if not np.any(hot & g.occupancy):
        raise InfeasibleDesignError("heat source region holds no material")
    c3, c4 = thermal_conditions(g, sol.temperature, c.conductivity)
    c5, c6 = eval_aero(g, c.q_inf, c.flow_axis, c.drag_coefficient)
    c7, c8 = eval_am(g, c.build_axis)
    c9 = eval_mass(g)
    return np.array([c1, c2, c3, c4, c5, c6, c7, c8, c9])


def load_path_slices(dims, spec, axis: int) -> tuple[int, int] | None:
    """0-based slice range spanned by the mandatory material along ``axis``."""
    if spec is None:
        return None
    mat = spec.material_mask(dims)
    if not mat.any():
        return None
    present = np.flatnonzero(mat.any(axis=tuple(a for a in range(3) if a != axis)))
    return int(present[0]), int(present[-1])
