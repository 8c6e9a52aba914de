"""Condition-driven design generation and optimum selection.

A regressor (f_net) maps normalised conditions to latent codes. Decoding a
schedule of increasingly demanding conditions gives an ordered design sweep;
the per-step material change rate along the sweep picks the optimum.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import NumericalError, ShapeError
from .surrogates import CONDITIONS, N_CONDITIONS
from .voxel import Dims, VoxelGrid, hamming

log = logging.getLogger(__name__)

CONSTANT = "constant"
RAMP = "ramp"
# Conditions ramped towards their lower value; c1-c4 are held.
DEFAULT_POLICY = (CONSTANT,) * 4 + (RAMP,) * 5
LOWER_IS_BETTER = (True,) * N_CONDITIONS
FNET_HIDDEN = (16, 32, 64, 128, 256, 128, 64, 32)


@dataclass
class FnetConfig:
    hidden: tuple = FNET_HIDDEN
    epochs: int = 600
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class FnetModel:
    def __init__(self, latent_dim: int, config: FnetConfig | None = None):
        self.config = config or FnetConfig()
        self.latent_dim = int(latent_dim)
        rng = np.random.default_rng(self.config.seed)
        self.net = nn.MLP((N_CONDITIONS,) + tuple(self.config.hidden) + (self.latent_dim,), rng)
        self.history: list[float] = []
        self.report: dict = {}

    def params(self):
        return self.net.params()

    def __call__(self, c) -> np.ndarray:
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        if c.shape[1] != N_CONDITIONS:
            raise ShapeError(f"f_net expects {N_CONDITIONS} conditions")
        return self.net(c)

    def save(self, path) -> None:
        header = {"kind": "fnet", "latent_dim": self.latent_dim, "config": self.config.to_dict(),
                  "report": self.report}
        nn.save_checkpoint(path, header, self.params())

    @classmethod
    def load(cls, path) -> "FnetModel":
        header, tensors = nn.load_checkpoint(path)
        if header.get("kind") != "fnet":
            raise ShapeError(f"{path}: not an f_net checkpoint")
        cfg = header["config"]
        model = cls(header["latent_dim"], FnetConfig(**{**cfg, "hidden": tuple(cfg["hidden"])}))
        for p, t in zip(model.params(), tensors):
            if p.shape != t.shape:
                raise ShapeError(f"{path}: tensor shape mismatch")
            p[...] = t
        model.report = header.get("report", {})
        return model


def train_fnet(C, Z, config: FnetConfig | None = None) -> FnetModel:
    """Fit conditions -> latent means by minibatch Adam on the mean squared error."""
    C = np.asarray(C, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if len(C) != len(Z):
        raise ShapeError("conditions and latents are not aligned")
    config = config or FnetConfig()
    model = FnetModel(Z.shape[1], config)
    params = model.params()
    state = nn.AdamState(lr=config.lr)
    rng = np.random.default_rng([config.seed, 2])
    n = len(C)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out, cache = model.net.forward(C[idx])
            diff = out - Z[idx]
            _, grads = model.net.backward(cache, 2.0 * diff / diff.size)
            nn.adam_step(params, grads, state)
        mse = float(np.mean((model(C) - Z) ** 2))
        if not np.isfinite(mse):
            raise NumericalError(f"f_net loss diverged in epoch {epoch + 1}")
        model.history.append(mse)
    var = float(np.mean(Z.var(axis=0)))
    model.report = {"mse": model.history[-1] if model.history else float("nan"),
                    "latent_variance": var,
                    "relative_mse": model.history[-1] / var if var > 0 and model.history else 0.0}
    return model


@dataclass
class ConditionSchedule:
    rows: np.ndarray  # (q, 9) raw condition values
    normalized: np.ndarray  # (q, 9) z-scores under the training stats
    policy: tuple
    bounds: np.ndarray  # (9, 2) min/max

    @property
    def q(self) -> int:
        return len(self.rows)

    def to_dict(self) -> dict:
        return {"q": self.q, "policy": list(self.policy), "bounds": self.bounds.tolist(),
                "rows": self.rows.tolist(), "normalized": self.normalized.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ConditionSchedule":
        return cls(np.asarray(d["rows"]), np.asarray(d["normalized"]), tuple(d["policy"]),
                   np.asarray(d["bounds"]))


def build_schedule(stats, q: int = 100, policy=DEFAULT_POLICY, lower_is_better=LOWER_IS_BETTER,
                   constant_values=None) -> ConditionSchedule:
    """Rows 1..q go from the worst to the best observed value of every ramped
    condition; held conditions stay at ``constant_values`` (default: the mean)."""
    if q < 2:
        raise ValueError("a sweep needs q >= 2")
    policy = tuple(policy)
    lo, hi = np.asarray(stats.min, dtype=np.float64), np.asarray(stats.max, dtype=np.float64)
    held = np.clip(stats.mean if constant_values is None else np.asarray(constant_values), lo, hi)
    t = np.linspace(0.0, 1.0, q)[:, None]
    worst = np.where(lower_is_better, hi, lo)
    best = np.where(lower_is_better, lo, hi)
    ramp = worst + t * (best - worst)
    ramp[-1] = best
    rows = np.where(np.array(policy) == RAMP, ramp, held)
    rows = np.clip(rows, lo, hi)
    return ConditionSchedule(rows, stats.normalize(rows), policy, np.stack([lo, hi], axis=1))


def generate_sweep(schedule: ConditionSchedule, fnet: FnetModel, model) -> np.ndarray:
    """Decoded probabilities ``(q, n_voxels)`` for every schedule row."""
    z_hat = fnet(schedule.normalized)
    return model.decode(z_hat, schedule.normalized)[0]


def material_change_rate(grids, dims: Dims):
    """Fraction of voxels that flip between consecutive designs, plus its sum.

    ``grids`` is a sequence of ``VoxelGrid`` or a ``(q, n_voxels)`` 0/1 array.
    """
    if len(grids) < 2:
        raise ValueError("need at least two designs")
    if isinstance(grids[0], VoxelGrid):
        for g in grids:
            if g.dims != dims:
                raise ShapeError("sweep grids differ in dims")
        series = np.array([hamming(a, b) for a, b in zip(grids[:-1], grids[1:])], dtype=np.float64)
    else:
        arr = np.asarray(grids) >= 0.5
        if arr.shape[1] != dims.total:
            raise ShapeError("sweep grids differ in dims")
        series = np.count_nonzero(arr[1:] != arr[:-1], axis=1).astype(np.float64)
    series /= dims.total
    return series, float(series.sum())


def select_optimum(series, q: int | None = None, p_min: float = 0.7) -> int:
    """1-based index ``i`` of the largest change ``chi_i -> chi_{i+1}`` in the
    high-performance tail ``i >= p_min * q``; ties go to the higher index.

    The optimal design is ``chi_{i+1}``.
    """
    series = np.asarray(series, dtype=np.float64)
    q = len(series) + 1 if q is None else q
    idx = np.arange(1, len(series) + 1)
    eligible = idx >= p_min * q
    if not eligible.any():
        log.warning("no sweep step at or above p_min=%.3g; using the global maximum", p_min)
        eligible[:] = True
    cand = idx[eligible]
    vals = series[eligible]
    best = vals.max()
    return int(cand[vals == best].max())


@dataclass
class SweepResult:
    probs: np.ndarray
    grids: list
    schedule: ConditionSchedule
    delta_m: np.ndarray
    cumulative: float
    opt_index: int
    p_min: float = 0.7

    @property
    def opt_grid(self) -> VoxelGrid:
        return self.grids[self.opt_index]  # design chi_{i+1} sits at 0-based position i


def run_sweep(schedule, fnet, model, p_min: float = 0.7, pitch: float = 10.0) -> SweepResult:
    dims = model.config.dims
    probs = generate_sweep(schedule, fnet, model)
    grids = [VoxelGrid(dims, row >= 0.5, pitch) for row in probs]
    series, total = material_change_rate(grids, dims)
    opt = select_optimum(series, schedule.q, p_min)
    return SweepResult(probs, grids, schedule, series, total, opt, p_min)


def best_training_design(values, retained, policy=DEFAULT_POLICY, lower_is_better=LOWER_IS_BETTER):
    """Row position of the retained design with the best mean standardised score
    over the ramped conditions."""
    values = np.asarray(values, dtype=np.float64)
    retained = np.asarray(retained)
    sub = values[retained]
    std = sub.std(axis=0)
    zs = (sub - sub.mean(axis=0)) / np.where(std > 0, std, 1.0)
    sign = np.where(lower_is_better, 1.0, -1.0)
    ramped = np.array(policy) == RAMP
    score = (zs * sign)[:, ramped].mean(axis=1)
    return int(retained[int(np.argmin(score))])


def validate_optimum(values_opt, feasible: bool, train_values, train_feasible, retained,
                     policy=DEFAULT_POLICY, lower_is_better=LOWER_IS_BETTER) -> dict:
    """Side-by-side comparison of the optimum's labels with the best training design."""
    train_values = np.asarray(train_values, dtype=np.float64)
    best_row = best_training_design(train_values, retained, policy, lower_is_better)
    best = train_values[best_row]
    feas_rows = train_values[np.asarray(train_feasible, dtype=bool)]
    lo, hi = feas_rows.min(axis=0), feas_rows.max(axis=0)
    rows = []
    for n, (name, desc, unit) in enumerate(CONDITIONS):
        v = float(values_opt[n]) if feasible else None
        b = float(best[n])
        dev = None if v is None or b == 0 else (v - b) / abs(b) * 100.0
        improved = None
        if v is not None:
            improved = bool(v < b) if lower_is_better[n] else bool(v > b)
        rows.append({
            "condition": name, "description": desc, "unit": unit, "policy": policy[n],
            "optimum": v, "best_training": b, "deviation_percent": dev, "improved": improved,
            "training_min": float(lo[n]), "training_max": float(hi[n]),
            "within_training_range": None if v is None else bool(lo[n] <= v <= hi[n]),
        })
    ramped = [r for r in rows if r["policy"] == RAMP]
    held = [r for r in rows if r["policy"] == CONSTANT]
    return {
        "schema": "voxelforge.optimum_report",
        "version": 1,
        "feasible": bool(feasible),
        "best_training_row": best_row,
        "conditions": rows,
        "held_within_range": bool(feasible and all(r["within_training_range"] for r in held)),
        "improved_ramped": sum(1 for r in ramped if r["improved"]),
    }


def write_sweep(result: SweepResult, out_dir, extra: dict | None = None) -> None:
    from .voxel import save_grid
    out = Path(out_dir)
    (out / "designs").mkdir(parents=True, exist_ok=True)
    files = []
    for i, g in enumerate(result.grids, start=1):
        name = f"designs/{i:03d}.vxg"
        save_grid(g, out / name)
        files.append(name)
    np.save(out / "probs.npy", result.probs)
    doc = {
        "schema": "voxelforge.sweep",
        "version": 1,
        "schedule": result.schedule.to_dict(),
        "designs": files,
        "delta_m": result.delta_m.tolist(),
        "delta_m_total": result.cumulative,
        "p_min": result.p_min,
        "opt_index": result.opt_index,
        "opt_design": files[result.opt_index],
    }
    doc.update(extra or {})
    (out / "sweep.json").write_text(json.dumps(doc, indent=1))
