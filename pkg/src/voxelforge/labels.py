"""Dataset labelling, z-score normalisation and the two-sigma outlier filter."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InfeasibleDesignError
from .surrogates import CONDITIONS, DEFAULTS, N_CONDITIONS, Constants, evaluate

log = logging.getLogger(__name__)

LABELS_SCHEMA = "voxelforge.labels"
STATS_SCHEMA = "voxelforge.stats"
VERSION = 1


@dataclass
class LabelTable:
    ids: np.ndarray
    values: np.ndarray  # (n, 9); NaN where a design is infeasible
    feasible: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class LabelStats:
    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray
    degenerate: list = field(default_factory=list)

    def normalize(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        safe = np.where(self.std > 0, self.std, 1.0)
        z = (values - self.mean) / safe
        return np.where(self.std > 0, z, 0.0)

    def denormalize(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {
            "schema": STATS_SCHEMA,
            "version": VERSION,
            "conditions": [c[0] for c in CONDITIONS],
            "units": [c[2] for c in CONDITIONS],
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "min": self.min.tolist(),
            "max": self.max.tolist(),
            "degenerate": list(self.degenerate),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelStats":
        if d.get("schema") != STATS_SCHEMA or d.get("version") != VERSION:
            raise FormatError("unsupported stats schema/version")
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("mean", "std", "min", "max")),
                   degenerate=list(d.get("degenerate", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "LabelStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def label_grid(g, spec, constants: Constants = DEFAULTS) -> tuple[np.ndarray, bool]:
    try:
        return evaluate(g, spec, constants), True
    except InfeasibleDesignError as exc:
        log.warning("infeasible design: %s", exc)
        return np.full(N_CONDITIONS, np.nan), False


def _label_job(args):
    root, i, constants = args
    from .generation import Dataset
    ds = Dataset(root)
    return label_grid(ds.grid(i), ds.spec, constants)


def label_dataset(dataset, out_path=None, constants: Constants = DEFAULTS, jobs: int = 1) -> LabelTable:
    """Evaluate all designs; optionally write ``labels.jsonl`` (header line + one record per design)."""
    ids = np.array(dataset.ids(), dtype=np.int64)
    if jobs > 1:
        from multiprocessing import Pool
        with Pool(jobs) as pool:
            results = pool.map(_label_job, [(str(dataset.root), int(i), constants) for i in ids], chunksize=16)
    else:
        results = [label_grid(dataset.grid(int(i)), dataset.spec, constants) for i in ids]
    values = np.array([r[0] for r in results]).reshape(len(ids), N_CONDITIONS)
    feasible = np.array([r[1] for r in results], dtype=bool)
    table = LabelTable(ids, values, feasible)
    if out_path is not None:
        write_labels(table, out_path, constants)
    return table


def write_labels(table: LabelTable, path, constants: Constants = DEFAULTS) -> None:
    lines = [json.dumps({"schema": LABELS_SCHEMA, "version": VERSION,
                         "conditions": [c[0] for c in CONDITIONS],
                         "constants": constants.to_dict()})]
    for i, row, ok in zip(table.ids, table.values, table.feasible):
        c = [float(v) if ok else None for v in row]
        lines.append(json.dumps({"design_id": int(i), "c": c, "feasible": bool(ok)}))
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path) -> LabelTable:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty label file")
    header = json.loads(lines[0])
    if header.get("schema") != LABELS_SCHEMA or header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported label schema/version")
    ids, vals, feas = [], [], []
    for line in lines[1:]:
        rec = json.loads(line)
        ids.append(rec["design_id"])
        vals.append([np.nan if v is None else v for v in rec["c"]])
        feas.append(rec["feasible"])
    return LabelTable(np.array(ids, dtype=np.int64), np.array(vals, dtype=np.float64).reshape(-1, N_CONDITIONS),
                      np.array(feas, dtype=bool))


def compute_stats(values: np.ndarray, retained: np.ndarray | None = None) -> LabelStats:
    """Mean/std over ``values``; min/max over the ``retained`` subset (default: all rows)."""
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    degenerate = [CONDITIONS[i][0] for i in np.flatnonzero(std == 0)]
    sub = values if retained is None else values[retained]
    return LabelStats(mean, std, sub.min(axis=0), sub.max(axis=0), degenerate)


def normalize_and_filter(values, feasible=None, limit: float = 2.0):
    """Z-score each condition over feasible rows and drop rows with any ``|z| > limit``.

    Returns ``(z for every row, stats, retained row positions)``. Min/max in the
    stats describe the retained rows, i.e. the range actually seen in training.
    """
    values = np.asarray(values, dtype=np.float64)
    feasible = np.ones(len(values), dtype=bool) if feasible is None else np.asarray(feasible, dtype=bool)
    rows = np.flatnonzero(feasible)
    if len(rows) < 2:
        raise ValueError("need at least two feasible rows to normalise")
    stats = compute_stats(values[rows])
    if stats.degenerate:
        log.warning("zero-variance conditions pass through as 0: %s", ", ".join(stats.degenerate))
    z = np.full_like(values, np.nan)
    z[rows] = stats.normalize(values[rows])
    keep = np.all(np.abs(z[rows]) <= limit, axis=1)
    retained = rows[keep]
    sub = values[retained] if len(retained) else values[rows]
    stats.min, stats.max = sub.min(axis=0), sub.max(axis=0)
    return z, stats, retained
