"""Pipeline configuration: one JSON document with a section per stage.

Every section is optional; missing keys take the module defaults and unknown
keys are rejected so typos cannot silently fall back to a default.
"""
from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

from .dcvae import BRANCH_WIDTHS, DESK_ENCODER, DcvaeConfig
from .errors import ConfigError, VoxelForgeError
from .generation import InterfaceSpec
from .noise import NoiseParams
from .optimize import DEFAULT_POLICY, FnetConfig
from .surrogates import Constants
from .voxel import DESK_DIMS, Dims

SCHEMA = "voxelforge.config"
VERSION = 1

DEFAULTS = {
    "dims": {"j_max": DESK_DIMS.j_max, "k_max": DESK_DIMS.k_max, "l_max": DESK_DIMS.l_max, "pitch_mm": 10.0},
    # base_frequency None scales the base octave to the grid
    "noise": {"octaves": 4, "base_frequency": None, "lacunarity": 2.0, "persistence": 0.5,
              "fill_threshold": 0.0},
    "interfaces": None,
    "surrogates": {f.name: f.default for f in fields(Constants)},
    "dcvae": {"encoder_widths": list(DESK_ENCODER), "latent_dim": 8, "branch_widths": list(BRANCH_WIDTHS),
              "partition": [[0, 1], [2, 3], [4, 5], [6, 7], [8]], "epochs": 200, "batch_size": 32, "lr": 1e-3},
    "fnet": {"hidden": [16, 32, 64, 128, 256, 128, 64, 32], "epochs": 600, "batch_size": 32, "lr": 1e-3},
    "sweep": {"q": 100, "p_min": 0.7, "policy": list(DEFAULT_POLICY), "repair_optimum": True},
    "paths": {"dataset": "dataset", "labels": "labels.jsonl", "stats": "stats.json", "model": "model",
              "fnet": "fnet.nnp", "sweep": "sweep"},
    "seed": 0,
}


def _merge(base, user, where: str):
    if base is None or not isinstance(base, dict):
        return copy.deepcopy(user)
    if not isinstance(user, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(user) - set(base))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    out = copy.deepcopy(base)
    for k, v in user.items():
        out[k] = _merge(base[k], v, f"{where}.{k}") if isinstance(base[k], dict) else copy.deepcopy(v)
    return out


class PipelineConfig:
    def __init__(self, doc: dict | None = None):
        doc = dict(doc or {})
        schema = doc.pop("schema", SCHEMA)
        version = doc.pop("version", VERSION)
        if schema != SCHEMA or version != VERSION:
            raise ConfigError(f"unsupported config schema {schema!r} version {version!r}")
        self.data = _merge(DEFAULTS, doc, "config")
        try:
            self._validate()
        except (TypeError, ValueError, KeyError, VoxelForgeError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def _validate(self):
        # Building every typed view surfaces bad values at load time.
        self.dims
        self.noise_params()
        self.interface_spec()
        self.constants()
        self.dcvae_config()
        self.fnet_config()
        if int(self.data["sweep"]["q"]) < 2:
            raise ValueError("sweep.q must be >= 2")
        if not 0 <= float(self.data["sweep"]["p_min"]) <= 1:
            raise ValueError("sweep.p_min must lie in [0, 1]")
        if len(self.data["sweep"]["policy"]) != 9:
            raise ValueError("sweep.policy needs one entry per condition")
        if not isinstance(self.data["seed"], int):
            raise ValueError("seed must be an integer")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except ValueError as exc:
            raise ConfigError(f"{path}: not valid JSON") from exc
        return cls(doc)

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "version": VERSION, **copy.deepcopy(self.data)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def dims(self) -> Dims:
        d = self.data["dims"]
        return Dims(d["j_max"], d["k_max"], d["l_max"])

    @property
    def pitch(self) -> float:
        return float(self.data["dims"]["pitch_mm"])

    def noise_params(self) -> NoiseParams:
        kw = {k: v for k, v in self.data["noise"].items() if v is not None}
        return NoiseParams.for_dims(self.dims, **kw)

    def interface_spec(self) -> InterfaceSpec:
        if self.data["interfaces"] is None:
            return InterfaceSpec.default(self.dims)
        spec = InterfaceSpec.from_dict(self.data["interfaces"])
        spec.validate(self.dims)
        return spec

    def constants(self) -> Constants:
        return Constants(**self.data["surrogates"])

    def dcvae_config(self, mode: str = "deep-input", seed: int | None = None) -> DcvaeConfig:
        d = self.data["dcvae"]
        return DcvaeConfig(dims=self.dims, mode=mode, seed=self.seed if seed is None else seed,
                           encoder_widths=tuple(d["encoder_widths"]), latent_dim=d["latent_dim"],
                           branch_widths=tuple(d["branch_widths"]),
                           partition=tuple(tuple(p) for p in d["partition"]), epochs=d["epochs"],
                           batch_size=d["batch_size"], lr=d["lr"])

    def fnet_config(self, seed: int | None = None) -> FnetConfig:
        d = self.data["fnet"]
        return FnetConfig(hidden=tuple(d["hidden"]), epochs=d["epochs"], batch_size=d["batch_size"],
                          lr=d["lr"], seed=self.seed if seed is None else seed)

    @property
    def sweep(self) -> dict:
        return self.data["sweep"]
