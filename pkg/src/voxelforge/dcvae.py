"""Conditional VAE over flattened voxel grids with per-category condition branches.

In ``deep-input`` mode each physics category of the condition vector runs
through its own small ReLU network; the concatenated branch outputs (``a_M``)
join the last encoder layer and the first decoder layer. In ``fc-baseline``
mode the raw conditions are only appended to the flattened design, so the
decoder sees nothing but ``z``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import NumericalError, ShapeError
from .surrogates import CATEGORIES, N_CONDITIONS
from .voxel import Dims, ProbGrid, VoxelGrid

log = logging.getLogger(__name__)

DEEP = "deep-input"
FC = "fc-baseline"
FULL_ENCODER = (1024, 512, 256, 128, 64, 32, 16)
DESK_ENCODER = (512, 256, 128, 64, 32, 16)
BRANCH_WIDTHS = (4, 8, 16, 32, 64, 128, 256)


@dataclass
class DcvaeConfig:
    dims: Dims
    encoder_widths: tuple = FULL_ENCODER
    latent_dim: int = 32
    branch_widths: tuple = BRANCH_WIDTHS
    partition: tuple = CATEGORIES
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    mode: str = DEEP
    branch_bias_init: float = 0.0

    def __post_init__(self):
        self.dims = Dims.of(self.dims)
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.branch_widths = tuple(int(w) for w in self.branch_widths)
        self.partition = tuple(tuple(int(i) for i in p) for p in self.partition)
        if self.mode not in (DEEP, FC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.latent_dim < 1 or any(w <= 0 for w in self.encoder_widths + self.branch_widths):
            raise ValueError("widths and latent_dim must be positive")
        flat = sorted(i for p in self.partition for i in p)
        if flat != list(range(N_CONDITIONS)):
            raise ValueError("partition must cover each condition exactly once")

    @classmethod
    def desk(cls, **kw) -> "DcvaeConfig":
        base = dict(dims=Dims(12, 16, 14), encoder_widths=DESK_ENCODER, latent_dim=8, epochs=200)
        base.update(kw)
        return cls(**base)

    @property
    def n_voxels(self) -> int:
        return self.dims.total

    @property
    def a_m_width(self) -> int:
        return len(self.partition) * self.branch_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = self.dims.to_dict()
        d["encoder_widths"] = list(self.encoder_widths)
        d["branch_widths"] = list(self.branch_widths)
        d["partition"] = [list(p) for p in self.partition]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DcvaeConfig":
        d = dict(d)
        d["dims"] = Dims.of(d["dims"])
        return cls(**d)


class DcvaeModel:
    def __init__(self, config: DcvaeConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng
        c = config
        deep = c.mode == DEEP
        enc_in = c.n_voxels + (0 if deep else N_CONDITIONS)
        self.encoder = nn.MLP((enc_in,) + c.encoder_widths, rng, final_activation="relu")
        head_in = c.encoder_widths[-1] + (c.a_m_width if deep else 0)
        self.mu_head = nn.DenseLayer.xavier(head_in, c.latent_dim, rng)
        self.logvar_head = nn.DenseLayer.xavier(head_in, c.latent_dim, rng)
        dec_in = c.latent_dim + (c.a_m_width if deep else 0)
        self.decoder = nn.MLP((dec_in,) + tuple(reversed(c.encoder_widths)) + (c.n_voxels,), rng)
        self.branches = []
        if deep:
            self.branches = [nn.MLP((len(p),) + c.branch_widths, rng, final_activation="relu")
                             for p in c.partition]
            for b in self.branches:
                for layer in b.layers:
                    layer.bias[:] = c.branch_bias_init
        self.history: list[dict] = []

    @property
    def deep(self) -> bool:
        return self.config.mode == DEEP

    def params(self) -> list[np.ndarray]:
        ps = self.encoder.params() + self.mu_head.params() + self.logvar_head.params()
        ps += self.decoder.params()
        for b in self.branches:
            ps += b.params()
        return ps

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    # ---- forward pieces -------------------------------------------------
    def _check_conditions(self, c):
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        if c.shape[1] != N_CONDITIONS:
            raise ShapeError(f"expected {N_CONDITIONS} conditions, got {c.shape[1]}")
        if not np.all(np.isfinite(c)):
            raise ValueError("conditions must be finite")
        return c

    def branch_embed(self, c):
        """The ``a_M`` vector(s) for normalised conditions ``c``."""
        if not self.deep:
            raise ValueError("branch_embed needs a deep-input model")
        return self._branches(self._check_conditions(c))[0]

    def _branches(self, c):
        outs, caches = [], []
        for part, net in zip(self.config.partition, self.branches):
            o, cache = net.forward(c[:, list(part)])
            outs.append(o)
            caches.append(cache)
        return np.concatenate(outs, axis=1), caches

    def _as_batch(self, x):
        if isinstance(x, VoxelGrid):
            if x.dims != self.config.dims:
                raise ShapeError(f"grid dims {x.dims.shape} != model dims {self.config.dims.shape}")
            x = x.flat()
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.config.n_voxels:
            raise ShapeError(f"design has {x.shape[1]} voxels, model expects {self.config.n_voxels}")
        return x

    def forward(self, x, c, eps):
        """Full pass for a batch; returns ``(logits, cache)``."""
        x = self._as_batch(x)
        c = self._check_conditions(c)
        a_m = bcache = None
        if self.deep:
            a_m, bcache = self._branches(c)
            enc_in = x
        else:
            enc_in = np.concatenate([x, c], axis=1)
        h, ecache = self.encoder.forward(enc_in)
        head_in = np.concatenate([h, a_m], axis=1) if self.deep else h
        mu = nn.dense_forward(self.mu_head, head_in)
        raw = nn.dense_forward(self.logvar_head, head_in)
        logvar = nn.clamp_logvar(raw)
        z, _, dz_dlv = nn.reparameterize(mu, logvar, eps)
        dec_in = np.concatenate([z, a_m], axis=1) if self.deep else z
        logits, dcache = self.decoder.forward(dec_in)
        cache = dict(x=x, c=c, a_m=a_m, bcache=bcache, ecache=ecache, head_in=head_in,
                     mu=mu, raw=raw, logvar=logvar, dz_dlv=dz_dlv, dcache=dcache)
        return logits, cache

    def relu_pattern(self, x, c, eps) -> np.ndarray:
        """On/off state of every ReLU for this batch; used to skip kinks in gradient checks."""
        _, cache = self.forward(x, c, eps)
        parts = [nn.MLP.relu_pattern(cache["ecache"]), nn.MLP.relu_pattern(cache["dcache"])]
        parts += [nn.MLP.relu_pattern(bc) for bc in cache["bcache"] or []]
        parts.append(np.abs(cache["raw"]).ravel() < nn.LOGVAR_CLAMP)
        return np.concatenate(parts)

    def loss(self, x, c, eps):
        """Batch-mean ``(total, recon, kl)`` of the negative conditional ELBO."""
        logits, cache = self.forward(x, c, eps)
        recon, _ = nn.recon_loss_bce(logits, cache["x"])
        kl, _, _ = nn.kl_diag_gaussian(cache["mu"], cache["logvar"])
        r, k = float(recon.mean()), float(kl.mean())
        return r + k, r, k

    def loss_and_grads(self, x, c, eps):
        logits, cache = self.forward(x, c, eps)
        xb = cache["x"]
        n = xb.shape[0]
        recon, dlogits = nn.recon_loss_bce(logits, xb)
        kl, dkl_mu, dkl_lv = nn.kl_diag_gaussian(cache["mu"], cache["logvar"])
        dlogits /= n
        d_dec_in, g_dec = self.decoder.backward(cache["dcache"], dlogits)
        L = self.config.latent_dim
        dz = d_dec_in[:, :L]
        dmu = dz + dkl_mu / n
        dlv = dz * cache["dz_dlv"] + dkl_lv / n
        dlv = dlv * (np.abs(cache["raw"]) < nn.LOGVAR_CLAMP)
        head_in = cache["head_in"]
        dh_mu, dW_mu, db_mu = nn.dense_backward(self.mu_head, head_in, dmu)
        dh_lv, dW_lv, db_lv = nn.dense_backward(self.logvar_head, head_in, dlv)
        dhead = dh_mu + dh_lv
        H = self.config.encoder_widths[-1]
        _, g_enc = self.encoder.backward(cache["ecache"], dhead[:, :H])
        g_branch = []
        if self.deep:
            da_m = dhead[:, H:] + d_dec_in[:, L:]
            width = self.config.branch_widths[-1]
            for b, (net, bc) in enumerate(zip(self.branches, cache["bcache"])):
                _, g = net.backward(bc, da_m[:, b * width:(b + 1) * width])
                g_branch += g
        grads = g_enc + [dW_mu, db_mu, dW_lv, db_lv] + g_dec + g_branch
        r, k = float(recon.mean()), float(kl.mean())
        return (r + k, r, k), grads

    # ---- inference ------------------------------------------------------
    def encode(self, x, c):
        """Posterior ``(mu, logvar)``; no sampling."""
        x = self._as_batch(x)
        c = self._check_conditions(c)
        if self.deep:
            a_m = self._branches(c)[0]
            h = self.encoder(x)
            head_in = np.concatenate([h, a_m], axis=1)
        else:
            head_in = self.encoder(np.concatenate([x, c], axis=1))
        mu = nn.dense_forward(self.mu_head, head_in)
        logvar = nn.clamp_logvar(nn.dense_forward(self.logvar_head, head_in))
        return mu, logvar

    def decode_logits(self, z, c):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"latent has {z.shape[1]} dims, model expects {self.config.latent_dim}")
        c = self._check_conditions(c)
        if not self.deep:
            return self.decoder(z)
        return self.decoder(np.concatenate([z, self._branches(c)[0]], axis=1))

    def decode(self, z, c):
        """Returns ``(probabilities, logits)`` as ``(batch, n_voxels)`` arrays."""
        logits = self.decode_logits(z, c)
        return nn.sigmoid(logits), logits

    def reconstruct(self, x, c):
        """Deterministic reconstruction through ``z = mu``."""
        mu, _ = self.encode(x, c)
        return self.decode(mu, c)[0]

    def prob_grid(self, probs_row) -> ProbGrid:
        return ProbGrid(self.config.dims, probs_row)

    # ---- persistence ----------------------------------------------------
    def save(self, path) -> None:
        header = {"kind": "dcvae", "config": self.config.to_dict(), "seed": self.config.seed}
        nn.save_checkpoint(path, header, self.params())

    @classmethod
    def load(cls, path) -> "DcvaeModel":
        header, tensors = nn.load_checkpoint(path)
        if header.get("kind") != "dcvae":
            raise ShapeError(f"{path}: not a dcvae checkpoint")
        model = cls(DcvaeConfig.from_dict(header["config"]))
        params = model.params()
        if len(params) != len(tensors) or any(p.shape != t.shape for p, t in zip(params, tensors)):
            raise ShapeError(f"{path}: checkpoint topology does not match its config")
        for p, t in zip(params, tensors):
            p[...] = t
        return model


class TrainingAborted(NumericalError):
    def __init__(self, msg, model):
        super().__init__(msg)
        self.model = model


def train(X: np.ndarray, C: np.ndarray, config: DcvaeConfig, progress=None) -> DcvaeModel:
    """Minibatch Adam on the negative ELBO; the model's ``history`` holds per-epoch means."""
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if len(X) != len(C):
        raise ShapeError("designs and conditions are not aligned")
    model = DcvaeModel(config)
    rng = np.random.default_rng([config.seed, 1])
    state = nn.AdamState(lr=config.lr)
    params = model.params()
    n = len(X)
    for epoch in range(1, config.epochs + 1):
        snapshot = [p.copy() for p in params]
        order = rng.permutation(n)
        sums = np.zeros(3)
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                eps = rng.standard_normal((len(idx), config.latent_dim))
                (total, recon, kl), grads = model.loss_and_grads(X[idx], C[idx], eps)
                if not np.isfinite(total):
                    raise NumericalError(f"non-finite loss in epoch {epoch}")
                nn.adam_step(params, grads, state)
                sums += np.array([kl, recon, total]) * len(idx)
        except NumericalError as exc:
            for p, s in zip(params, snapshot):
                p[...] = s
            raise TrainingAborted(str(exc), model) from exc
        kl, recon, total = sums / n
        model.history.append({"epoch": epoch, "kl": float(kl), "recon": float(recon), "total": float(total)})
        if progress:
            progress(model.history[-1])
    return model


def latent_means(model: DcvaeModel, X, C, batch: int = 256) -> np.ndarray:
    out = [model.encode(X[i:i + batch], C[i:i + batch])[0] for i in range(0, len(X), batch)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.latent_dim))


def reconstruct_batch(model: DcvaeModel, X, C, batch: int = 256) -> np.ndarray:
    out = [model.reconstruct(X[i:i + batch], C[i:i + batch]) for i in range(0, len(X), batch)]
    return np.concatenate(out, axis=0)


def abs_design_error(model: DcvaeModel, X, C, threshold: float = 0.5) -> float:
    """Mean number of voxels whose binarised reconstruction differs from the design."""
    probs = reconstruct_batch(model, X, C)
    return float(np.mean(np.count_nonzero((probs >= threshold) != (X >= 0.5), axis=1)))


def split_ids(ids, test_every: int = 10):
    """Deterministic 90/10 split: every design whose id ends in 9 is held out."""
    ids = np.asarray(ids)
    test = ids % test_every == test_every - 1
    return ids[~test], ids[test]


def write_history(model: DcvaeModel, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "kl", "recon", "total"])
        for row in model.history:
            w.writerow([row["epoch"], repr(row["kl"]), repr(row["recon"]), repr(row["total"])])


def read_history(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def write_latents(path, ids, mu, split=None) -> None:
    lines = [json.dumps({"schema": "voxelforge.latents", "version": 1, "latent_dim": int(mu.shape[1])})]
    for n, (i, m) in enumerate(zip(ids, mu)):
        rec = {"design_id": int(i), "mu": [float(v) for v in m]}
        if split is not None:
            rec["split"] = split[n]
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def read_latents(path):
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != "voxelforge.latents" or header.get("version") != 1:
        from .errors import FormatError
        raise FormatError(f"{path}: unsupported latent table")
    recs = [json.loads(l) for l in lines[1:]]
    ids = np.array([r["design_id"] for r in recs], dtype=np.int64)
    mu = np.array([r["mu"] for r in recs], dtype=np.float64).reshape(len(recs), header["latent_dim"])
    split = [r.get("split") for r in recs]
    return ids, mu, split
