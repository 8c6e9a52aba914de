"""Command-line pipeline: gen -> label -> train -> sweep -> optimize -> mesh.

Every artifact that refers to another one stores a path relative to itself,
so a whole working directory can be moved or compared byte-for-byte.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig
from .errors import FormatError, NumericalError, VoxelForgeError

log = logging.getLogger("voxelforge")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
TRAIN_SCHEMA = "voxelforge.train"


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()


def _seed(args, cfg: PipelineConfig) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("VOXELFORGE_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise FormatError(f"VOXELFORGE_SEED={env!r} is not an integer") from None
    return cfg.seed


def _rel(target, start_dir) -> str:
    return os.path.relpath(Path(target).resolve(), Path(start_dir).resolve())


def _resolve(ref: str, base_dir) -> Path:
    return (Path(base_dir) / ref).resolve()


def _read_json(path, schema: str, version: int = 1) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: missing")
    try:
        doc = json.loads(path.read_text())
    except ValueError as exc:
        raise FormatError(f"{path}: not valid JSON") from exc
    if doc.get("schema") != schema or doc.get("version") != version:
        raise FormatError(f"{path}: expected {schema} v{version}")
    return doc


def _dump(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---- Step 1 ---------------------------------------------------------------

def cmd_gen(args) -> int:
    from .generation import generate_dataset
    cfg = _config(args)
    seed = _seed(args, cfg)
    m = generate_dataset(args.n, cfg.dims, cfg.noise_params(), cfg.interface_spec(), seed=seed,
                         out_dir=args.out, pitch=cfg.pitch, jobs=args.jobs)
    fill = np.mean([e["fill_fraction"] for e in m["entries"]])
    print(f"wrote {len(m['entries'])} designs to {args.out} (mean fill {fill:.3f})")
    return EXIT_OK


# ---- Step 2 ---------------------------------------------------------------

def _stats_path(args) -> Path:
    return Path(args.stats) if getattr(args, "stats", None) else Path(args.out).with_name("stats.json")


def cmd_label(args) -> int:
    from .generation import Dataset
    from .labels import label_dataset, normalize_and_filter
    cfg = _config(args)
    ds = Dataset(args.dataset)
    if len(ds) == 0:
        raise FormatError(f"{args.dataset}: dataset holds no designs")
    table = label_dataset(ds, args.out, cfg.constants(), jobs=args.jobs)
    _, stats, retained = normalize_and_filter(table.values, table.feasible)
    stats.save(_stats_path(args))
    print(f"labelled {len(table)} designs: {int(table.feasible.sum())} feasible, "
          f"{len(retained)} kept by the 2-sigma filter")
    return EXIT_OK


def _load_training_data(dataset_dir, labels_path):
    """Designs and normalised conditions of the retained rows, split 90/10."""
    from .dcvae import split_ids
    from .generation import Dataset
    from .labels import normalize_and_filter, read_labels
    ds = Dataset(dataset_dir)
    table = read_labels(labels_path)
    if len(table) != len(ds) or not np.array_equal(table.ids, np.arange(len(ds))):
        raise FormatError(f"{labels_path}: labels do not match dataset {dataset_dir}")
    z, stats, retained = normalize_and_filter(table.values, table.feasible)
    ids = table.ids[retained]
    train_ids, test_ids = split_ids(ids)
    return ds, table, z, stats, retained, train_ids, test_ids


# ---- Step 3 ---------------------------------------------------------------

def cmd_train(args) -> int:
    from .dcvae import abs_design_error, latent_means, train, write_history, write_latents
    from .optimize import train_fnet
    cfg = _config(args)
    seed = _seed(args, cfg)
    ds, table, z, stats, retained, train_ids, test_ids = _load_training_data(args.dataset, args.labels)
    if len(train_ids) < 2:
        raise FormatError(f"{args.labels}: too few usable designs to train on")
    dc = cfg.dcvae_config(args.mode, seed=seed)
    if args.epochs is not None:
        dc.epochs = int(args.epochs)
    if dc.dims != ds.dims:
        raise FormatError(f"{args.dataset}: dataset dims {ds.dims.shape} differ from config {dc.dims.shape}")
    X_tr, C_tr = ds.matrix(train_ids), z[train_ids]
    X_te, C_te = ds.matrix(test_ids), z[test_ids]

    def progress(rec):
        if rec["epoch"] % 10 == 0 or rec["epoch"] == dc.epochs:
            log.info("epoch %d: recon %.2f kl %.2f", rec["epoch"], rec["recon"], rec["kl"])

    model = train(X_tr, C_tr, dc, progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.nnp")
    write_history(model, out / "history.csv")
    stats.save(out / "stats.json")
    all_ids = np.concatenate([train_ids, test_ids])
    order = np.argsort(all_ids, kind="stable")
    all_ids = all_ids[order]
    split = np.array(["train"] * len(train_ids) + ["test"] * len(test_ids))[order]
    mu = latent_means(model, ds.matrix(all_ids), z[all_ids])
    write_latents(out / "latents.jsonl", all_ids, mu, list(split))

    fnet = train_fnet(C_tr, mu[split == "train"], cfg.fnet_config(seed=seed))
    fnet.save(out / "fnet.nnp")
    last = model.history[-1] if model.history else {}
    meta = {
        "schema": TRAIN_SCHEMA, "version": 1, "mode": dc.mode, "seed": seed,
        "dataset": _rel(args.dataset, out), "labels": _rel(args.labels, out),
        "n_train": int(len(train_ids)), "n_test": int(len(test_ids)),
        "final": {k: last.get(k) for k in ("recon", "kl", "total")},
        "train_error_voxels": abs_design_error(model, X_tr, C_tr),
        "test_error_voxels": abs_design_error(model, X_te, C_te) if len(test_ids) else None,
        "n_voxels": dc.n_voxels,
        "fnet": fnet.report,
    }
    _dump(out / "train.json", meta)
    print(f"{dc.mode}: recon {meta['final']['recon']:.2f}, held-out error "
          f"{meta['test_error_voxels'] if meta['test_error_voxels'] is not None else float('nan'):.1f} "
          f"of {dc.n_voxels} voxels; f_net relative MSE {fnet.report['relative_mse']:.3f}")
    return EXIT_OK


def _load_model_dir(model_dir):
    from .dcvae import DcvaeModel
    from .labels import LabelStats
    model_dir = Path(model_dir)
    meta = _read_json(model_dir / "train.json", TRAIN_SCHEMA)
    model = DcvaeModel.load(model_dir / "model.nnp")
    stats = LabelStats.load(model_dir / "stats.json")
    return meta, model, stats


def cmd_reconstruct(args) -> int:
    from .generation import Dataset
    from .labels import label_grid
    from .voxel import load_grid
    cfg = _config(args)
    meta, model, stats = _load_model_dir(args.model)
    ds = Dataset(_resolve(meta["dataset"], args.model))
    g = load_grid(args.design)
    if g.dims != model.config.dims:
        raise FormatError(f"{args.design}: dims {g.dims.shape} do not match the model")
    values, feasible = label_grid(g, ds.spec, cfg.constants())
    if not feasible:
        raise FormatError(f"{args.design}: design cannot be labelled, so it has no conditions")
    c = stats.normalize(values)[None]
    probs = model.reconstruct(g.flat()[None].astype(np.float64), c)[0]
    wrong = int(np.count_nonzero((probs >= 0.5) != g.flat()))
    out = Path(args.out) if args.out else Path(args.design).with_suffix(".probs.npy")
    np.save(out, probs.reshape(g.dims.shape, order="F"))
    print(json.dumps({"design": str(args.design), "probs": str(out), "misrepresented_voxels": wrong,
                      "total_voxels": g.dims.total, "error_fraction": wrong / g.dims.total}))
    return EXIT_OK


# ---- Step 4 ---------------------------------------------------------------

def cmd_sweep(args) -> int:
    from .optimize import FnetModel, build_schedule, run_sweep, write_sweep
    cfg = _config(args)
    meta, model, stats = _load_model_dir(args.model)
    fnet = FnetModel.load(args.fnet or Path(args.model) / "fnet.nnp")
    q = args.q if args.q is not None else cfg.sweep["q"]
    schedule = build_schedule(stats, q, cfg.sweep["policy"])
    result = run_sweep(schedule, fnet, model, cfg.sweep["p_min"], cfg.pitch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"model": _rel(args.model, out), "z_hat": fnet(schedule.normalized).tolist(),
             "fill_fraction": [g.fill_fraction for g in result.grids]}
    write_sweep(result, out, extra)
    print(f"sweep of {q} designs: total material change {result.cumulative:.4f}, "
          f"peak at step {result.opt_index} (p_min {result.p_min})")
    return EXIT_OK


def cmd_optimize(args) -> int:
    from .generation import Dataset, repair_connectivity
    from .labels import label_grid, normalize_and_filter, read_labels
    from .optimize import select_optimum, validate_optimum
    from .voxel import hamming, load_grid, save_grid
    cfg = _config(args)
    sweep_dir = Path(args.sweep)
    doc = _read_json(sweep_dir / "sweep.json", "voxelforge.sweep")
    p_min = cfg.sweep["p_min"] if args.pmin is None else args.pmin
    q = doc["schedule"]["q"]
    opt = select_optimum(doc["delta_m"], q, p_min)
    raw = load_grid(sweep_dir / doc["designs"][opt])
    model_dir = _resolve(doc["model"], sweep_dir)
    meta = _read_json(model_dir / "train.json", TRAIN_SCHEMA)
    ds = Dataset(_resolve(meta["dataset"], model_dir))
    labels_path = _resolve(meta["labels"], model_dir)
    table = read_labels(labels_path)
    _, _, retained = normalize_and_filter(table.values, table.feasible)

    g, repaired = raw, False
    if cfg.sweep["repair_optimum"]:
        try:
            g = repair_connectivity(raw, ds.spec)
            repaired = g != raw
        except VoxelForgeError as exc:
            log.warning("optimum could not be repaired: %s", exc)
    values, feasible = label_grid(g, ds.spec, cfg.constants())
    report = validate_optimum(values, feasible, table.values, table.feasible, retained, cfg.sweep["policy"])
    report.update({
        "p_min": p_min, "opt_index": opt, "opt_design": opt + 1, "q": q,
        "delta_m_at_opt": doc["delta_m"][opt - 1],
        "repaired": bool(repaired), "repair_changed_voxels": hamming(g, raw),
        "best_training_design_id": int(table.ids[report["best_training_row"]]),
    })
    save_grid(g, sweep_dir / "optimum.vxg")
    _dump(sweep_dir / "optimum_report.json", report)
    print(f"optimum: design {opt + 1} of {q} (feasible={feasible}, repaired={repaired})")
    for r in report["conditions"]:
        dev = "n/a" if r["deviation_percent"] is None else f"{r['deviation_percent']:+.1f}%"
        opt_v = "n/a" if r["optimum"] is None else f"{r['optimum']:.4g}"
        print(f"  {r['condition']:<3} {r['policy']:<8} train {r['best_training']:<10.4g} "
              f"opt {opt_v:<10} {dev}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    from .meshing import export_obj, export_stl, marching_cubes, mesh_stats
    from .voxel import load_grid
    g = load_grid(args.grid)
    m = marching_cubes(g, args.iso)
    export_stl(m, args.out)
    if args.obj:
        export_obj(m, args.obj)
    print(json.dumps(mesh_stats(m)))
    return EXIT_OK


def cmd_project(args) -> int:
    from .dcvae import read_latents
    from .labels import normalize_and_filter, read_labels
    from .optimize import DEFAULT_POLICY, RAMP
    from .projection import pca_2d, write_svg
    ids, mu, _ = read_latents(args.latents)
    coords, basis = pca_2d(mu)
    scores = None
    if args.labels:
        table = read_labels(args.labels)
        z, _, _ = normalize_and_filter(table.values, table.feasible)
        ramped = np.array(DEFAULT_POLICY) == RAMP
        pos = {int(i): n for n, i in enumerate(table.ids)}
        # lower condition values are better, so negate for "higher = better"
        scores = np.array([-z[pos[int(i)]][ramped].mean() for i in ids])
    path = None
    if args.sweep:
        doc = _read_json(Path(args.sweep) / "sweep.json", "voxelforge.sweep")
        path = pca_2d(np.asarray(doc["z_hat"]), basis)[0]
    write_svg(args.out, coords, scores, path)
    print(f"wrote {len(ids)} latent points to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration JSON")
    common.add_argument("--seed", type=int, help="overrides VOXELFORGE_SEED and the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="voxelforge", description="Conditional voxel design pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate a design dataset")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("label", parents=[common], help="label designs with the surrogate evaluators")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="labels.jsonl path")
    s.add_argument("--stats", help="stats.json path (default: next to the labels)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("train", parents=[common], help="train the conditional autoencoder and f_net")
    s.add_argument("--dataset", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--mode", choices=("deep-input", "fc-baseline"), default="deep-input")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", parents=[common], help="encode and decode one design")
    s.add_argument("--model", required=True, help="model directory written by train")
    s.add_argument("--design", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("sweep", parents=[common], help="decode a worst-to-best condition schedule")
    s.add_argument("--model", required=True)
    s.add_argument("--fnet")
    s.add_argument("--q", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("optimize", parents=[common], help="pick and validate the optimal sweep design")
    s.add_argument("--sweep", required=True)
    s.add_argument("--pmin", type=float)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("mesh", parents=[common], help="marching-cubes mesh of a grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--iso", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.add_argument("--obj")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("project", parents=[common], help="PCA plot of the latent table")
    s.add_argument("--latents", required=True)
    s.add_argument("--labels")
    s.add_argument("--sweep")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (VoxelForgeError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
