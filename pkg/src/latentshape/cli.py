"""Command-line entry points tying the pipeline together.

Subcommands: gen-data, train-sdf, train-surrogate, invert, optimize,
optimize-cv, verify, eval. Every run writes a manifest (config hash, input
hashes, wall clock) and an echo of its fully resolved configuration next to
its outputs. All defaults live in DEFAULTS below; a JSON config file and the
command-line flags override them.

Exit codes: 0 success, 1 validation failure, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__
from . import forces as fr
from . import geometry as geo
from . import helmholtz as hh
from . import optloop as ol
from . import sdfnet
from . import surrogate as sg
from . import verify as vf
from .autodiff import DivergenceError
from .rng import substream

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "n_shapes": 200, "n": 64, "kappa": 7.0, "q_tilde": 1.0, "n_angles": 4,
        "r0_range": [0.2, 0.32], "amp_range": [0.0, 0.02], "sdf_samples": 1200,
    },
    "sdf": {
        "sigma": 0.01, "lambda": 1e-4, "lr": 3e-3, "epochs": 120, "batch": 1024,
        "samples_per_shape": 1200, "near_fraction": 0.8, "band": 0.04,
        "d": 16, "hidden": [128, 128, 128], "dataset": None, "resume": None,
    },
    "surrogate": {
        "lr": 1e-3, "epochs": 40, "batch": 16, "queries_per_step": 256,
        "n_queries": 1024, "slices": 8, "width": 64, "blocks": 3, "heads": 4,
        "val_target": None, "fit_steps": 400, "dataset": None, "sdf": None,
    },
    "invert": {
        "steps": 400, "lr": 1e-2, "lambda_reg": 0.001, "targets": None,
        "split": "test", "n_targets": 3, "dataset": None, "sdf": None,
        "surrogate": None,
    },
    "optimize": {
        "steps": 50, "lr": 5e-3, "reproject_iters": 5, "eps_proj": 1e-9,
        "n_samples": 256, "rank_tol": 1e-10, "shape_index": 0,
        "constraint_arc": None,  # [lo, hi) fraction of the contour to freeze
        "dataset": None, "sdf": None, "surrogate": None,
    },
    "optimize_cv": {
        "steps": 40, "lr": 1e-2, "reproject_iters": 5, "eps_proj": 1e-9,
        "n_samples": 128, "shape_index": 0, "squared_hinge": True,
        "lambda_cd": fr.LAMBDA_CD_DEFAULT, "cd_max": fr.CD_MAX_DEFAULT,
        "cv_epochs": 300, "cv_lr": 2e-3, "circulation_scale": 2.0,
        "sdf": None, "cv_surrogate": None,
    },
    "verify": {
        "checks": None,  # None = everything the provided artifacts allow
        "dataset": None, "sdf": None, "sdf_plain": None, "surrogate": None,
    },
    "eval": {
        "split": "test", "dataset": None, "sdf": None, "surrogate": None,
        "n_queries": 1024, "fit_steps": 400,
    },
}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def resolve_config(section, path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        for key, val in user.items():
            if key in cfg and isinstance(cfg[key], dict) and isinstance(val, dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    for key, val in (overrides or {}).items():
        if val is not None:
            cfg[key] = val
    out = copy.deepcopy(cfg[section])
    out["seed"] = cfg["seed"]
    return out


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def revision():
    if "LATENTSHAPE_REVISION" in os.environ:
        return os.environ["LATENTSHAPE_REVISION"]
    try:
        return subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                              capture_output=True, text=True, timeout=5,
                              cwd=os.path.dirname(__file__)).stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def prepare_outdir(outdir, force):
    if os.path.isdir(outdir) and os.listdir(outdir) and not force:
        raise ValueError(f"output directory {outdir!r} is not empty (use --force)")
    os.makedirs(outdir, exist_ok=True)


def write_manifest(outdir, command, cfg, inputs, t0):
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "config_hash": config_hash(cfg),
        "inputs": {p: file_hash(p) for p in inputs if p and os.path.isfile(p)},
        "wall_clock_s": time.time() - t0,
        "revision": revision(),
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    with open(os.path.join(outdir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2)


def _angles(n_angles):
    return tuple(2.0 * np.pi * k / n_angles for k in range(n_angles))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg, outdir, force, jobs):
    if cfg["amp_range"][0] < 0 or cfg["amp_range"][1] < cfg["amp_range"][0]:
        raise ValueError(f"invalid amplitude range {cfg['amp_range']}")
    prepare_outdir(outdir, force)
    t0 = time.time()
    scfg = hh.ScatterConfig(n=cfg["n"], kappa=cfg["kappa"], q_tilde=cfg["q_tilde"],
                            angles=_angles(cfg["n_angles"]))
    ds = hh.gen_dataset(cfg["n_shapes"], scfg, seed=cfg["seed"],
                        sdf_samples=cfg["sdf_samples"],
                        r0_range=tuple(cfg["r0_range"]),
                        amp_range=tuple(cfg["amp_range"]), jobs=jobs)
    hh.save_dataset(outdir, ds)
    write_manifest(outdir, "gen-data", cfg, [], t0)
    print(f"dataset: {cfg['n_shapes']} shapes x {cfg['n_angles']} angles "
          f"at n={cfg['n']} -> {outdir}")
    return 0


def _train_shapes(ds):
    return [ds.samples[i].shape for i in ds.splits["train"]]


def cmd_train_sdf(cfg, outdir, force):
    if not cfg["dataset"]:
        raise ValueError("train-sdf needs config key sdf.dataset (gen-data output)")
    prepare_outdir(outdir, force)
    t0 = time.time()
    ds = hh.load_dataset(cfg["dataset"])
    shapes = _train_shapes(ds)
    tc = sdfnet.SdfTrainConfig(
        sigma=cfg["sigma"], lam=cfg["lambda"], lr=cfg["lr"], epochs=cfg["epochs"],
        batch=cfg["batch"], samples_per_shape=cfg["samples_per_shape"],
        near_fraction=cfg["near_fraction"], band=cfg["band"], d=cfg["d"],
        hidden=tuple(cfg["hidden"]), seed=cfg["seed"])
    warm = None
    start_epoch = 0
    if cfg["resume"]:
        dec0, table0, meta0 = sdfnet.load_decoder(cfg["resume"])
        start_epoch = meta0.get("epochs_done", 0)
        warm = (dec0, table0)
    curve_path = os.path.join(outdir, "training_curve.csv")
    with open(curve_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])

    def log(epoch, loss):
        with open(curve_path, "a", newline="") as fh:
            csv.writer(fh).writerow([start_epoch + epoch, repr(loss)])

    decoder, table, hist = sdfnet.train_sdf_autodecoder(shapes, tc, callback=log,
                                                        warm=warm,
                                                        start_epoch=start_epoch)
    ckpt = os.path.join(outdir, "sdf.ckpt")
    sdfnet.save_decoder(ckpt, decoder, table,
                        extra_meta={"sigma": cfg["sigma"],
                                    "epochs_done": start_epoch + cfg["epochs"],
                                    "dataset_seed": ds.seed})
    metrics = {"final_loss": hist[-1] if hist else None,
               "epochs_done": start_epoch + cfg["epochs"]}
    with open(os.path.join(outdir, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    write_manifest(outdir, "train-sdf", cfg,
                   [os.path.join(cfg["dataset"], "dataset.json")], t0)
    print(f"sdf decoder: {len(shapes)} shapes, final loss "
          f"{metrics['final_loss']:.4g} -> {ckpt}")
    return 0


def _surrogate_arrays(ds, decoder, table, holdout_z, indices, n_queries, seed):
    grid = ds.samples[0].q.node_coords()
    rng = substream(seed, "surrogate-queries")
    train_ids = ds.splits["train"]
    Q, T, Z = [], [], []
    for i in indices:
        s = ds.samples[i]
        z = table.codes[train_ids.index(i)] if i in train_ids else holdout_z[i]
        for a, psi in sorted(s.fields.items()):
            sel = rng.choice(len(grid), min(n_queries, len(grid)), replace=False)
            cond = np.concatenate(
                [grid[sel], np.tile([np.cos(a), np.sin(a)], (len(sel), 1))], axis=1)
            Q.append(cond)
            T.append(np.stack([psi.real.values[sel], psi.imag.values[sel]], axis=1))
            Z.append(z)
    return np.stack(Q), np.stack(T), np.stack(Z)


def fit_holdout_latents(ds, decoder, indices, steps=400):
    out = {}
    for i in indices:
        s = ds.samples[i]
        out[i] = sdfnet.fit_latent(decoder, (s.sdf_points, s.sdf_values),
                                   steps=steps, lr=1e-2, lam=1e-4)
    return out


def cmd_train_surrogate(cfg, outdir, force):
    for key in ("dataset", "sdf"):
        if not cfg[key]:
            raise ValueError(f"train-surrogate needs config key surrogate.{key}")
    prepare_outdir(outdir, force)
    t0 = time.time()
    ds = hh.load_dataset(cfg["dataset"])
    decoder, table, _ = sdfnet.load_decoder(cfg["sdf"])
    holdout = fit_holdout_latents(ds, decoder, ds.splits["val"] + ds.splits["test"],
                                  steps=cfg["fit_steps"])
    trainA = _surrogate_arrays(ds, decoder, table, holdout, ds.splits["train"],
                               cfg["n_queries"], cfg["seed"])
    valA = _surrogate_arrays(ds, decoder, table, holdout, ds.splits["val"],
                             cfg["n_queries"], cfg["seed"])
    testA = _surrogate_arrays(ds, decoder, table, holdout, ds.splits["test"],
                              cfg["n_queries"], cfg["seed"])
    scfg = sg.SurrogateConfig(n_slices=cfg["slices"], width=cfg["width"],
                              blocks=cfg["blocks"], heads=cfg["heads"],
                              d_latent=decoder.d)
    tc = sg.SurrogateTrainConfig(lr=cfg["lr"], epochs=cfg["epochs"],
                                 batch=cfg["batch"],
                                 queries_per_step=cfg["queries_per_step"],
                                 seed=cfg["seed"], val_target=cfg["val_target"])
    curve_path = os.path.join(outdir, "training_curve.csv")
    with open(curve_path, "w", newline="") as fh:
        csv.writer(fh).writerow(["epoch", "train_loss", "val_rel_l2"])

    def log(epoch, loss, rl2):
        with open(curve_path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, repr(loss), "" if rl2 is None else repr(rl2)])

    model, hist = sg.train_surrogate(*trainA, scfg, tc, val=valA, callback=log)
    ckpt = os.path.join(outdir, "surrogate.ckpt")
    model.save(ckpt, extra_meta={"dataset_seed": ds.seed})
    metrics = {"train_loss": hist["train_loss"][-1],
               "val_rel_l2": hist["val_rel_l2"][-1][1] if hist["val_rel_l2"] else None,
               "test_rel_l2": sg.eval_rel_l2(model, *testA)}
    with open(os.path.join(outdir, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    write_manifest(outdir, "train-surrogate", cfg,
                   [os.path.join(cfg["dataset"], "dataset.json"), cfg["sdf"]], t0)
    print(f"surrogate: test rel_l2 {metrics['test_rel_l2']:.4f} -> {ckpt}")
    return 0


def _load_pipeline(cfg):
    ds = hh.load_dataset(cfg["dataset"]) if cfg.get("dataset") else None
    decoder = table = None
    if cfg.get("sdf"):
        decoder, table, _ = sdfnet.load_decoder(cfg["sdf"])
    model = None
    if cfg.get("surrogate"):
        model, _ = sg.Surrogate.load(cfg["surrogate"])
    return ds, decoder, table, model


def cmd_invert(cfg, outdir, force):
    for key in ("dataset", "sdf", "surrogate"):
        if not cfg[key]:
            raise ValueError(f"invert needs config key invert.{key}")
    prepare_outdir(outdir, force)
    t0 = time.time()
    ds, decoder, table, model = _load_pipeline(cfg)
    targets = cfg["targets"] or ds.splits[cfg["split"]][:cfg["n_targets"]]
    run_cfg = ol.OptRunConfig(steps=cfg["steps"], lr=cfg["lr"],
                              lambda_reg=cfg["lambda_reg"], track_contours=False,
                              seed=cfg["seed"])
    summary = []
    for idx in targets:
        sample = ds.samples[idx]
        z_star, record = ol.invert_shape(model, decoder, sample.observations,
                                         ds.sensors, run_cfg)
        rundir = os.path.join(outdir, f"target_{idx:04d}")
        os.makedirs(rundir, exist_ok=True)
        record.to_csv(os.path.join(rundir, "steps.csv"))
        truth = sample.shape.boundary(256).points

        def chamfer_of(z):
            contour = sdfnet.decoded_contour(decoder, z, n=128)
            if contour is None:
                return float("inf")
            return geo.point_metrics(contour.resample(256).points, truth, 0.05,
                                     include_emd=False)["chamfer"]

        final_contour = sdfnet.decoded_contour(decoder, z_star, n=128)
        if final_contour is not None:
            geo.save_polyline_csv(os.path.join(rundir, "final_contour.csv"),
                                  final_contour)
        entry = {"target": int(idx),
                 "initial_mismatch": record.final["initial_mismatch"],
                 "final_mismatch": record.final["mismatch"],
                 "initial_chamfer": chamfer_of(np.zeros(decoder.d)),
                 "final_chamfer": chamfer_of(z_star)}
        record.final.update(entry)
        record.to_json(os.path.join(rundir, "summary.json"))
        summary.append(entry)
        print(f"target {idx}: mismatch {entry['initial_mismatch']:.4g} -> "
              f"{entry['final_mismatch']:.4g}, chamfer {entry['initial_chamfer']:.4g}"
              f" -> {entry['final_chamfer']:.4g}")
    with open(os.path.join(outdir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, default=float)
    write_manifest(outdir, "invert", cfg,
                   [cfg["sdf"], cfg["surrogate"],
                    os.path.join(cfg["dataset"], "dataset.json")], t0)
    return 0


def cmd_optimize(cfg, outdir, force):
    for key in ("dataset", "sdf", "surrogate"):
        if not cfg[key]:
            raise ValueError(f"optimize needs config key optimize.{key}")
    prepare_outdir(outdir, force)
    t0 = time.time()
    ds, decoder, table, model = _load_pipeline(cfg)
    z0 = table.codes[cfg["shape_index"]].copy()
    angle = sorted(ds.samples[0].fields)[0]
    conditioning = np.array([np.cos(angle), np.sin(angle)])
    run_cfg = ol.OptRunConfig(steps=cfg["steps"], lr=cfg["lr"],
                              reproject_iters=cfg["reproject_iters"],
                              eps_proj=cfg["eps_proj"], n_samples=cfg["n_samples"],
                              rank_tol=cfg["rank_tol"], seed=cfg["seed"])
    constraints = None
    if cfg["constraint_arc"] is not None:
        lo, hi = cfg["constraint_arc"]
        pts = ol.initial_surface_samples(decoder, z0, n=run_cfg.n_samples,
                                         grid_n=run_cfg.contour_grid)
        sel = slice(int(lo * len(pts)), int(hi * len(pts)))
        constraints = ol.ConstraintSet(pts[sel])

    def objective(pred, pts):
        return ol.ad.mean(ol.ad.square(pred))

    z_star, samples, record = ol.optimize_shape(model, decoder, objective, run_cfg,
                                                z_init=z0, constraints=constraints,
                                                conditioning=conditioning)
    record.to_csv(os.path.join(outdir, "steps.csv"))
    record.to_json(os.path.join(outdir, "summary.json"))
    contour = sdfnet.decoded_contour(decoder, z_star, n=128)
    if contour is not None:
        geo.save_polyline_csv(os.path.join(outdir, "final_contour.csv"), contour)
    write_manifest(outdir, "optimize", cfg,
                   [cfg["sdf"], cfg["surrogate"],
                    os.path.join(cfg["dataset"], "dataset.json")], t0)
    drift = max((r.get("hausdorff_step", 0.0) for r in record.steps), default=0.0)
    frozen = " (geometry frozen)" if constraints is not None and drift < 1e-6 else ""
    print(f"optimize: objective {record.steps[0]['objective']:.4g} -> "
          f"{record.final['objective']:.4g}, max step drift {drift:.3g}{frozen}")
    return 0


def train_cv_surrogate(decoder, table, circulation_scale=2.0, epochs=300, lr=2e-3,
                       seed=0, n_train=24):
    """Small (u, v, p) surrogate fit to analytic potential-flow fields around
    the decoder's training shapes; circulation is tied to the third sine
    harmonic so lift genuinely varies with the latent."""
    spec = fr.CvSpec(samples_per_side=32)
    rng = substream(seed, "cv-data")
    idxs = rng.choice(table.n, size=min(n_train, table.n), replace=False)
    boundary = np.vstack(list(spec.boundary_points().values()))
    Q, T, Z = [], [], []
    for i in idxs:
        z = table.codes[i]
        contour = sdfnet.decoded_contour(decoder, z, n=96)
        if contour is None:
            continue
        pts = contour.resample(64).points
        queries = np.vstack([boundary, pts,
                             rng.uniform(-1, 1, size=(64, 2))])
        radius = float(np.linalg.norm(pts, axis=1).mean())
        # proxy for the k=3 sine descriptor recovered from the contour
        theta = np.arctan2(pts[:, 1], pts[:, 0])
        r = np.linalg.norm(pts, axis=1)
        b3 = 2.0 * float(np.mean(r * np.sin(3 * theta)))
        gamma = circulation_scale * b3
        T.append(ol.potential_flow_fields(queries, radius, gamma))
        Q.append(queries)
        Z.append(z)
    cfg = sg.SurrogateConfig(n_slices=4, width=32, blocks=2, heads=2,
                             d_latent=table.d, in_features=2, out_channels=3)
    tc = sg.SurrogateTrainConfig(lr=lr, epochs=epochs, batch=8, queries_per_step=0,
                                 seed=seed)
    model, hist = sg.train_surrogate(np.stack(Q), np.stack(T), np.stack(Z), cfg, tc)
    return model, hist


def cmd_optimize_cv(cfg, outdir, force):
    if not cfg["sdf"]:
        raise ValueError("optimize-cv needs config key optimize_cv.sdf")
    prepare_outdir(outdir, force)
    t0 = time.time()
    decoder, table, _ = sdfnet.load_decoder(cfg["sdf"])
    if cfg["cv_surrogate"]:
        model, _ = sg.Surrogate.load(cfg["cv_surrogate"])
    else:
        model, _ = train_cv_surrogate(decoder, table,
                                      circulation_scale=cfg["circulation_scale"],
                                      epochs=cfg["cv_epochs"], lr=cfg["cv_lr"],
                                      seed=cfg["seed"])
        model.save(os.path.join(outdir, "cv_surrogate.ckpt"))
    spec = fr.CvSpec(samples_per_side=32)
    run_cfg = ol.OptRunConfig(steps=cfg["steps"], lr=cfg["lr"],
                              reproject_iters=cfg["reproject_iters"],
                              eps_proj=cfg["eps_proj"], n_samples=cfg["n_samples"],
                              squared_hinge=cfg["squared_hinge"],
                              lambda_cd=cfg["lambda_cd"], cd_max=cfg["cd_max"],
                              track_contours=False, seed=cfg["seed"])
    z0 = table.codes[cfg["shape_index"]].copy()
    z_star, record = ol.optimize_airfoil_style(model, decoder, spec, run_cfg, z_init=z0)
    record.to_csv(os.path.join(outdir, "steps.csv"))
    record.to_json(os.path.join(outdir, "summary.json"))
    contour = sdfnet.decoded_contour(decoder, z_star, n=128)
    if contour is not None:
        geo.save_polyline_csv(os.path.join(outdir, "final_contour.csv"), contour)
    write_manifest(outdir, "optimize-cv", cfg, [cfg["sdf"]], t0)
    print(f"optimize-cv: C_L {record.steps[0]['c_l']:.4f} -> "
          f"{record.final['c_l']:.4f}, C_D {record.final['c_d']:.4f}")
    return 0


def cmd_verify(cfg, outdir, force):
    prepare_outdir(outdir, force)
    t0 = time.time()
    ds, decoder, table, model = _load_pipeline(cfg)
    decoder_plain = table_plain = None
    if cfg.get("sdf_plain"):
        decoder_plain, table_plain, _ = sdfnet.load_decoder(cfg["sdf_plain"])
    wanted = cfg["checks"]
    results = []

    def want(name):
        return wanted is None or name in wanted

    if want("autodiff"):
        results.append(vf.check_autodiff(decoder=decoder, surrogate=model,
                                         n_points=5))
    if want("projector"):
        results.append(vf.check_projector_identities())
    if want("forces"):
        results.append(vf.check_forces())
    if want("helmholtz"):
        results.append(vf.check_helmholtz())
    if decoder is not None and table is not None:
        z0 = table.codes[0]
        if want("invariance"):
            results.append(vf.check_first_order_invariance(decoder, z0))
        if want("reprojection"):
            results.append(vf.check_reprojection(decoder, z0, n_points=2000))
        if ds is not None and want("denoising"):
            shapes = [ds.samples[i].shape for i in ds.splits["train"]]
            results.append(vf.check_denoising_bound_batch(decoder, table, shapes,
                                                          n_samples=20, n_mc=20_000))
        if decoder_plain is not None and ds is not None and want("sensitivity"):
            shapes = [ds.samples[i].shape for i in ds.splits["train"]]
            results.append(vf.check_sensitivity_reduction(
                decoder, table, decoder_plain, table_plain, shapes, n_points=1000))
        if model is not None and want("lipschitz"):
            angle = sorted(ds.samples[0].fields)[0] if ds is not None else 0.0
            cond = np.array([np.cos(angle), np.sin(angle)])
            results.append(vf.check_surface_lipschitz(model, decoder, z0,
                                                      conditioning=cond, steps=20))
        if model is not None and want("mismatch"):
            angle = sorted(ds.samples[0].fields)[0] if ds is not None else 0.0
            cond = np.array([np.cos(angle), np.sin(angle)])
            rng = substream(cfg["seed"], "verify-latents")
            latents = table.codes[rng.choice(table.n, 3, replace=False)]
            results.append(vf.check_grad_mismatch_bound(model, decoder, latents,
                                                        conditioning=cond))
    report = vf.render_report(results)
    print(report)
    with open(os.path.join(outdir, "report.txt"), "w") as fh:
        fh.write(report + "\n")
    with open(os.path.join(outdir, "results.json"), "w") as fh:
        json.dump(results, fh, indent=2, default=float)
    write_manifest(outdir, "verify", cfg,
                   [p for p in (cfg.get("sdf"), cfg.get("sdf_plain"),
                                cfg.get("surrogate")) if p], t0)
    return 0 if all(r["passed"] for r in results) else 1


def cmd_eval(cfg, outdir, force):
    for key in ("dataset", "sdf", "surrogate"):
        if not cfg[key]:
            raise ValueError(f"eval needs config key eval.{key}")
    prepare_outdir(outdir, force)
    t0 = time.time()
    ds, decoder, table, model = _load_pipeline(cfg)
    idxs = ds.splits[cfg["split"]]
    holdout = fit_holdout_latents(ds, decoder, [i for i in idxs
                                                if i not in ds.splits["train"]],
                                  steps=cfg["fit_steps"])
    Q, T, Z = _surrogate_arrays(ds, decoder, table, holdout, idxs,
                                cfg["n_queries"], cfg["seed"])
    rel_l1s, rel_l2s = [], []
    for s in range(0, len(Q), 32):
        pred = model.predict(Q[s:s + 32], Z[s:s + 32])
        for p, t in zip(pred, T[s:s + 32]):
            m = geo.rel_errors(p, t)
            rel_l1s.append(m["rel_l1"])
            rel_l2s.append(m["rel_l2"])
    metrics = {"split": cfg["split"], "n_samples": len(rel_l1s),
               "rel_l1": float(np.mean(rel_l1s)), "rel_l2": float(np.mean(rel_l2s))}
    with open(os.path.join(outdir, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    with open(os.path.join(outdir, "per_sample.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "rel_l1", "rel_l2"])
        for k, (a, b) in enumerate(zip(rel_l1s, rel_l2s)):
            w.writerow([k, repr(a), repr(b)])
    write_manifest(outdir, "eval", cfg,
                   [cfg["sdf"], cfg["surrogate"],
                    os.path.join(cfg["dataset"], "dataset.json")], t0)
    print(f"eval[{cfg['split']}]: rel_l1 {metrics['rel_l1']:.4f} "
          f"rel_l2 {metrics['rel_l2']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "gen-data": ("dataset", cmd_gen_data),
    "train-sdf": ("sdf", cmd_train_sdf),
    "train-surrogate": ("surrogate", cmd_train_surrogate),
    "invert": ("invert", cmd_invert),
    "optimize": ("optimize", cmd_optimize),
    "optimize-cv": ("optimize_cv", cmd_optimize_cv),
    "verify": ("verify", cmd_verify),
    "eval": ("eval", cmd_eval),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="latentshape",
                                     description="latent-space shape toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for independent units")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    section, fn = COMMANDS[args.command]
    try:
        cfg = resolve_config(section, args.config, {"seed": args.seed})
        if args.command == "gen-data":
            return fn(cfg, args.out, args.force, args.jobs)
        return fn(cfg, args.out, args.force)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, RuntimeError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
