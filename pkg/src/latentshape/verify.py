"""Property checks tying the implementation to its analytical guarantees.

Each check returns {"name", "passed", ...measured quantities...} and prints
nothing; the CLI and the acceptance tests render the one-line verdicts. The
checks deliberately re-measure their constants (m_hat, l_hat) from the
artifacts under test instead of trusting stored values.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import forces as fr
from . import geometry as geo
from . import helmholtz as hh
from . import optloop as ol
from . import sdfnet
from . import surrogate as sg
from .rng import substream


def _loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ---------------------------------------------------------------------------
# 1. autodiff correctness
# ---------------------------------------------------------------------------

def check_autodiff(decoder=None, surrogate=None, n_points=20, seed=0, tol=1e-5):
    """Every primitive plus the full decoder/surrogate forward vs central
    finite differences."""
    rng = np.random.default_rng(seed)
    h = 1e-5
    worst = {"op": None, "err": 0.0}

    def fd_vs_ad(fn, inputs):
        tape = ad.Tape()
        leaves = [tape.leaf(v) for v in inputs]
        out = fn(*leaves)
        w = rng.standard_normal(out.values.shape)
        grads = ad.backward(tape, ad.tensor_sum(ad.mul(out, w)))
        err = 0.0
        for i, leaf in enumerate(leaves):
            g = grads[leaf.node]
            fd = np.zeros_like(inputs[i])
            flat_in = fd.ravel()
            base = [u.copy() for u in inputs]
            for k in range(flat_in.size):
                for sign in (+1, -1):
                    probe = [u.copy() for u in base]
                    probe[i].ravel()[k] += sign * h
                    val = (np.asarray(fn(*probe)) * w).sum()
                    flat_in[k] += sign * val / (2 * h)
            scale = max(np.abs(fd).max(), np.abs(g).max(), 1e-12)
            err = max(err, np.abs(g - fd).max() / scale)
        return err

    cases = {
        "add": (lambda a, b: ad.add(a, b), [rng.standard_normal((3, 4)), rng.standard_normal(4)]),
        "mul": (lambda a, b: ad.mul(a, b), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "div": (lambda a, b: ad.div(a, b), [rng.standard_normal((3, 3)),
                                            rng.standard_normal((3, 3)) + 3.0]),
        "matmul": (ad.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
        "softmax": (ad.softmax, [rng.standard_normal((3, 5))]),
        "sigmoid": (ad.sigmoid, [rng.standard_normal((3, 4))]),
        "silu": (ad.silu, [rng.standard_normal((3, 4))]),
        "absolute": (ad.absolute, [rng.standard_normal((3, 4)) + 0.5]),
        "square": (ad.square, [rng.standard_normal((3, 4))]),
        "sqrt": (ad.sqrt, [np.abs(rng.standard_normal((3, 4))) + 0.5]),
        "sum": (lambda a: ad.tensor_sum(a, axis=1), [rng.standard_normal((3, 4))]),
        "mean": (lambda a: ad.mean(a, axis=0), [rng.standard_normal((3, 4))]),
        "gather": (lambda a: ad.gather(a, np.array([0, 2, 2]), axis=0),
                   [rng.standard_normal((3, 4))]),
        "scatter_add": (lambda a: ad.scatter_add(a, np.array([1, 0, 1]), 2, axis=0),
                        [rng.standard_normal((3, 4))]),
        "norm2": (ad.norm2, [rng.standard_normal(6)]),
        "layer_norm": (lambda a, g, b: ad.layer_norm_op(a, g, b),
                       [rng.standard_normal((2, 6)), rng.standard_normal(6) + 1.5,
                        rng.standard_normal(6)]),
        "relu": (ad.relu, [rng.standard_normal((3, 4)) + 0.4]),
    }
    for trial in range(n_points):
        for name, (fn, protos) in cases.items():
            inputs = [p + 0.05 * rng.standard_normal(p.shape) for p in protos]
            err = fd_vs_ad(fn, inputs)
            if err > worst["err"]:
                worst = {"op": name, "err": err}

    if decoder is not None:
        for trial in range(n_points):
            x = rng.uniform(-0.4, 0.4, size=(1, 2))
            z = rng.normal(0, 0.2, decoder.d)
            _, gz = sdfnet.latent_gradients(decoder, x, z)
            fd = np.zeros(decoder.d)
            for i in range(decoder.d):
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                fd[i] = (sdfnet.decode_sdf(decoder, x, zp)[0]
                         - sdfnet.decode_sdf(decoder, x, zm)[0]) / (2 * h)
            scale = max(np.abs(fd).max(), 1e-12)
            err = np.abs(gz[0] - fd).max() / scale
            if err > worst["err"]:
                worst = {"op": "decoder-forward", "err": err}

    if surrogate is not None:
        arrays = surrogate.params.arrays()
        cfg = surrogate.cfg
        q = rng.uniform(-0.5, 0.5, size=(16, cfg.in_features))
        for trial in range(n_points):
            z = rng.normal(0, 0.2, cfg.d_latent)
            tape = ad.Tape()
            zt = tape.leaf(z)
            out = sg.forward(arrays, cfg, q, zt)
            g = ad.backward(tape, ad.tensor_sum(out))[zt.node]
            fd = np.zeros(cfg.d_latent)
            for i in range(cfg.d_latent):
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                fd[i] = (sg.forward(arrays, cfg, q, zp).sum()
                         - sg.forward(arrays, cfg, q, zm).sum()) / (2 * h)
            scale = max(np.abs(fd).max(), np.abs(g).max(), 1e-12)
            err = np.abs(g - fd).max() / scale
            if err > worst["err"]:
                worst = {"op": "surrogate-forward", "err": err}

    return {"name": "autodiff-vs-finite-differences", "passed": worst["err"] < tol,
            "worst_rel_err": worst["err"], "worst_op": worst["op"], "tol": tol}


# ---------------------------------------------------------------------------
# 2. projector identities
# ---------------------------------------------------------------------------

def check_projector_identities(n_trials=100, seed=0, tol=1e-10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(n_trials):
        m = int(rng.integers(1, 33))
        d = int(rng.integers(2, 65))
        G = rng.standard_normal((m, d))
        if t % 4 == 0 and m > 1:
            G[m // 2] = G[0]
        P = ol.nullspace_projector(G)
        scale = max(1.0, np.linalg.norm(G))
        worst = max(worst,
                    np.linalg.norm(P @ P - P),
                    np.linalg.norm(P.T - P),
                    np.linalg.norm(G @ P) / scale)
    return {"name": "nullspace-projector-identities", "passed": worst < tol,
            "worst_residual": float(worst), "n_trials": n_trials, "tol": tol}


# ---------------------------------------------------------------------------
# 3. first-order constraint invariance
# ---------------------------------------------------------------------------

def check_first_order_invariance(decoder, z, n_constraints=6, seed=0,
                                 etas=None, slope_range=(1.7, 2.3)):
    if etas is None:
        etas = np.geomspace(2e-3, 4e-2, 8)
    rng = substream(seed, "invariance")
    pts = ol.initial_surface_samples(decoder, z, n=n_constraints, grid_n=96)
    constraints = ol.ConstraintSet(pts)
    G = ol.constraint_jacobian(decoder, constraints, z)
    P = ol.nullspace_projector(G)
    g = rng.standard_normal(decoder.d)
    g_safe = ol.project_gradient(P, g)
    g_safe = g_safe / np.linalg.norm(g_safe)
    s0 = sdfnet.decode_sdf(decoder, constraints.points, z)
    drifts = []
    for eta in etas:
        s1 = sdfnet.decode_sdf(decoder, constraints.points, z - eta * g_safe)
        drifts.append(np.abs(s1 - s0).max())
    slope = _loglog_slope(etas, drifts)
    return {"name": "first-order-constraint-invariance",
            "passed": slope_range[0] <= slope <= slope_range[1],
            "slope": slope, "drifts": [float(v) for v in drifts],
            "slope_range": slope_range}


# ---------------------------------------------------------------------------
# 4. reprojection contraction and success rate
# ---------------------------------------------------------------------------

def check_reprojection(decoder, z, n_points=10_000, k_iters=5, noise=0.01,
                       seed=0, threshold=1e-4, success_bar=0.99, slope_bar=1.7):
    rng = substream(seed, "reproject-check")
    base = ol.initial_surface_samples(decoder, z, n=min(n_points, 512), grid_n=128)
    reps = int(np.ceil(n_points / len(base)))
    pts = np.tile(base, (reps, 1))[:n_points]
    pts = pts + rng.normal(0, noise, size=pts.shape)
    out, hist = ol.reproject_points(decoder, pts, z, iters=k_iters, eps_proj=1e-12,
                                    return_history=True)
    success = float((hist[-1] < threshold).mean())
    pairs_x, pairs_y = [], []
    for k in range(len(hist) - 1):
        mask = (hist[k] > 1e-8) & (hist[k] < 0.01) & (hist[k + 1] > 1e-14)
        pairs_x.append(hist[k][mask])
        pairs_y.append(hist[k + 1][mask])
    px = np.concatenate(pairs_x)
    py = np.concatenate(pairs_y)
    slope = _loglog_slope(px, py) if len(px) > 10 else float("nan")
    passed = success >= success_bar and slope >= slope_bar
    return {"name": "reprojection-quadratic-contraction", "passed": bool(passed),
            "success_rate": success, "contraction_slope": slope,
            "n_pairs": int(len(px)), "threshold": threshold}


# ---------------------------------------------------------------------------
# 5. denoising bound
# ---------------------------------------------------------------------------

def check_denoising_bound_batch(decoder, table, shapes, sigma=0.01, n_samples=100,
                                n_mc=100_000, fit_tol=2e-3, seed=0):
    """Monte-Carlo certification of the noisy-reconstruction upper bound at
    well-fit samples: lhs <= |r| + sigma sqrt(2/pi) |grad_z s| + 3 SE."""
    rng = substream(seed, "denoise-batch")
    candidates = []
    for idx in rng.permutation(len(shapes)):
        shape = shapes[idx]
        z = table.codes[idx]
        pts, s_true = sdfnet.sample_training_pairs(
            shape, 40, near_fraction=1.0, band=0.03,
            rng=substream(seed, "denoise-pts", int(idx)))
        pred = sdfnet.decode_sdf(decoder, pts, z)
        resid = np.abs(pred - s_true)
        for j in np.flatnonzero(resid <= fit_tol):
            candidates.append((int(idx), pts[j], s_true[j], resid[j]))
        if len(candidates) >= n_samples:
            break
    candidates = candidates[:n_samples]
    n_pass = 0
    margins = []
    for k, (idx, x, s_t, r) in enumerate(candidates):
        res = sdfnet.check_denoising_bound(decoder, table.codes[idx], x, s_t,
                                           sigma, n_mc=n_mc, seed=seed + k)
        ok = res["lhs"] <= res["rhs"] + 3 * res["mc_se"]
        margins.append(res["rhs"] + 3 * res["mc_se"] - res["lhs"])
        n_pass += ok
    passed = n_pass == len(candidates) and len(candidates) == n_samples
    return {"name": "denoising-upper-bound", "passed": bool(passed),
            "n_samples": len(candidates), "n_holding": int(n_pass),
            "min_margin": float(min(margins)) if margins else float("nan"),
            "sigma": sigma, "n_mc": n_mc}


# ---------------------------------------------------------------------------
# 6. sensitivity reduction
# ---------------------------------------------------------------------------

def check_sensitivity_reduction(decoder_noisy, table_noisy, decoder_plain,
                                table_plain, shapes, n_points=1000, seed=0):
    """Median latent-Jacobian norm of the noise-trained decoder must sit
    strictly below the plain decoder's on matched near-surface samples."""
    per_shape = max(1, n_points // len(shapes))
    norms_noisy, norms_plain = [], []
    for i, shape in enumerate(shapes):
        pts, _ = sdfnet.sample_training_pairs(shape, per_shape, near_fraction=1.0,
                                              band=0.03,
                                              rng=substream(seed, "sens", i))
        norms_noisy.append(sdfnet.latent_jacobian_norms(
            decoder_noisy, table_noisy.codes[i], pts))
        norms_plain.append(sdfnet.latent_jacobian_norms(
            decoder_plain, table_plain.codes[i], pts))
    med_noisy = float(np.median(np.concatenate(norms_noisy)))
    med_plain = float(np.median(np.concatenate(norms_plain)))
    return {"name": "latent-sensitivity-reduction", "passed": med_noisy < med_plain,
            "median_noisy": med_noisy, "median_plain": med_plain,
            "n_points": per_shape * len(shapes)}


# ---------------------------------------------------------------------------
# 7. surface Lipschitz bound along a run
# ---------------------------------------------------------------------------

def check_surface_lipschitz(surrogate, decoder, z0, conditioning=None, steps=50,
                            lr=5e-3, slack=1.5, seed=0, n_samples=256):
    def objective(pred, pts):
        return ad.mean(ad.square(pred))

    cfg = ol.OptRunConfig(steps=steps, lr=lr, n_samples=n_samples,
                          contour_grid=128, track_contours=True, seed=seed)
    _, _, record = ol.optimize_shape(surrogate, decoder, objective, cfg,
                                     z_init=z0, conditioning=conditioning)
    violations = 0
    ratios = []
    for row in record.steps:
        if "hausdorff_step" not in row:
            continue
        bound = slack * row["l_hat"] / row["m_hat"] * row["dz"]
        ratios.append(row["hausdorff_step"] / max(bound, 1e-300))
        if row["hausdorff_step"] > bound:
            violations += 1
    return {"name": "surface-lipschitz-bound", "passed": violations == 0,
            "n_steps": len(ratios), "violations": violations,
            "max_ratio": float(max(ratios)) if ratios else float("nan"),
            "slack": slack}


# ---------------------------------------------------------------------------
# 8. gradient-mismatch bound
# ---------------------------------------------------------------------------

def check_grad_mismatch_bound(surrogate, decoder, latents, conditioning=None,
                              n_samples=64, slack=1.5, seed=0):
    def objective(pred, pts):
        return ad.mean(ad.square(pred))

    results = []
    for k, z in enumerate(latents):
        X = ol.initial_surface_samples(decoder, z, n=n_samples, grid_n=128)
        res = ol.check_grad_mismatch(surrogate, decoder, z, X, objective,
                                     conditioning=conditioning)
        results.append(res)
    violations = [r for r in results if r["mismatch"] > slack * r["bound"]]
    worst = max((r["mismatch"] / max(r["bound"], 1e-300) for r in results),
                default=float("nan"))
    return {"name": "detached-gradient-mismatch-bound",
            "passed": len(violations) == 0, "n_latents": len(results),
            "violations": len(violations), "worst_ratio": float(worst),
            "slack": slack}


# ---------------------------------------------------------------------------
# 9. reconstruction quality
# ---------------------------------------------------------------------------

def check_reconstruction_f1(decoder, holdout, f1_bar=0.90, grid_n=128, seed=0,
                            fit_steps=400):
    """Held-out F1 at tau = two grid cells; ``holdout`` is a list of
    (shape, sdf_points, sdf_values) triples; latents are fit fresh."""
    tau = 2 * 2.0 / (grid_n - 1)
    f1s = []
    for k, (shape, pts, vals) in enumerate(holdout):
        z = sdfnet.fit_latent(decoder, (pts, vals), steps=fit_steps, lr=1e-2,
                              lam=1e-4)
        contour = sdfnet.decoded_contour(decoder, z, n=grid_n)
        if contour is None:
            f1s.append(0.0)
            continue
        truth = shape.boundary(256).points
        f1s.append(geo.point_metrics(contour.resample(256).points, truth, tau,
                                     include_emd=False)["f1"])
    mean_f1 = float(np.mean(f1s))
    return {"name": "heldout-reconstruction-f1", "passed": mean_f1 >= f1_bar,
            "mean_f1": mean_f1, "min_f1": float(np.min(f1s)), "tau": tau,
            "n_shapes": len(f1s), "bar": f1_bar}


# ---------------------------------------------------------------------------
# 10. end-to-end inversion
# ---------------------------------------------------------------------------

def check_inversion(surrogate, decoder, dataset, target_indices, steps=400,
                    lr=1e-2, seed=0, mismatch_factor=0.10, chamfer_factor=0.50):
    cfg = ol.OptRunConfig(steps=steps, lr=lr, track_contours=False, seed=seed)
    per_target = []
    for idx in target_indices:
        sample = dataset.samples[idx]
        z_star, record = ol.invert_shape(surrogate, decoder, sample.observations,
                                         dataset.sensors, cfg)
        truth = sample.shape.boundary(256).points

        def chamfer_of(z):
            contour = sdfnet.decoded_contour(decoder, z, n=128)
            if contour is None:
                return float("inf")
            return geo.point_metrics(contour.resample(256).points, truth, 0.05,
                                     include_emd=False)["chamfer"]

        cd0 = chamfer_of(np.zeros(decoder.d))
        cd1 = chamfer_of(z_star)
        m0 = record.final["initial_mismatch"]
        m1 = record.final["mismatch"]
        per_target.append({"index": int(idx), "mismatch_ratio": m1 / m0,
                           "chamfer_ratio": cd1 / cd0,
                           "final_mismatch": m1, "final_chamfer": cd1})
    passed = all(t["mismatch_ratio"] <= mismatch_factor
                 and t["chamfer_ratio"] <= chamfer_factor for t in per_target)
    return {"name": "end-to-end-inversion", "passed": bool(passed),
            "targets": per_target, "mismatch_factor": mismatch_factor,
            "chamfer_factor": chamfer_factor}


# ---------------------------------------------------------------------------
# 11. forces exactness
# ---------------------------------------------------------------------------

def check_forces():
    spec = fr.CvSpec(samples_per_side=100)
    pts = spec.boundary_points()
    sides = {k: {"u": np.zeros(100), "v": np.zeros(100), "p": xy[:, 0].copy()}
             for k, xy in pts.items()}
    f_x, f_y = fr.cv_forces(sides, spec)
    checks = {
        "linear_pressure_fx": abs(float(f_x) + 6.0) < 1e-12,
        "linear_pressure_fy": abs(float(f_y)) < 1e-12,
        "rotation_zero_alpha": fr.lift_drag(1.0, 2.0, 0.0) == (2.0, 1.0),
        "reference_cl": abs(float(fr.aero_coeffs(0.75 * 0.0050, 0.0)[0]) - 0.75) < 1e-12,
        "hinge_inactive": float(fr.aero_objective(1.0, 0.015)) == -1.0,
        "hinge_squared": abs(float(fr.aero_objective(0.0, 0.030)) - 0.01) < 1e-15,
        "defaults": (fr.CD_MAX_DEFAULT, fr.LAMBDA_CD_DEFAULT, fr.Q_INF_DEFAULT,
                     fr.ALPHA_DEG_DEFAULT, fr.RHO_DEFAULT, fr.LAMBDA_REG_DEFAULT)
                    == (0.020, 100.0, 0.0050, 4.0, 1.0, 0.001),
    }
    samples = [fr.SurfaceSample(1.0, np.array([1.0, 0.0]), 0.01) for _ in range(100)]
    checks["drag_single_face"] = abs(float(fr.drag_proxy(samples)) + 1.0) < 1e-12
    rot_ok = True
    rng = np.random.default_rng(0)
    for _ in range(10):
        fx, fy, a = rng.standard_normal(3)
        L, D = fr.lift_drag(fx, fy, a)
        rot_ok &= abs(float(L) ** 2 + float(D) ** 2 - fx ** 2 - fy ** 2) < 1e-12
    checks["rotation_isometry"] = bool(rot_ok)
    return {"name": "forces-exactness", "passed": all(checks.values()),
            "checks": {k: bool(v) for k, v in checks.items()}}


# ---------------------------------------------------------------------------
# 12. Helmholtz solver
# ---------------------------------------------------------------------------

def check_helmholtz(seed=0):
    shape = geo.random_shape(seed=0, rng=substream(seed, "verify-helm"))
    zero_q = geo.GridField(64, 64, (-1, 1, -1, 1), np.zeros(64 * 64))
    psi0 = hh.solve_forward(zero_q, 7.0, 0.0)
    zero_ok = bool(np.all(psi0.values == 0))

    q64 = hh.rasterize_q(shape, 64, 1.0)
    psi64 = hh.solve_forward(q64, 7.0, 0.0)
    A = hh._assemble(q64, 7.0)
    b = hh._rhs(q64, 7.0, 0.0)
    residual = float(np.linalg.norm(A @ psi64.values - b) / np.linalg.norm(b))

    q128 = hh.rasterize_q(shape, 128, 1.0)
    psi128 = hh.solve_forward(q128, 7.0, 0.0)
    probe = np.array([[0.4, 0.1]])

    def probe_abs(psi):
        return abs(hh.interp_bilinear(psi.real, probe)[0]
                   + 1j * hh.interp_bilinear(psi.imag, probe)[0])

    v64, v128 = probe_abs(psi64), probe_abs(psi128)
    convergence = abs(v128 - v64) / abs(v128)
    passed = zero_ok and residual < 1e-10 and convergence < 0.05
    return {"name": "helmholtz-solver", "passed": bool(passed),
            "zero_contrast_zero_field": zero_ok, "residual": residual,
            "probe_change_64_to_128": float(convergence)}


def render_report(results):
    lines = []
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        details = {k: v for k, v in r.items() if k not in ("name", "passed")}
        brief = ", ".join(f"{k}={_fmt(v)}" for k, v in details.items()
                          if not isinstance(v, (list, dict)))
        lines.append(f"[{status}] {r['name']}: {brief}")
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
