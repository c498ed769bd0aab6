"""Latent-space optimization and inversion loops.

The decoder and field predictor stay frozen; only the latent code moves. Each
iteration predicts fields at the current boundary-consistent samples,
backpropagates the objective to the latent, optionally projects the gradient
onto the null space of a constraint Jacobian (part-wise control), applies
Adam, and finally pulls the sample points back onto the updated zero level
set with damped Gauss-Newton steps. The reprojection is deliberately outside
any tape: the transport term it would contribute is the quantity
``check_grad_mismatch`` bounds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import forces as fr
from . import geometry as geo
from .autodiff import AdamState, DivergenceError, adam_step
from .sdfnet import (SdfDecoder, decode_sdf, decoded_contour, latent_gradients,
                     sdf_and_grad, spatial_gradients)


@dataclass
class ConstraintSet:
    """Protected points whose decoded SDF values must stay fixed."""

    points: np.ndarray
    reference: np.ndarray = None   # target SDF values (default: current values)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.isfinite(self.points).all():
            raise ValueError("constraint points must be finite")
        if self.reference is not None:
            self.reference = np.asarray(self.reference, dtype=np.float64)

    def __len__(self):
        return len(self.points)


@dataclass
class OptRunConfig:
    steps: int = 50                  # outer iterations T
    reproject_iters: int = 5         # K
    eps_proj: float = 1e-9           # Eq. stabilizer in the Gauss-Newton step
    lr: float = 1e-2
    lambda_reg: float = fr.LAMBDA_REG_DEFAULT
    lambda_cd: float = fr.LAMBDA_CD_DEFAULT
    cd_max: float = fr.CD_MAX_DEFAULT
    squared_hinge: bool = True
    rank_tol: float = 1e-10
    n_samples: int = 256             # surface sample count
    contour_grid: int = 128
    track_contours: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.reproject_iters < 1:
            raise ValueError("steps and reproject_iters must be >= 1")
        if self.eps_proj <= 0:
            raise ValueError("eps_proj must be positive")


@dataclass
class RunRecord:
    """Per-step log of an optimization/inversion run."""

    steps: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)

    def append(self, **kw):
        self.steps.append(kw)

    def to_csv(self, path):
        if not self.steps:
            return
        keys = list(self.steps[0])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in self.steps:
                w.writerow([repr(row.get(k)) for k in keys])

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"config": self.config, "final": self.final,
                       "n_steps": len(self.steps)}, fh, indent=2, default=float)


# ---------------------------------------------------------------------------
# null-space machinery
# ---------------------------------------------------------------------------

def constraint_jacobian(decoder: SdfDecoder, constraints: ConstraintSet, z):
    """M x d matrix of latent gradients of the decoded SDF at the protected
    points."""
    if len(constraints) == 0:
        return np.zeros((0, len(z)))
    _, gz = latent_gradients(decoder, constraints.points, z)
    return gz


def nullspace_projector(G, rank_tol=1e-10):
    """Orthogonal projector onto the numerical null space of G.

    SVD-based: right singular vectors with sigma > rank_tol * sigma_max span
    the row space; the projector removes them.
    """
    G = np.asarray(G, dtype=np.float64)
    d = G.shape[1]
    if G.size == 0 or not G.any():
        return np.eye(d)
    if not np.isfinite(G).all():
        raise ValueError("nullspace_projector: non-finite Jacobian")
    _, svals, vt = np.linalg.svd(G, full_matrices=False)
    keep = svals > rank_tol * svals[0]
    if keep.sum() >= d:  # full-rank constraints: null space is exactly {0}
        return np.zeros((d, d))
    vr = vt[keep]
    return np.eye(d) - vr.T @ vr


def project_gradient(P, g):
    """Projected (safe) gradient P @ g."""
    P = np.asarray(P, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if P.shape[1] != g.shape[0]:
        raise ValueError(f"project_gradient: shapes {P.shape} and {g.shape} disagree")
    return P @ g


# ---------------------------------------------------------------------------
# remeshing-free reprojection
# ---------------------------------------------------------------------------

def reproject_points(decoder: SdfDecoder, points, z, iters=5, eps_proj=1e-9,
                     d_ref=None, return_history=False):
    """Damped Gauss-Newton steps pulling points onto the decoded level set.

    Moves each point along its local SDF gradient until s = 0 (or s = d_ref
    for offset surfaces). Runs outside any tape: gradients never flow through
    this operation. Points that go non-finite are frozen at their last finite
    position.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()
    target = 0.0 if d_ref is None else np.asarray(d_ref, dtype=np.float64)
    history = []
    for _ in range(iters):
        s, gx = sdf_and_grad(decoder, pts, z)
        resid = s - target
        denom = (gx * gx).sum(axis=1) + eps_proj
        step = resid[:, None] * gx / denom[:, None]
        new_pts = pts - step
        ok = np.isfinite(new_pts).all(axis=1)
        pts[ok] = new_pts[ok]
        if return_history:
            history.append(np.abs(resid).copy())
    if return_history:
        s, _ = sdf_and_grad(decoder, pts, z)
        history.append(np.abs(s - target))
        return pts, history
    return pts


def initial_surface_samples(decoder, z, n=256, grid_n=128, iters=3, eps_proj=1e-9):
    """Contour of the decoded field resampled to n equal-arc points, then
    snapped onto the zero set."""
    contour = decoded_contour(decoder, z, n=grid_n)
    if contour is None:
        raise ValueError("decoded field has no zero contour")
    pts = contour.resample(n).points
    return reproject_points(decoder, pts, z, iters=iters, eps_proj=eps_proj)


def measured_constants(decoder, z, points):
    """Empirical regularity constants on the sample set: m_hat (min spatial
    gradient norm) and l_hat (max latent gradient norm)."""
    _, gx = spatial_gradients(decoder, points, z)
    _, gz = latent_gradients(decoder, points, z)
    return {"m_hat": float(np.linalg.norm(gx, axis=1).min()),
            "l_hat": float(np.linalg.norm(gz, axis=1).max())}


# ---------------------------------------------------------------------------
# inversion
# ---------------------------------------------------------------------------

def invert_shape(surrogate, decoder, observations, sensors, cfg: OptRunConfig,
                 z_init=None, angles=None, lambda_reg=None):
    """Latent-space inversion against sensor observations.

    ``observations``: dict angle -> complex vector at the sensor positions.
    Minimizes the mean squared complex mismatch plus the latent anchor; the
    best-objective latent is returned together with the run record.
    """
    d = decoder.d
    z = np.zeros(d) if z_init is None else np.asarray(z_init, dtype=np.float64).copy()
    z0 = z.copy()
    lam = cfg.lambda_reg if lambda_reg is None else lambda_reg
    if angles is None:
        angles = sorted(observations)
    pos = sensors.positions()
    queries, targets = [], []
    for a in angles:
        cond = np.concatenate([pos, np.tile([np.cos(a), np.sin(a)], (len(pos), 1))], axis=1)
        queries.append(cond)
        obs = observations[a]
        targets.append(np.stack([obs.real, obs.imag], axis=1))
    queries = np.stack(queries)      # (A, S, 4)
    targets = np.stack(targets)      # (A, S, 2)

    record = RunRecord(config={"steps": cfg.steps, "lr": cfg.lr, "lambda_reg": lam,
                               "n_angles": len(angles), "n_sensors": len(pos)})
    state = AdamState(lr=cfg.lr)
    best = {"z": z.copy(), "objective": np.inf, "mismatch": np.inf}
    for t in range(cfg.steps):
        tape = ad.Tape()
        zt = tape.leaf(z)
        pred = surrogate.predict_recorded(None, zt, query_tensor=queries)
        mismatch = ad.mean(ad.square(ad.sub(pred, targets)))
        anchor = ad.mul(ad.tensor_sum(ad.square(ad.sub(zt, z0))), lam)
        objective = ad.add(mismatch, anchor)
        ov = float(objective.values)
        if not np.isfinite(ov):
            raise DivergenceError(f"inversion objective non-finite at step {t}")
        grads = ad.backward(tape, objective)
        g = grads[zt.node]
        z_prev = z.copy()
        adam_step(state, z, g)
        record.append(step=t, objective=ov, mismatch=float(mismatch.values),
                      grad_norm=float(np.linalg.norm(g)),
                      dz=float(np.linalg.norm(z - z_prev)))
        if ov < best["objective"]:
            best = {"z": z.copy(), "objective": ov,
                    "mismatch": float(mismatch.values)}
    record.final = {"objective": best["objective"], "mismatch": best["mismatch"],
                    "initial_mismatch": record.steps[0]["mismatch"]}
    return best["z"], record


def sensor_mismatch(surrogate, z, observations, sensors, angles=None):
    """Mean squared complex mismatch of the surrogate prediction at the
    sensors (the inversion data term)."""
    if angles is None:
        angles = sorted(observations)
    pos = sensors.positions()
    total, count = 0.0, 0
    for a in angles:
        cond = np.concatenate([pos, np.tile([np.cos(a), np.sin(a)], (len(pos), 1))], axis=1)
        pred = surrogate.predict(cond, z)
        obs = observations[a]
        tgt = np.stack([obs.real, obs.imag], axis=1)
        total += ((pred - tgt) ** 2).sum()
        count += tgt.size
    return total / count


# ---------------------------------------------------------------------------
# field-objective optimization (vehicle-style loop)
# ---------------------------------------------------------------------------

def optimize_shape(surrogate, decoder, objective_fn, cfg: OptRunConfig, z_init,
                   constraints: ConstraintSet = None, conditioning=None,
                   samples=None):
    """Constrained latent optimization driven by a field objective.

    ``objective_fn(pred, points)`` maps the predicted fields (Tensor, N x C)
    and the current sample coordinates to a scalar Tensor. Every update
    direction passes through the null-space projector when constraints are
    given. Returns (best z, final samples, RunRecord).
    """
    z = np.asarray(z_init, dtype=np.float64).copy()
    if samples is None:
        samples = initial_surface_samples(decoder, z, n=cfg.n_samples,
                                          grid_n=cfg.contour_grid,
                                          eps_proj=cfg.eps_proj)
    X = np.asarray(samples, dtype=np.float64).copy()
    if constraints is not None and constraints.reference is None:
        constraints.reference = decode_sdf(decoder, constraints.points, z)

    record = RunRecord(config={"steps": cfg.steps, "lr": cfg.lr,
                               "constrained": constraints is not None,
                               "n_samples": len(X)})
    state = AdamState(lr=cfg.lr)
    best = {"z": z.copy(), "objective": np.inf, "samples": X.copy()}
    prev_contour = decoded_contour(decoder, z, n=cfg.contour_grid) \
        if cfg.track_contours else None
    for t in range(cfg.steps):
        tape = ad.Tape()
        zt = tape.leaf(z)
        queries = X if conditioning is None else \
            np.concatenate([X, np.tile(conditioning, (len(X), 1))], axis=1)
        pred = surrogate.predict_recorded(None, zt, query_tensor=queries)
        objective = objective_fn(pred, X)
        ov = float(objective.values)
        if not np.isfinite(ov):
            raise DivergenceError(f"objective non-finite at step {t}")
        tape_len = len(tape)
        g = ad.backward(tape, objective)[zt.node]
        g_safe = g
        g_residual = 0.0
        if constraints is not None and len(constraints) > 0:
            G = constraint_jacobian(decoder, constraints, z)
            P = nullspace_projector(G, cfg.rank_tol)
            g_safe = project_gradient(P, g)
            g_residual = float(np.linalg.norm(G @ g_safe))
        z_prev = z.copy()
        adam_step(state, z, g_safe)
        X = reproject_points(decoder, X, z, iters=cfg.reproject_iters,
                             eps_proj=cfg.eps_proj)
        assert len(tape) == tape_len, "projection leaked nodes onto the objective tape"
        s_after = decode_sdf(decoder, X, z)
        entry = dict(step=t, objective=ov,
                     grad_norm=float(np.linalg.norm(g)),
                     g_constraint_residual=g_residual,
                     dz=float(np.linalg.norm(z - z_prev)),
                     max_abs_s=float(np.abs(s_after).max()))
        if cfg.track_contours:
            contour = decoded_contour(decoder, z, n=cfg.contour_grid)
            if contour is not None and prev_contour is not None:
                entry["hausdorff_step"] = geo.hausdorff(contour, prev_contour)
            consts = measured_constants(decoder, z, X)
            entry.update(consts)
            prev_contour = contour
        record.append(**entry)
        if ov < best["objective"]:
            best = {"z": z.copy(), "objective": ov, "samples": X.copy()}
    record.final = {"objective": best["objective"]}
    return best["z"], best["samples"], record


# ---------------------------------------------------------------------------
# control-volume (airfoil-style) optimization
# ---------------------------------------------------------------------------

def optimize_airfoil_style(surrogate, decoder, cv_spec: fr.CvSpec,
                           cfg: OptRunConfig, z_init, samples=None):
    """Lift-maximizing loop over a (u, v, p) surrogate with the control-volume
    force balance, squared-hinge drag penalty and offset reprojection.

    The moving surface samples keep their initial SDF offsets (d_ref), so a
    mesh-like point set around the body stays shape-conforming.
    """
    z = np.asarray(z_init, dtype=np.float64).copy()
    if samples is None:
        samples = initial_surface_samples(decoder, z, n=cfg.n_samples,
                                          grid_n=cfg.contour_grid,
                                          eps_proj=cfg.eps_proj)
    X = np.asarray(samples, dtype=np.float64).copy()
    d_ref = decode_sdf(decoder, X, z)

    boundary = cv_spec.boundary_points()
    side_slices = {}
    rows = [X]
    offset = len(X)
    for name in ("left", "right", "bottom", "top"):
        pts = boundary[name]
        side_slices[name] = np.arange(offset, offset + len(pts))
        rows.append(pts)
        offset += len(pts)
    all_points = np.vstack(rows)

    record = RunRecord(config={"steps": cfg.steps, "lr": cfg.lr,
                               "lambda_cd": cfg.lambda_cd, "cd_max": cfg.cd_max,
                               "squared_hinge": cfg.squared_hinge})
    state = AdamState(lr=cfg.lr)
    best = {"z": z.copy(), "objective": np.inf}
    for t in range(cfg.steps):
        tape = ad.Tape()
        zt = tape.leaf(z)
        pred = surrogate.predict_recorded(None, zt, query_tensor=all_points)
        sides = {}
        for name, idx in side_slices.items():
            block = ad.gather(pred, idx, axis=0)
            u = ad.reshape(ad.gather(block, np.array([0]), axis=1), (-1,))
            v = ad.reshape(ad.gather(block, np.array([1]), axis=1), (-1,))
            p = ad.reshape(ad.gather(block, np.array([2]), axis=1), (-1,))
            sides[name] = {"u": u, "v": v, "p": ad.sub(p, cv_spec.p_inf)}
        f_x, f_y = fr.cv_forces(sides, cv_spec)
        lift, drag = fr.lift_drag(f_x, f_y, cv_spec.alpha_rad)
        c_l, c_d = fr.aero_coeffs(lift, drag, cv_spec.q_inf, cv_spec.chord)
        objective = fr.aero_objective(c_l, c_d, cfg.cd_max, cfg.lambda_cd,
                                      squared=cfg.squared_hinge)
        ov = float(objective.values)
        if not np.isfinite(ov):
            raise DivergenceError(f"aero objective non-finite at step {t}")
        g = ad.backward(tape, objective)[zt.node]
        z_prev = z.copy()
        adam_step(state, z, g)
        X = reproject_points(decoder, X, z, iters=cfg.reproject_iters,
                             eps_proj=cfg.eps_proj, d_ref=d_ref)
        all_points[:len(X)] = X
        record.append(step=t, objective=ov, c_l=float(c_l.values),
                      c_d=float(c_d.values),
                      grad_norm=float(np.linalg.norm(g)),
                      dz=float(np.linalg.norm(z - z_prev)))
        if ov < best["objective"]:
            best = {"z": z.copy(), "objective": ov,
                    "c_l": float(c_l.values), "c_d": float(c_d.values)}
    record.final = {k: v for k, v in best.items() if k != "z"}
    return best["z"], record


# ---------------------------------------------------------------------------
# detached-gradient diagnostic
# ---------------------------------------------------------------------------

def check_grad_mismatch(surrogate, decoder, z, samples, objective_fn,
                        conditioning=None, fd_step=1e-4, reproject_iters=8):
    """Detached gradient vs finite differences of the reduced objective.

    detached: grad_z of the objective with sample positions held fixed.
    full_fd: central differences of J(z) where the samples are re-projected
    onto the surface of each probed latent before evaluating.
    bound: sqrt(N) * (l_hat / m_hat) * |grad_X J| with constants measured at
    the samples.
    """
    z = np.asarray(z, dtype=np.float64)
    X = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    n = len(X)

    def build_queries(pts):
        if conditioning is None:
            return pts
        return np.concatenate([pts, np.tile(conditioning, (len(pts), 1))], axis=1)

    # detached gradient and grad wrt positions in one pass
    tape = ad.Tape()
    zt = tape.leaf(z)
    xt = tape.leaf(X)
    queries = xt if conditioning is None else \
        ad.concat([xt, np.tile(conditioning, (n, 1))], axis=1)
    pred = surrogate.predict_recorded(None, zt, query_tensor=queries)
    objective = objective_fn(pred, X)
    grads = ad.backward(tape, objective)
    detached = grads[zt.node]
    grad_x = grads[xt.node]

    def reduced(z_probe):
        pts = reproject_points(decoder, X, z_probe, iters=reproject_iters,
                               eps_proj=1e-15)
        p = surrogate.predict(build_queries(pts), z_probe)
        val = objective_fn(p, pts)
        return float(val.values if isinstance(val, ad.Tensor) else val)

    full_fd = np.zeros_like(z)
    for i in range(len(z)):
        zp, zm = z.copy(), z.copy()
        zp[i] += fd_step
        zm[i] -= fd_step
        full_fd[i] = (reduced(zp) - reduced(zm)) / (2 * fd_step)

    consts = measured_constants(decoder, z, X)
    bound = np.sqrt(n) * consts["l_hat"] / consts["m_hat"] * np.linalg.norm(grad_x)
    return {"detached": detached, "full_fd": full_fd,
            "mismatch": float(np.linalg.norm(full_fd - detached)),
            "bound": float(bound), **consts}


# ---------------------------------------------------------------------------
# synthetic incompressible-flow fields (harness for the CV loop)
# ---------------------------------------------------------------------------

def potential_flow_fields(points, radius, circulation, u_inf=0.1, rho=1.0):
    """(u, v, p_gauge) of ideal flow past a circle with circulation.

    Used to synthesize smooth, shape-dependent velocity/pressure fields so the
    control-volume loop can be exercised without external flow data. Points
    closer than the circle radius are evaluated at a clamped radius to keep
    the fields smooth where a non-circular body crosses the nominal circle.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    zeta = pts[:, 0] + 1j * pts[:, 1]
    r = np.abs(zeta)
    floor = radius + 0.02
    scale = np.where(r < floor, floor / np.maximum(r, 1e-12), 1.0)
    zeta = zeta * scale
    w = u_inf * (1.0 - (radius ** 2) / (zeta ** 2)) \
        - 1j * circulation / (2.0 * np.pi * zeta)
    u = w.real
    v = -w.imag
    speed2 = u * u + v * v
    p_gauge = 0.5 * rho * (u_inf ** 2 - speed2)
    return np.stack([u, v, p_gauge], axis=1)
