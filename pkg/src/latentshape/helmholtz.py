"""2D Helmholtz scattering forward solver and dataset generation.

The scattered field psi of a penetrable obstacle satisfies

    lap(psi) + kappa^2 (1 + q) psi = -kappa^2 q psi_inc     in D = [-1,1]^2,
    dpsi/dn - i kappa psi = 0                               on the boundary,

with incident plane wave psi_inc = exp(i kappa x . d). Discretization is the
5-point Laplacian on an n x n nodal grid with one-sided differences for the
boundary rows; the complex sparse system is solved by direct LU. The solver
is the data oracle for surrogate training and inversion; it is never
differentiated.

Boundary row stencils (h = grid spacing, outward normal n):
  edge, e.g. left column:  (psi[0,j] - psi[1,j]) / h - i kappa psi[0,j] = 0
  corner: the two one-sided differences combined along the diagonal normal,
  e.g. bottom-left: ((psi00 - psi10)/h + (psi00 - psi01)/h)/sqrt(2)
        - i kappa psi00 = 0.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import geometry as geo
from .rng import substream
from .sdfnet import sample_training_pairs


@dataclass
class ScatterConfig:
    n: int = 64
    kappa: float = 7.0
    q_tilde: float = 1.0
    angles: tuple = (0.0, np.pi / 2, np.pi, 3 * np.pi / 2)
    bounds: tuple = (-1.0, 1.0, -1.0, 1.0)

    def __post_init__(self):
        if self.n < 32:
            raise ValueError(f"grid resolution n={self.n} is below the minimum 32")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.q_tilde <= -1:
            raise ValueError("q_tilde must satisfy q > -1")


@dataclass
class ComplexField:
    real: geo.GridField
    imag: geo.GridField

    def __post_init__(self):
        if self.real.values.shape != self.imag.values.shape:
            raise ValueError("real/imag parts have mismatched shapes")

    @property
    def values(self):
        return self.real.values + 1j * self.imag.values

    @classmethod
    def from_complex(cls, n, bounds, values):
        return cls(geo.GridField(n, n, bounds, values.real.copy()),
                   geo.GridField(n, n, bounds, values.imag.copy()))


@dataclass
class SensorArray:
    """Observation points on the circle |x| = radius."""

    radius: float = 0.5
    count: int = 100
    seed: int = 0
    angles: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.angles is None:
            rng = substream(self.seed, "sensors")
            self.angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, self.count))
        self.angles = np.asarray(self.angles, dtype=np.float64)

    def positions(self):
        return self.radius * np.stack([np.cos(self.angles), np.sin(self.angles)], axis=1)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def rasterize_q(shape: geo.FourierShape, n, q_tilde=1.0,
                bounds=(-1.0, 1.0, -1.0, 1.0)) -> geo.GridField:
    """Piecewise-constant contrast: q_tilde where the node is inside the shape.

    Inside-ness is the star-shaped radial test, so no SDF evaluation is needed.
    """
    grid = geo.GridField(n, n, bounds, np.zeros(n * n))
    pts = grid.node_coords()
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    inside = np.linalg.norm(pts, axis=1) < shape.radius(theta)
    grid.values = np.where(inside, float(q_tilde), 0.0)
    return grid


def incident_wave(points, kappa, angle):
    """Plane wave exp(i kappa x . d), d = (cos angle, sin angle)."""
    points = np.asarray(points, dtype=np.float64)
    d = np.array([np.cos(angle), np.sin(angle)])
    return np.exp(1j * kappa * points @ d)


# ---------------------------------------------------------------------------
# forward solve
# ---------------------------------------------------------------------------

def _assemble(q: geo.GridField, kappa):
    n = q.nx
    if q.ny != n:
        raise ValueError("solver grid must be square")
    h = q.spacing()[0]
    qv = q.as_matrix()
    N = n * n

    def idx(i, j):  # i: x index, j: y index
        return j * n + i

    rows, cols, vals = [], [], []

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    ik = 1j * kappa
    for j in range(n):
        for i in range(n):
            r = idx(i, j)
            on_l, on_r = i == 0, i == n - 1
            on_b, on_t = j == 0, j == n - 1
            if not (on_l or on_r or on_b or on_t):
                put(r, r, -4.0 / h ** 2 + kappa ** 2 * (1.0 + qv[j, i]))
                put(r, idx(i - 1, j), 1.0 / h ** 2)
                put(r, idx(i + 1, j), 1.0 / h ** 2)
                put(r, idx(i, j - 1), 1.0 / h ** 2)
                put(r, idx(i, j + 1), 1.0 / h ** 2)
                continue
            # absorbing boundary: one-sided outward difference minus i*kappa
            n_sides = int(on_l) + int(on_r) + int(on_b) + int(on_t)
            scale = 1.0 / np.sqrt(2.0) if n_sides == 2 else 1.0
            diag = -ik
            if on_l:
                diag += scale / h
                put(r, idx(1, j), -scale / h)
            if on_r:
                diag += scale / h
                put(r, idx(n - 2, j), -scale / h)
            if on_b:
                diag += scale / h
                put(r, idx(i, 1), -scale / h)
            if on_t:
                diag += scale / h
                put(r, idx(i, n - 2), -scale / h)
            put(r, r, diag)

    A = sp.csc_matrix((vals, (rows, cols)), shape=(N, N), dtype=np.complex128)
    return A


def _rhs(q: geo.GridField, kappa, angle, source_scale=1.0):
    n = q.nx
    pts = grid_points(q)
    b = -kappa ** 2 * q.values * incident_wave(pts, kappa, angle) * source_scale
    # boundary rows are homogeneous
    mask = boundary_mask(n)
    b[mask] = 0.0
    return b


def grid_points(grid: geo.GridField):
    return grid.node_coords()


def boundary_mask(n):
    m = np.zeros((n, n), dtype=bool)
    m[0, :] = m[-1, :] = True
    m[:, 0] = m[:, -1] = True
    return m.ravel()


def solve_forward(q: geo.GridField, kappa, angle, source_scale=1.0,
                  residual_tol=1e-10) -> ComplexField:
    """Scattered field for contrast ``q`` under the plane wave at ``angle``.

    Direct sparse LU; the discrete residual |A psi - b| / |b| must come out
    below ``residual_tol`` or the solve aborts.
    """
    A = _assemble(q, kappa)
    b = _rhs(q, kappa, angle, source_scale)
    bounds = q.bounds
    if not np.any(b):
        return ComplexField.from_complex(q.nx, bounds, np.zeros(q.nx * q.nx, dtype=complex))
    try:
        lu = splu(A)
        psi = lu.solve(b)
    except RuntimeError as exc:
        raise RuntimeError(f"helmholtz solve failed (singular system?): {exc}") from exc
    if not np.isfinite(psi).all():
        raise RuntimeError("helmholtz solve produced non-finite values")
    res = np.linalg.norm(A @ psi - b) / np.linalg.norm(b)
    if res > residual_tol:
        raise RuntimeError(f"helmholtz residual {res:.3e} exceeds {residual_tol:g} "
                           "(ill-conditioned system)")
    return ComplexField.from_complex(q.nx, bounds, psi)


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------

def interp_bilinear(grid: geo.GridField, points):
    """Bilinear interpolation of grid values at arbitrary points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x0, x1, y0, y1 = grid.bounds
    hx, hy = grid.spacing()
    fx = np.clip((points[:, 0] - x0) / hx, 0, grid.nx - 1 - 1e-12)
    fy = np.clip((points[:, 1] - y0) / hy, 0, grid.ny - 1 - 1e-12)
    i = fx.astype(int)
    j = fy.astype(int)
    tx = fx - i
    ty = fy - j
    m = grid.as_matrix()
    return ((1 - tx) * (1 - ty) * m[j, i] + tx * (1 - ty) * m[j, i + 1]
            + (1 - tx) * ty * m[j + 1, i] + tx * ty * m[j + 1, i + 1])


def observe(psi: ComplexField, sensors: SensorArray):
    """Complex field values at the sensor positions (bilinear)."""
    pos = sensors.positions()
    x0, x1, y0, y1 = psi.real.bounds
    if (pos[:, 0].min() < x0 or pos[:, 0].max() > x1
            or pos[:, 1].min() < y0 or pos[:, 1].max() > y1):
        raise ValueError("sensors lie outside the computational domain")
    return interp_bilinear(psi.real, pos) + 1j * interp_bilinear(psi.imag, pos)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class ScatterSample:
    shape: geo.FourierShape
    q: geo.GridField
    fields: dict           # angle -> ComplexField
    observations: dict     # angle -> complex vector at the sensors
    sdf_points: np.ndarray
    sdf_values: np.ndarray


@dataclass
class ScatterDataset:
    samples: list
    sensors: SensorArray
    config: ScatterConfig
    splits: dict           # name -> list of sample indices
    seed: int


def split_indices(n, ratios=(8, 1, 1)):
    """Contiguous train/val/test split by the stated ratio."""
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    return {"train": list(range(n_train)),
            "val": list(range(n_train, n_train + n_val)),
            "test": list(range(n_train + n_val, n))}


def _build_sample(args):
    i, seed, cfg, sdf_samples, r0_range, amp_range = args
    sensors = SensorArray(seed=seed)
    shape = geo.random_shape(seed=0, r0_range=r0_range, amp_range=amp_range,
                             rng=substream(seed, "dataset", "shape", i))
    q = rasterize_q(shape, cfg.n, cfg.q_tilde, cfg.bounds)
    fields, obs = {}, {}
    for angle in cfg.angles:
        psi = solve_forward(q, cfg.kappa, angle)
        fields[float(angle)] = psi
        obs[float(angle)] = observe(psi, sensors)
    pts, vals = None, None
    if sdf_samples > 0:
        pts, vals = sample_training_pairs(shape, sdf_samples,
                                          rng=substream(seed, "dataset", "sdf", i))
    return ScatterSample(shape, q, fields, obs, pts, vals)


def gen_dataset(n_shapes, cfg: ScatterConfig, seed=0, sdf_samples=1500,
                r0_range=(0.2, 0.32), amp_range=(0.0, 0.02),
                progress=None, jobs=1) -> ScatterDataset:
    """Reproducible scattering dataset: shapes, contrast rasters, per-angle
    fields, sensor observations and SDF supervision pairs.

    Per-shape randomness comes from named substreams, so the result is
    independent of ``jobs`` (shapes may solve in parallel).
    """
    sensors = SensorArray(seed=seed)
    work = [(i, seed, cfg, sdf_samples, r0_range, amp_range) for i in range(n_shapes)]
    if jobs > 1:
        from multiprocessing import Pool
        with Pool(jobs) as pool:
            samples = pool.map(_build_sample, work)
        if progress is not None:
            progress(n_shapes - 1, n_shapes)
    else:
        samples = []
        for item in work:
            samples.append(_build_sample(item))
            if progress is not None:
                progress(item[0], n_shapes)
    return ScatterDataset(samples, sensors, cfg, split_indices(n_shapes), seed)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

FIELD_MAGIC = b"LSFLD001"


def save_field(path, psi: ComplexField, angle):
    """Little-endian doubles with a header carrying n and the angle."""
    n = psi.real.nx
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<qd", n, float(angle)))
        fh.write(np.ascontiguousarray(psi.real.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(psi.imag.values, dtype="<f8").tobytes())


def load_field(path, bounds=(-1.0, 1.0, -1.0, 1.0)):
    with open(path, "rb") as fh:
        if fh.read(8) != FIELD_MAGIC:
            raise ValueError("not a field dump")
        n, angle = struct.unpack("<qd", fh.read(16))
        re = np.frombuffer(fh.read(n * n * 8), dtype="<f8").copy()
        im = np.frombuffer(fh.read(n * n * 8), dtype="<f8").copy()
    return ComplexField(geo.GridField(n, n, bounds, re),
                        geo.GridField(n, n, bounds, im)), angle


def save_dataset(outdir, ds: ScatterDataset):
    """One directory per shape: coefficients CSV, q raster, field dumps and
    sensor observation CSVs. A dataset.json header makes the directory
    self-describing (seed, grid, angles), so SDF supervision pairs can be
    regenerated deterministically on load."""
    import json
    import os
    os.makedirs(outdir, exist_ok=True)
    sdf_n = len(ds.samples[0].sdf_points) if ds.samples and ds.samples[0].sdf_points is not None else 0
    with open(os.path.join(outdir, "dataset.json"), "w") as fh:
        json.dump({"seed": ds.seed, "n_shapes": len(ds.samples),
                   "n": ds.config.n, "kappa": ds.config.kappa,
                   "q_tilde": ds.config.q_tilde,
                   "angles": [float(a) for a in ds.config.angles],
                   "sdf_samples": sdf_n}, fh, indent=2)
    with open(os.path.join(outdir, "sensors.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle"])
        for a in ds.sensors.angles:
            w.writerow([repr(float(a))])
    with open(os.path.join(outdir, "splits.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "index"])
        for name, idxs in ds.splits.items():
            for i in idxs:
                w.writerow([name, i])
    for i, sample in enumerate(ds.samples):
        d = os.path.join(outdir, f"shape_{i:04d}")
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, "coefficients.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["term", "order", "value_a", "value_b"])
            w.writerow(["r0", 0, repr(float(sample.shape.r0)), ""])
            for k, a, b in sample.shape.harmonics:
                w.writerow(["harmonic", k, repr(float(a)), repr(float(b))])
        geo.save_grid_csv(os.path.join(d, "q_raster.csv"), sample.q)
        for angle, psi in sample.fields.items():
            save_field(os.path.join(d, f"field_{angle:.6f}.bin"), psi, angle)
        for angle, obs in sample.observations.items():
            with open(os.path.join(d, f"obs_{angle:.6f}.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["sensor_angle", "re", "im"])
                for sa, val in zip(ds.sensors.angles, obs):
                    w.writerow([repr(float(sa)), repr(float(val.real)), repr(float(val.imag))])


def load_dataset(outdir) -> ScatterDataset:
    """Rebuild a dataset from ``save_dataset`` output.

    Contrast rasters and SDF supervision pairs are regenerated
    deterministically (same substreams as generation), fields and
    observations come from disk.
    """
    import json
    import os
    with open(os.path.join(outdir, "dataset.json")) as fh:
        head = json.load(fh)
    cfg = ScatterConfig(n=head["n"], kappa=head["kappa"], q_tilde=head["q_tilde"],
                        angles=tuple(head["angles"]))
    seed = head["seed"]
    with open(os.path.join(outdir, "sensors.csv"), newline="") as fh:
        angles = np.array([float(r[0]) for r in list(csv.reader(fh))[1:]])
    sensors = SensorArray(seed=seed, angles=angles)
    splits = {"train": [], "val": [], "test": []}
    with open(os.path.join(outdir, "splits.csv"), newline="") as fh:
        for name, idx in list(csv.reader(fh))[1:]:
            splits[name].append(int(idx))
    samples = []
    for i in range(head["n_shapes"]):
        d = os.path.join(outdir, f"shape_{i:04d}")
        with open(os.path.join(d, "coefficients.csv"), newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        r0 = float(rows[0][2])
        harmonics = [(int(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]
        shape = geo.FourierShape(r0, harmonics)
        q = rasterize_q(shape, cfg.n, cfg.q_tilde, cfg.bounds)
        fields, obs = {}, {}
        for angle in cfg.angles:
            psi, _ = load_field(os.path.join(d, f"field_{angle:.6f}.bin"), cfg.bounds)
            fields[float(angle)] = psi
            with open(os.path.join(d, f"obs_{angle:.6f}.csv"), newline="") as fh:
                vals = [complex(float(r[1]), float(r[2]))
                        for r in list(csv.reader(fh))[1:]]
            obs[float(angle)] = np.array(vals)
        pts = vals_s = None
        if head["sdf_samples"] > 0:
            pts, vals_s = sample_training_pairs(shape, head["sdf_samples"],
                                                rng=substream(seed, "dataset", "sdf", i))
        samples.append(ScatterSample(shape, q, fields, obs, pts, vals_s))
    return ScatterDataset(samples, sensors, cfg, splits, seed)
