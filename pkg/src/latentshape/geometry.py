"""Ground-truth 2D geometry: random Fourier-descriptor shapes, an exact signed
distance oracle, level-set contour extraction and point-set error metrics.

Shapes are star-shaped about the origin with boundary radius

    r(theta) = r0 + sum_k a_k cos(k theta) + b_k sin(k theta),  k in [3, 8],

so inside/outside reduces to a radial comparison and the unsigned distance is
taken against a dense boundary polyline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .rng import substream

HARMONIC_ORDERS = (3, 4, 5, 6, 7, 8)
ORACLE_SEGMENTS = 2048
_THETA_CHECK = 4096
EMD_MAX_POINTS = 512


@dataclass
class FourierShape:
    """Star-shaped boundary from Fourier descriptors of orders 3..8."""

    r0: float
    harmonics: list = field(default_factory=list)  # (order, a_k, b_k)

    def radius(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        r = np.full_like(theta, self.r0)
        for k, a, b in self.harmonics:
            r = r + a * np.cos(k * theta) + b * np.sin(k * theta)
        return r

    def radius_deriv(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        dr = np.zeros_like(theta)
        for k, a, b in self.harmonics:
            dr = dr + k * (-a * np.sin(k * theta) + b * np.cos(k * theta))
        return dr

    def boundary(self, n=ORACLE_SEGMENTS):
        """Closed boundary polyline with ``n`` segments (no repeated endpoint)."""
        theta = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        r = self.radius(theta)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        return Polyline(pts, closed=True)

    def rotate(self, phi) -> "FourierShape":
        """Shape rotated rigidly by angle ``phi`` (r'(theta) = r(theta - phi))."""
        rotated = []
        for k, a, b in self.harmonics:
            c, s = np.cos(k * phi), np.sin(k * phi)
            rotated.append((k, a * c - b * s, a * s + b * c))
        return FourierShape(self.r0, rotated)


@dataclass
class Polyline:
    """Ordered 2D point chain; closed chains do not repeat the start point."""

    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.points)

    def segments(self):
        """(start, end) arrays of all segments."""
        p = self.points
        if self.closed:
            return p, np.roll(p, -1, axis=0)
        return p[:-1], p[1:]

    def arc_length(self):
        a, b = self.segments()
        return float(np.linalg.norm(b - a, axis=1).sum())

    def resample(self, n):
        """n points equally spaced in arc length along the chain."""
        a, b = self.segments()
        seg = np.linalg.norm(b - a, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        total = cum[-1]
        targets = np.linspace(0.0, total, n, endpoint=not self.closed)
        out = np.empty((n, 2))
        j = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
        t = (targets - cum[j]) / np.where(seg[j] > 0, seg[j], 1.0)
        out = a[j] + t[:, None] * (b[j] - a[j])
        return Polyline(out, closed=self.closed)


@dataclass
class GridField:
    """Scalar field sampled at the nodes of a regular grid.

    Nodes are ``linspace`` endpoints of ``bounds`` per axis; ``values`` is
    row-major with x varying fastest: ``values[j * nx + i] = f(x_i, y_j)``.
    """

    nx: int
    ny: int
    bounds: tuple  # (xmin, xmax, ymin, ymax)
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=self.values.dtype).reshape(self.ny * self.nx)

    def xs(self):
        return np.linspace(self.bounds[0], self.bounds[1], self.nx)

    def ys(self):
        return np.linspace(self.bounds[2], self.bounds[3], self.ny)

    def as_matrix(self):
        return self.values.reshape(self.ny, self.nx)

    def spacing(self):
        return ((self.bounds[1] - self.bounds[0]) / (self.nx - 1),
                (self.bounds[3] - self.bounds[2]) / (self.ny - 1))

    def node_coords(self):
        """(nx*ny, 2) coordinates in value order."""
        X, Y = np.meshgrid(self.xs(), self.ys())
        return np.stack([X.ravel(), Y.ravel()], axis=1)


def grid_from_function(fn, n, bounds=(-1.0, 1.0, -1.0, 1.0)) -> GridField:
    g = GridField(n, n, bounds, np.zeros(n * n))
    g.values = np.asarray(fn(g.node_coords()), dtype=np.float64).reshape(n * n)
    return g


# ---------------------------------------------------------------------------
# shape sampling
# ---------------------------------------------------------------------------

def random_shape(seed, r0_range=(0.2, 0.32), amp_range=(0.0, 0.02),
                 max_radius=0.5, rng=None) -> FourierShape:
    """Reproducible random shape; resamples until r(theta) > 0 and
    max r <= ``max_radius`` on a dense theta grid. Coefficient magnitudes are
    uniform in ``amp_range`` with random signs.
    """
    if rng is None:
        rng = substream(seed, "shape")
    lo, hi = amp_range
    if lo < 0 or hi < lo:
        raise ValueError(f"amp_range must satisfy 0 <= lo <= hi, got {amp_range}")
    theta = np.linspace(0.0, 2.0 * np.pi, _THETA_CHECK, endpoint=False)
    for _ in range(100):
        r0 = rng.uniform(*r0_range)
        harm = []
        for k in HARMONIC_ORDERS:
            a = rng.uniform(lo, hi) * rng.choice([-1.0, 1.0])
            b = rng.uniform(lo, hi) * rng.choice([-1.0, 1.0])
            harm.append((k, a, b))
        shape = FourierShape(r0, harm)
        r = shape.radius(theta)
        if r.min() > 1e-3 and r.max() <= max_radius:
            return shape
    raise ValueError("random_shape: 100 consecutive rejections; "
                     f"r0_range={r0_range}, amp_range={amp_range} is infeasible")


# ---------------------------------------------------------------------------
# signed distance oracle
# ---------------------------------------------------------------------------

def _point_segment_dist(points, seg_a, seg_b, chunk=2048):
    """Min distance from each point to any segment (brute force, chunked)."""
    points = np.atleast_2d(points)
    d = seg_b - seg_a                      # (S,2)
    dd = (d * d).sum(axis=1)
    dd = np.where(dd > 0, dd, 1.0)
    best = np.full(len(points), np.inf)
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]
        ap = p[:, None, :] - seg_a[None, :, :]          # (P,S,2)
        t = np.clip((ap * d[None, :, :]).sum(axis=2) / dd[None, :], 0.0, 1.0)
        closest = seg_a[None, :, :] + t[:, :, None] * d[None, :, :]
        dist = np.linalg.norm(p[:, None, :] - closest, axis=2)
        best[start:start + chunk] = dist.min(axis=1)
    return best


def sdf_oracle(shape: FourierShape, x, segments=ORACLE_SEGMENTS):
    """Signed distance at query points ``x`` (shape (2,) or (N, 2)).

    Unsigned distance against an ``segments``-segment boundary polyline; sign
    is negative iff ``|x| < r(atan2(y, x))`` (valid for star-shaped contours).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    poly = shape.boundary(segments)
    a, b = poly.segments()
    dist = _point_segment_dist(pts, a, b)
    theta = np.arctan2(pts[:, 1], pts[:, 0])
    inside = np.linalg.norm(pts, axis=1) < shape.radius(theta)
    s = np.where(inside, -dist, dist)
    return float(s[0]) if single else s


# ---------------------------------------------------------------------------
# marching squares
# ---------------------------------------------------------------------------

def _edge_point(p0, p1, v0, v1):
    t = v0 / (v0 - v1)
    return p0 + t * (p1 - p0)


def marching_squares(grid: GridField, iso=0.0):
    """Contours of ``grid`` at level ``iso`` as a list of Polylines.

    Linear interpolation along cell edges; segments are chained into closed or
    open polylines. A constant grid yields an empty list.
    """
    if grid.nx < 2 or grid.ny < 2:
        raise ValueError("marching_squares: grid needs at least 2x2 nodes")
    f = grid.as_matrix() - iso
    xs, ys = grid.xs(), grid.ys()

    # edge key: (j, i, 0) = horizontal edge from node (i,j) to (i+1,j)
    #           (j, i, 1) = vertical   edge from node (i,j) to (i,j+1)
    segments = []   # list of (key_a, key_b)
    points = {}

    def edge(j, i, orient, v0, v1, p0, p1):
        key = (j, i, orient)
        if key not in points:
            points[key] = _edge_point(p0, p1, v0, v1)
        return key

    for j in range(grid.ny - 1):
        for i in range(grid.nx - 1):
            v00, v10 = f[j, i], f[j, i + 1]
            v01, v11 = f[j + 1, i], f[j + 1, i + 1]
            case = (int(v00 < 0) + (int(v10 < 0) << 1)
                    + (int(v11 < 0) << 2) + (int(v01 < 0) << 3))
            if case == 0 or case == 15:
                continue
            p00 = np.array([xs[i], ys[j]])
            p10 = np.array([xs[i + 1], ys[j]])
            p01 = np.array([xs[i], ys[j + 1]])
            p11 = np.array([xs[i + 1], ys[j + 1]])
            bottom = lambda: edge(j, i, 0, v00, v10, p00, p10)
            top = lambda: edge(j + 1, i, 0, v01, v11, p01, p11)
            left = lambda: edge(j, i, 1, v00, v01, p00, p01)
            right = lambda: edge(j, i + 1, 1, v10, v11, p10, p11)
            # the 16-case table, ambiguous saddles resolved by the cell mean
            if case in (1, 14):
                segments.append((left(), bottom()))
            elif case in (2, 13):
                segments.append((bottom(), right()))
            elif case in (3, 12):
                segments.append((left(), right()))
            elif case in (4, 11):
                segments.append((right(), top()))
            elif case in (6, 9):
                segments.append((bottom(), top()))
            elif case in (7, 8):
                segments.append((left(), top()))
            elif case == 5:
                if (v00 + v10 + v01 + v11) < 0:  # inside corners connect
                    segments.append((bottom(), right()))
                    segments.append((left(), top()))
                else:
                    segments.append((left(), bottom()))
                    segments.append((right(), top()))
            elif case == 10:
                if (v00 + v10 + v01 + v11) < 0:
                    segments.append((left(), bottom()))
                    segments.append((right(), top()))
                else:
                    segments.append((bottom(), right()))
                    segments.append((left(), top()))

    return _chain_segments(segments, points)


def _chain_segments(segments, points):
    adj = {}
    for a, b in segments:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    unused = {tuple(sorted((a, b))) for a, b in segments}

    def take(a, b):
        unused.discard(tuple(sorted((a, b))))

    polylines = []
    # open chains first (endpoints with degree 1), then remaining loops
    for start in [k for k, v in adj.items() if len(v) == 1] + list(adj):
        path = None
        for nxt in adj[start]:
            if tuple(sorted((start, nxt))) in unused:
                path = [start, nxt]
                take(start, nxt)
                break
        if path is None:
            continue
        while True:
            cur = path[-1]
            step = None
            for cand in adj[cur]:
                if tuple(sorted((cur, cand))) in unused:
                    step = cand
                    break
            if step is None:
                break
            take(cur, step)
            path.append(step)
        closed = path[0] == path[-1]
        if closed:
            path = path[:-1]
        pts = np.array([points[k] for k in path])
        if len(pts) >= 2:
            polylines.append(Polyline(pts, closed=closed))
    return polylines


def longest_contour(polylines):
    """The contour with the greatest arc length (None if empty)."""
    if not polylines:
        return None
    return max(polylines, key=lambda p: p.arc_length())


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def hausdorff(a: Polyline, b: Polyline) -> float:
    """Symmetric Hausdorff distance: max of the two directed sup-inf
    point-to-segment distances."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("hausdorff: empty polyline")
    sa, sb = a.segments(), b.segments()
    d_ab = _point_segment_dist(a.points, *sb).max()
    d_ba = _point_segment_dist(b.points, *sa).max()
    return float(max(d_ab, d_ba))


def _pairwise(p, g):
    diff = p[:, None, :] - g[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def point_metrics(pred, truth, tau, include_emd=True):
    """F1 at threshold ``tau``, symmetric Chamfer distance (mean squared
    nearest-neighbor distances both ways) and exact EMD.

    EMD solves the assignment problem exactly; it demands equal-size sets and
    is refused above ``EMD_MAX_POINTS`` points. Pass ``include_emd=False``
    when only F1/Chamfer are needed.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if len(pred) == 0 or len(truth) == 0:
        raise ValueError("point_metrics: empty point set")
    dm = _pairwise(pred, truth)
    nn_p = dm.min(axis=1)
    nn_g = dm.min(axis=0)
    precision = float((nn_p <= tau).mean())
    recall = float((nn_g <= tau).mean())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    chamfer = float((nn_p ** 2).mean() + (nn_g ** 2).mean())
    out = {"f1": f1, "chamfer": chamfer}
    if include_emd:
        out["emd"] = _emd(pred, truth, dm)
    return out


def _emd(pred, truth, dm):
    if len(pred) != len(truth):
        raise ValueError(f"emd: point sets must have equal size, got {len(pred)} and {len(truth)}")
    if len(pred) > EMD_MAX_POINTS:
        raise ValueError(f"emd: exact assignment limited to {EMD_MAX_POINTS} points, got {len(pred)}")
    rows, cols = linear_sum_assignment(dm)
    return float(dm[rows, cols].mean())


def rel_errors(pred, truth):
    """Relative l1 and l2 error ratios, summed over all entries/channels."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"rel_errors: shape mismatch {pred.shape} vs {truth.shape}")
    denom1 = np.abs(truth).sum()
    denom2 = np.sqrt((truth ** 2).sum())
    if denom1 == 0 or denom2 == 0:
        raise ValueError("rel_errors: zero-norm truth")
    rel_l1 = float(np.abs(pred - truth).sum() / denom1)
    rel_l2 = float(np.sqrt(((pred - truth) ** 2).sum()) / denom2)
    return {"rel_l1": rel_l1, "rel_l2": rel_l2}


# ---------------------------------------------------------------------------
# CSV serialization (plotting interchange)
# ---------------------------------------------------------------------------

def save_polyline_csv(path, poly: Polyline):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in poly.points:
            w.writerow([repr(float(x)), repr(float(y))])


def load_polyline_csv(path, closed=True) -> Polyline:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return Polyline(np.array([[float(r[0]), float(r[1])] for r in rows]), closed=closed)


def save_grid_csv(path, grid: GridField):
    coords = grid.node_coords()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for (x, y), v in zip(coords, grid.values):
            w.writerow([repr(float(x)), repr(float(y)), repr(complex(v)) if np.iscomplexobj(grid.values) else repr(float(v))])
