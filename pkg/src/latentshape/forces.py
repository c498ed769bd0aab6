"""Aerodynamic functionals: control-volume force sums, lift/drag rotation,
coefficients, the lift-maximization objective, and the surface-pressure drag
proxy.

All functions run on plain arrays or on recorded tensors, so the optimization
loops can differentiate straight through them. Forces operate on gauge
pressure; subtracting the freestream value is the caller's job.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .params import unwrap

CD_MAX_DEFAULT = 0.020
LAMBDA_CD_DEFAULT = 100.0
Q_INF_DEFAULT = 0.0050
ALPHA_DEG_DEFAULT = 4.0
RHO_DEFAULT = 1.0
LAMBDA_REG_DEFAULT = 0.001


@dataclass
class CvSpec:
    """Control-volume box and freestream constants."""

    box: tuple = (-1.0, 2.0, -1.0, 1.0)      # x_min, x_max, y_min, y_max
    samples_per_side: int = 64
    rho: float = RHO_DEFAULT
    alpha_deg: float = ALPHA_DEG_DEFAULT
    q_inf: float = Q_INF_DEFAULT
    chord: float = 1.0
    p_inf: float = 0.0

    def __post_init__(self):
        x0, x1, y0, y1 = self.box
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"degenerate control volume box {self.box}")
        if self.samples_per_side < 1:
            raise ValueError("need at least one sample per side")

    @property
    def alpha_rad(self):
        return math.radians(self.alpha_deg)

    def spacings(self):
        x0, x1, y0, y1 = self.box
        n = self.samples_per_side
        return (x1 - x0) / n, (y1 - y0) / n   # dx (top/bottom), dy (left/right)

    def boundary_points(self):
        """Midpoint sample coordinates for each side, as a dict of (n, 2) arrays."""
        x0, x1, y0, y1 = self.box
        n = self.samples_per_side
        dx, dy = self.spacings()
        ys = y0 + (np.arange(n) + 0.5) * dy
        xs = x0 + (np.arange(n) + 0.5) * dx
        return {
            "left": np.stack([np.full(n, x0), ys], axis=1),
            "right": np.stack([np.full(n, x1), ys], axis=1),
            "bottom": np.stack([xs, np.full(n, y0)], axis=1),
            "top": np.stack([xs, np.full(n, y1)], axis=1),
        }


@dataclass
class SurfaceSample:
    """Pressure sample on a body surface element."""

    pressure: float
    normal: np.ndarray
    area: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-10:
            raise ValueError(f"surface normal must be unit length (got |n|="
                             f"{np.linalg.norm(self.normal)!r})")
        if self.area <= 0:
            raise ValueError("area element must be positive")


def cv_forces(sides, spec: CvSpec):
    """Net (F_x, F_y) from per-side (u, v, p_gauge) samples.

    ``sides``: dict side-name -> dict with u, v, p arrays (p already gauge).
    Left/right sides integrate with spacing dy, bottom/top with dx; the right
    and top contributions enter with a minus sign (outward flux convention).
    """
    for name in ("left", "right", "bottom", "top"):
        if name not in sides:
            raise ValueError(f"cv_forces: missing side {name!r}")
        if len(unwrap(sides[name]["p"])) == 0:
            raise ValueError(f"cv_forces: side {name!r} has zero samples")
    dx, dy = spec.spacings()
    rho = spec.rho

    def s(side, expr):
        return ad.tensor_sum(expr(sides[side]))

    def px_mom(f):   # p_g + rho u^2
        return ad.add(f["p"], ad.mul(rho, ad.square(f["u"])))

    def py_mom(f):   # p_g + rho v^2
        return ad.add(f["p"], ad.mul(rho, ad.square(f["v"])))

    def shear(f):    # rho u v
        return ad.mul(rho, ad.mul(f["u"], f["v"]))

    f_x = ad.mul(ad.sub(s("left", px_mom), s("right", px_mom)), dy)
    f_x = ad.add(f_x, ad.mul(ad.sub(s("bottom", shear), s("top", shear)), dx))
    f_y = ad.mul(ad.sub(s("left", shear), s("right", shear)), dy)
    f_y = ad.add(f_y, ad.mul(ad.sub(s("bottom", py_mom), s("top", py_mom)), dx))
    return f_x, f_y


def lift_drag(f_x, f_y, alpha_rad):
    """Rotate box-frame forces into lift/drag at angle of attack alpha."""
    sin_a, cos_a = math.sin(alpha_rad), math.cos(alpha_rad)
    lift = ad.add(ad.mul(f_x, -sin_a), ad.mul(f_y, cos_a))
    drag = ad.add(ad.mul(f_x, cos_a), ad.mul(f_y, sin_a))
    return lift, drag


def aero_coeffs(lift, drag, q_inf=Q_INF_DEFAULT, chord=1.0):
    """Non-dimensionalize with the fixed dynamic pressure and chord."""
    if q_inf <= 0 or chord <= 0:
        raise ValueError("q_inf and chord must be positive")
    scale = 1.0 / (q_inf * chord)
    return ad.mul(lift, scale), ad.mul(drag, scale)


def aero_objective(c_l, c_d, cd_max=CD_MAX_DEFAULT, lambda_cd=LAMBDA_CD_DEFAULT,
                   squared=True):
    """Lift maximization with a soft drag cap: -C_L + lambda * penalty.

    The penalty is the squared hinge max(0, C_D - cd_max)^2 by default, or the
    plain hinge when ``squared`` is False.
    """
    r = ad.relu(ad.sub(c_d, cd_max))
    penalty = ad.square(r) if squared else r
    return ad.add(ad.neg(c_l), ad.mul(penalty, lambda_cd))


def drag_proxy(samples):
    """Pressure part of drag from surface samples: -sum(p * n_x * dA)."""
    total = 0.0
    for s in samples:
        if not isinstance(s, SurfaceSample):
            raise TypeError("drag_proxy expects SurfaceSample entries")
        total = ad.add(total, ad.mul(s.pressure, s.normal[0] * s.area))
    return ad.neg(total)


def drag_proxy_arrays(pressures, normals, areas):
    """Vectorized drag proxy; pressures may be a recorded tensor."""
    normals = np.asarray(normals, dtype=np.float64)
    areas = np.asarray(areas, dtype=np.float64)
    norms = np.linalg.norm(normals, axis=1)
    if np.abs(norms - 1.0).max() > 1e-10:
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise ValueError(f"drag_proxy: non-unit normal at index {bad}")
    if (areas <= 0).any():
        raise ValueError("drag_proxy: area elements must be positive")
    return ad.neg(ad.tensor_sum(ad.mul(pressures, normals[:, 0] * areas)))


def drag_objective(drag, z, z_init, lambda_reg=LAMBDA_REG_DEFAULT):
    """Drag plus the latent anchor lambda_reg * |z - z_init|^2."""
    dz = ad.sub(z, z_init)
    return ad.add(drag, ad.mul(ad.tensor_sum(ad.square(dz)), lambda_reg))
