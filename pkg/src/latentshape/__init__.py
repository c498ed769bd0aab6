"""Differentiable latent-space shape optimization and inversion on 2D SDF
auto-decoders, with a slice-attention field surrogate and a finite-difference
Helmholtz scattering oracle."""

__version__ = "0.1.0"

from . import autodiff, forces, geometry, helmholtz, optloop, sdfnet, surrogate
from .autodiff import AdamState, DivergenceError, Tape, Tensor, adam_step, backward
from .geometry import (FourierShape, GridField, Polyline, hausdorff,
                       marching_squares, point_metrics, random_shape, rel_errors,
                       sdf_oracle)
from .helmholtz import (ComplexField, ScatterConfig, SensorArray, gen_dataset,
                        observe, rasterize_q, solve_forward)
from .optloop import (ConstraintSet, OptRunConfig, RunRecord, constraint_jacobian,
                      invert_shape, nullspace_projector, optimize_airfoil_style,
                      optimize_shape, project_gradient, reproject_points)
from .sdfnet import (LatentTable, SdfDecoder, SdfTrainConfig, decode_sdf,
                     fit_latent, latent_jacobian_norms, sample_training_pairs,
                     train_sdf_autodecoder)
from .surrogate import Surrogate, SurrogateConfig, SurrogateTrainConfig, train_surrogate
