import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentshape import autodiff as ad
from latentshape import forces as fr
from latentshape import geometry as geo
from latentshape import optloop as ol
from latentshape import sdfnet
from latentshape.rng import substream
from helpers import rel_err


class AnalyticCircle:
    """Exact circle SDF standing in for a decoder in reprojection tests."""

    def __init__(self, r):
        self.r = r

    def sdf_and_grad(self, pts, z):
        norm = np.linalg.norm(pts, axis=1)
        s = norm - self.r
        grad = pts / np.maximum(norm, 1e-15)[:, None]
        return s, grad


@pytest.fixture(scope="module")
def trained():
    shapes = [geo.random_shape(seed=s, r0_range=(0.22, 0.3), amp_range=(0.0, 0.015))
              for s in range(6)]
    cfg = sdfnet.SdfTrainConfig(sigma=0.01, lam=1e-4, epochs=200, batch=1024,
                                samples_per_shape=900, d=8, hidden=(64, 64),
                                lr=3e-3, seed=5)
    decoder, table, _ = sdfnet.train_sdf_autodecoder(shapes, cfg)
    return shapes, decoder, table


# ---------------------------------------------------------------------------
# constraint Jacobian
# ---------------------------------------------------------------------------

def test_constraint_jacobian_empty():
    decoder = sdfnet.SdfDecoder.init(d=5, hidden=(16,), seed=1)
    G = ol.constraint_jacobian(decoder, ol.ConstraintSet(np.zeros((0, 2))), np.zeros(5))
    assert G.shape == (0, 5)


def test_constraint_jacobian_matches_fd():
    decoder = sdfnet.SdfDecoder.init(d=6, hidden=(24, 24), seed=2)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.4, 0.4, size=(4, 2))
    z = rng.normal(0, 0.2, size=6)
    G = ol.constraint_jacobian(decoder, ol.ConstraintSet(pts), z)
    h = 1e-5
    for m in range(4):
        fd = np.zeros(6)
        for i in range(6):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd[i] = (sdfnet.decode_sdf(decoder, pts[m:m + 1], zp)[0]
                     - sdfnet.decode_sdf(decoder, pts[m:m + 1], zm)[0]) / (2 * h)
        assert rel_err(G[m], fd) < 1e-5


def test_constraint_jacobian_duplicated_rows():
    decoder = sdfnet.SdfDecoder.init(d=4, hidden=(16,), seed=4)
    p = np.array([[0.1, 0.2]])
    pts = np.vstack([p, p])
    G = ol.constraint_jacobian(decoder, ol.ConstraintSet(pts), np.zeros(4))
    assert np.array_equal(G[0], G[1])


# ---------------------------------------------------------------------------
# null-space projector
# ---------------------------------------------------------------------------

def test_projector_zero_jacobian_is_identity():
    P = ol.nullspace_projector(np.zeros((3, 7)))
    assert np.array_equal(P, np.eye(7))


def test_projector_rank_one_closed_form():
    rng = np.random.default_rng(5)
    g = rng.standard_normal(8)
    P = ol.nullspace_projector(g.reshape(1, 8))
    expected = np.eye(8) - np.outer(g, g) / (g @ g)
    assert np.abs(P - expected).max() < 1e-12


def test_projector_identities_random_3x8():
    rng = np.random.default_rng(6)
    G = rng.standard_normal((3, 8))
    P = ol.nullspace_projector(G)
    assert np.linalg.norm(P @ P - P) < 1e-10
    assert np.linalg.norm(P.T - P) < 1e-10
    assert np.linalg.norm(G @ P) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 32), st.integers(2, 64))
def test_projector_identities_property(seed, m, d):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((m, d))
    if seed % 3 == 0 and m > 1:
        G[m // 2] = G[0]  # force rank deficiency
    P = ol.nullspace_projector(G)
    scale = max(1.0, np.linalg.norm(G))
    assert np.linalg.norm(P @ P - P) < 1e-10
    assert np.linalg.norm(P.T - P) < 1e-10
    assert np.linalg.norm(G @ P) / scale < 1e-10


def test_project_gradient_nullspace_vector_unchanged():
    rng = np.random.default_rng(7)
    G = rng.standard_normal((2, 6))
    P = ol.nullspace_projector(G)
    v = rng.standard_normal(6)
    v_null = P @ v
    assert np.abs(ol.project_gradient(P, v_null) - v_null).max() < 1e-12


def test_project_gradient_parallel_row_vanishes():
    rng = np.random.default_rng(8)
    G = rng.standard_normal((3, 6))
    P = ol.nullspace_projector(G)
    g = 2.5 * G[1]
    assert np.linalg.norm(ol.project_gradient(P, g)) < 1e-10


def test_project_gradient_non_expansive():
    rng = np.random.default_rng(9)
    for _ in range(25):
        G = rng.standard_normal((4, 10))
        P = ol.nullspace_projector(G)
        g = rng.standard_normal(10)
        assert np.linalg.norm(P @ g) <= np.linalg.norm(g) + 1e-12


def test_project_gradient_residual_small():
    rng = np.random.default_rng(10)
    G = rng.standard_normal((5, 12))
    g = rng.standard_normal(12)
    g_safe = ol.project_gradient(ol.nullspace_projector(G), g)
    assert np.linalg.norm(G @ g_safe) <= 1e-8 * np.linalg.norm(G) * np.linalg.norm(g)


# ---------------------------------------------------------------------------
# reprojection
# ---------------------------------------------------------------------------

def test_reproject_fixed_point_on_surface():
    circle = AnalyticCircle(0.3)
    pts = np.array([[0.3, 0.0], [0.0, -0.3]])
    out = ol.reproject_points(circle, pts, None, iters=3, eps_proj=1e-15)
    assert np.abs(out - pts).max() < 1e-12


def test_reproject_unit_gradient_lands_in_one_step():
    circle = AnalyticCircle(0.25)
    start = np.array([[0.35, 0.0]])
    out = ol.reproject_points(circle, start, None, iters=1, eps_proj=0.0 + 1e-300)
    assert abs(np.linalg.norm(out[0]) - 0.25) < 1e-12


def test_reproject_with_reference_offset():
    circle = AnalyticCircle(0.25)
    start = np.array([[0.40, 0.0], [0.0, 0.30]])
    d_ref = np.array([0.05, 0.05])
    out = ol.reproject_points(circle, start, None, iters=3, eps_proj=1e-300, d_ref=d_ref)
    assert np.abs(np.linalg.norm(out, axis=1) - 0.30).max() < 1e-12


def test_reproject_on_trained_decoder(trained):
    shapes, decoder, table = trained
    z = table.codes[0]
    base = ol.initial_surface_samples(decoder, z, n=200, grid_n=96)
    rng = np.random.default_rng(11)
    noisy = base + rng.normal(0, 0.02, size=base.shape)
    out, hist = ol.reproject_points(decoder, noisy, z, iters=5, eps_proj=1e-9,
                                    return_history=True)
    final = np.abs(sdfnet.decode_sdf(decoder, out, z))
    assert (final < 1e-4).mean() >= 0.99
    assert np.median(hist[-1]) < np.median(hist[0]) * 1e-3


def test_initial_surface_samples_on_zero_set(trained):
    shapes, decoder, table = trained
    pts = ol.initial_surface_samples(decoder, table.codes[1], n=128, grid_n=96)
    s = sdfnet.decode_sdf(decoder, pts, table.codes[1])
    assert np.abs(s).max() < 1e-6


# ---------------------------------------------------------------------------
# optimization loops against stub predictors
# ---------------------------------------------------------------------------

class ConstantFieldSurrogate:
    """Predicts a constant field regardless of query or latent."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def predict(self, queries, z):
        q = np.asarray(queries)
        return np.tile(self.values, (q.shape[0], 1))

    def predict_recorded(self, queries, z_tensor, query_tensor=None):
        q = query_tensor if query_tensor is not None else queries
        qv = q.values if isinstance(q, ad.Tensor) else np.asarray(q)
        base = np.tile(self.values, (qv.shape[0], 1))
        # keep a z-dependence of exactly zero so gradients exist but vanish
        zeros = ad.mul(ad.tensor_sum(ad.square(z_tensor)), 0.0)
        return ad.add(base, ad.reshape(zeros, (1, 1)))


class QuadraticLatentSurrogate:
    """(u, v, p) fields whose pressure is convex-quadratic in the latent."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def predict(self, queries, z):
        q = np.asarray(queries)
        p = ((np.asarray(z) - self.target) ** 2).sum()
        out = np.zeros((q.shape[0], 3))
        out[:, 2] = p * q[:, 1]
        return out

    def predict_recorded(self, queries, z_tensor, query_tensor=None):
        q = query_tensor if query_tensor is not None else queries
        qv = q.values if isinstance(q, ad.Tensor) else np.asarray(q)
        p = ad.tensor_sum(ad.square(ad.sub(z_tensor, self.target)))
        cols = np.zeros((qv.shape[0], 3))
        cols[:, 2] = qv[:, 1]
        return ad.mul(cols, ad.reshape(p, (1, 1)))


def test_full_rank_constraints_freeze_shape(trained):
    shapes, decoder, table = trained
    z0 = table.codes[2].copy()
    contour_pts = ol.initial_surface_samples(decoder, z0, n=64, grid_n=96)
    constraints = ol.ConstraintSet(contour_pts)
    G = ol.constraint_jacobian(decoder, constraints, z0)
    assert np.linalg.matrix_rank(G, tol=1e-8) == decoder.d

    surrogate = QuadraticLatentSurrogate(target=np.ones(decoder.d))

    def objective(pred, pts):
        return ad.mean(ad.square(pred))

    cfg = ol.OptRunConfig(steps=20, lr=1e-2, n_samples=64, contour_grid=96,
                          track_contours=True)
    z_star, _, record = ol.optimize_shape(surrogate, decoder, objective, cfg,
                                          z_init=z0, constraints=constraints)
    drifts = [row.get("hausdorff_step", 0.0) for row in record.steps]
    assert np.linalg.norm(z_star - z0) < 1e-6
    assert max(drifts) < 1e-6
    assert max(row["g_constraint_residual"] for row in record.steps) < 1e-10


def test_constant_surrogate_keeps_latent_still(trained):
    shapes, decoder, table = trained
    z0 = table.codes[0].copy()
    surrogate = ConstantFieldSurrogate(np.zeros(3))

    def objective(pred, pts):
        return ad.mean(ad.square(pred))

    cfg = ol.OptRunConfig(steps=5, lr=1e-2, n_samples=32, contour_grid=96,
                          track_contours=False)
    z_star, _, record = ol.optimize_shape(surrogate, decoder, objective, cfg, z_init=z0)
    for row in record.steps:
        assert row["dz"] < 1e-8


def test_airfoil_loop_on_convex_surrogate(trained):
    shapes, decoder, table = trained
    z0 = table.codes[3].copy()
    target = z0 + 0.5
    surrogate = QuadraticLatentSurrogate(target=target)
    spec = fr.CvSpec(samples_per_side=16)
    cfg = ol.OptRunConfig(steps=10, lr=5e-3, n_samples=48, contour_grid=96,
                          track_contours=False)
    z_star, record = ol.optimize_airfoil_style(surrogate, decoder, spec, cfg, z_init=z0)
    objs = [row["objective"] for row in record.steps]
    assert all(objs[i + 1] <= objs[i] + 1e-12 for i in range(len(objs) - 1))
    assert record.final["objective"] == min(objs)


def test_airfoil_loop_constant_field_no_motion(trained):
    shapes, decoder, table = trained
    z0 = table.codes[1].copy()
    surrogate = ConstantFieldSurrogate(np.array([0.1, 0.0, 0.5]))
    spec = fr.CvSpec(samples_per_side=8)
    cfg = ol.OptRunConfig(steps=5, lr=1e-2, n_samples=32, contour_grid=96,
                          track_contours=False)
    z_star, record = ol.optimize_airfoil_style(surrogate, decoder, spec, cfg, z_init=z0)
    for row in record.steps:
        assert row["dz"] < 1e-8


# ---------------------------------------------------------------------------
# detached-gradient diagnostic (trivial cases)
# ---------------------------------------------------------------------------

def test_grad_mismatch_objective_independent_of_positions(trained):
    shapes, decoder, table = trained
    z = table.codes[0]
    X = ol.initial_surface_samples(decoder, z, n=16, grid_n=96)

    class LatentOnlySurrogate:
        def predict(self, queries, zv):
            return np.tile(np.asarray(zv)[:2], (np.asarray(queries).shape[0], 1))

        def predict_recorded(self, queries, z_tensor, query_tensor=None):
            q = query_tensor if query_tensor is not None else queries
            qv = q.values if isinstance(q, ad.Tensor) else np.asarray(q)
            zrow = ad.reshape(ad.gather(ad.reshape(z_tensor, (-1, 1)),
                                        np.array([0, 1]), axis=0), (1, 2))
            return ad.matmul(np.ones((qv.shape[0], 1)), zrow)

    def objective(pred, pts):
        return ad.mean(ad.square(pred))

    res = ol.check_grad_mismatch(LatentOnlySurrogate(), decoder, z, X, objective)
    assert res["mismatch"] < 1e-6


def test_grad_mismatch_zero_latent_sensitivity():
    decoder = sdfnet.SdfDecoder.init(d=4, hidden=(24, 24), seed=20)
    decoder.params["W0"][2:, :] = 0.0  # SDF ignores the latent entirely
    rng = np.random.default_rng(21)
    # points on the decoded zero set are irrelevant here; any band points work
    X = rng.uniform(-0.3, 0.3, size=(8, 2))
    z = np.zeros(4)

    class MixedSurrogate:
        def predict(self, queries, zv):
            q = np.asarray(queries)
            return q[:, :1] * np.asarray(zv)[0]

        def predict_recorded(self, queries, z_tensor, query_tensor=None):
            q = query_tensor if query_tensor is not None else queries
            z0 = ad.reshape(ad.gather(ad.reshape(z_tensor, (-1, 1)),
                                      np.array([0]), axis=0), (1, 1))
            col = q.values[:, :1] if isinstance(q, ad.Tensor) else np.asarray(q)[:, :1]
            return ad.matmul(col, z0)

    def objective(pred, pts):
        return ad.mean(ad.square(pred))

    res = ol.check_grad_mismatch(MixedSurrogate(), decoder, z, X, objective)
    assert res["l_hat"] == 0.0
    assert res["bound"] == 0.0
    assert res["mismatch"] < 1e-6


# ---------------------------------------------------------------------------
# run record
# ---------------------------------------------------------------------------

def test_runrecord_csv_json(tmp_path):
    rec = ol.RunRecord(config={"lr": 0.01})
    rec.append(step=0, objective=1.0, dz=0.1)
    rec.append(step=1, objective=0.5, dz=0.2)
    rec.final = {"objective": 0.5}
    rec.to_csv(tmp_path / "run.csv")
    rec.to_json(tmp_path / "run.json")
    rows = (tmp_path / "run.csv").read_text().strip().splitlines()
    assert rows[0] == "step,objective,dz"
    assert len(rows) == 3
    import json
    summary = json.loads((tmp_path / "run.json").read_text())
    assert summary["n_steps"] == 2


def test_constraints_reject_non_finite():
    with pytest.raises(ValueError, match="finite"):
        ol.ConstraintSet(np.array([[np.nan, 0.0]]))
