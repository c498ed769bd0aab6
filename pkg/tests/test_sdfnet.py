import numpy as np
import pytest

from latentshape import autodiff as ad
from latentshape import geometry as geo
from latentshape import sdfnet
from latentshape.rng import substream
from helpers import fd_grad, rel_err


@pytest.fixture(scope="module")
def tiny_fit():
    """Small but real training run shared by the slower checks here."""
    shapes = [geo.random_shape(seed=s, r0_range=(0.22, 0.3), amp_range=(0.0, 0.015))
              for s in range(4)]
    cfg = sdfnet.SdfTrainConfig(sigma=0.0, lam=1e-4, epochs=150, batch=512,
                                samples_per_shape=800, d=8, hidden=(64, 64), seed=3)
    decoder, table, history = sdfnet.train_sdf_autodecoder(shapes, cfg)
    return shapes, decoder, table, history


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_samples_match_oracle_requery():
    shape = geo.random_shape(seed=5)
    x, s = sdfnet.sample_training_pairs(shape, 200, seed=1)
    s2 = geo.sdf_oracle(shape, x)
    assert np.array_equal(s, s2)


def test_pure_near_surface_band():
    shape = geo.random_shape(seed=6)
    band = 0.05
    x, s = sdfnet.sample_training_pairs(shape, 10_000, seed=2, near_fraction=1.0, band=band)
    frac = (np.abs(s) <= 4 * band).mean()
    assert frac > 0.999


def test_sampling_seeded_reproducible():
    shape = geo.random_shape(seed=7)
    a = sdfnet.sample_training_pairs(shape, 64, seed=3)
    b = sdfnet.sample_training_pairs(shape, 64, seed=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sampling_needs_positive_count():
    with pytest.raises(ValueError):
        sdfnet.sample_training_pairs(geo.FourierShape(0.3, []), 0)


# ---------------------------------------------------------------------------
# decoding and gradients
# ---------------------------------------------------------------------------

def test_decode_gradients_match_fd():
    decoder = sdfnet.SdfDecoder.init(d=6, hidden=(32, 32), seed=11)
    rng = np.random.default_rng(12)
    for _ in range(5):
        x = rng.uniform(-0.5, 0.5, size=(1, 2))
        z = rng.normal(0, 0.3, size=6)

        _, gz = sdfnet.latent_gradients(decoder, x, z)
        fdz = fd_grad(lambda v: sdfnet.decode_sdf(decoder, x, v)[0], z.copy())
        assert rel_err(gz[0], fdz) < 1e-5

        _, gx = sdfnet.spatial_gradients(decoder, x, z)
        fdx = fd_grad(lambda v: sdfnet.decode_sdf(decoder, v.reshape(1, 2), z)[0],
                      x.ravel().copy())
        assert rel_err(gx[0], fdx) < 1e-5


def test_batch_equals_per_point_bitwise():
    decoder = sdfnet.SdfDecoder.init(d=4, hidden=(16, 16), seed=13)
    rng = np.random.default_rng(14)
    pts = rng.uniform(-0.8, 0.8, size=(33, 2))
    z = rng.normal(0, 0.2, size=4)
    batch = sdfnet.decode_sdf(decoder, pts, z)
    singles = np.array([sdfnet.decode_sdf(decoder, p.reshape(1, 2), z)[0] for p in pts])
    assert batch.tobytes() == singles.tobytes()


def test_per_point_latent_gradients_are_rowwise():
    decoder = sdfnet.SdfDecoder.init(d=5, hidden=(16,), seed=15)
    rng = np.random.default_rng(16)
    pts = rng.uniform(-0.5, 0.5, size=(4, 2))
    z = rng.normal(0, 0.2, size=5)
    _, gz = sdfnet.latent_gradients(decoder, pts, z)
    for i, p in enumerate(pts):
        _, gi = sdfnet.latent_gradients(decoder, p.reshape(1, 2), z)
        np.testing.assert_allclose(gz[i], gi[0], atol=1e-12)


def test_latent_jacobian_zero_when_latent_columns_zeroed():
    decoder = sdfnet.SdfDecoder.init(d=6, hidden=(24, 24), seed=17)
    decoder.params["W0"][2:, :] = 0.0  # rows 2.. multiply the latent features
    rng = np.random.default_rng(18)
    pts = rng.uniform(-0.5, 0.5, size=(10, 2))
    norms = sdfnet.latent_jacobian_norms(decoder, rng.normal(0, 0.2, 6), pts)
    assert np.all(norms == 0.0)


def test_latent_jacobian_matches_directional_fd():
    decoder = sdfnet.SdfDecoder.init(d=6, hidden=(32, 32), seed=19)
    rng = np.random.default_rng(20)
    z = rng.normal(0, 0.2, size=6)
    pts = rng.uniform(-0.4, 0.4, size=(5, 2))
    norms = sdfnet.latent_jacobian_norms(decoder, z, pts)
    h = 1e-5
    for i, p in enumerate(pts):
        sq = 0.0
        dirs = rng.standard_normal((8, 6))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        for u in dirs:
            plus = sdfnet.decode_sdf(decoder, p.reshape(1, 2), z + h * u)[0]
            minus = sdfnet.decode_sdf(decoder, p.reshape(1, 2), z - h * u)[0]
            sq += ((plus - minus) / (2 * h)) ** 2
        # E[(g.u)^2] = |g|^2 / d for random unit u
        est = np.sqrt(sq / len(dirs) * decoder.d)
        assert abs(est - norms[i]) / norms[i] < 0.2


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------

def test_sigma_zero_matches_forced_zero_noise():
    decoder = sdfnet.SdfDecoder.init(d=4, hidden=(16,), seed=21)
    table = sdfnet.LatentTable.init(3, 4, seed=21)
    rng = np.random.default_rng(22)
    x = rng.uniform(-0.5, 0.5, size=(32, 2))
    s = rng.normal(0, 0.1, size=32)
    idx = rng.integers(0, 3, size=32)

    def loss_with(noise):
        tape = ad.Tape()
        store = decoder.params
        store["latents"] = table.codes
        bound = store.bind(tape)
        val = sdfnet._batch_loss(decoder, bound, bound["latents"], idx, x, s,
                                 noise, lam=1e-4)
        store.pop("latents")
        return float(val.values)

    assert loss_with(None) == loss_with(np.zeros((32, 4)))


def test_training_divergence_aborts_with_epoch():
    shapes = [geo.random_shape(seed=s) for s in range(2)]
    cfg = sdfnet.SdfTrainConfig(epochs=3, batch=64, samples_per_shape=128,
                                lr=1e160, d=4, hidden=(16,), seed=23)
    with pytest.raises(ad.DivergenceError, match="epoch"):
        sdfnet.train_sdf_autodecoder(shapes, cfg)


def test_training_needs_two_shapes():
    with pytest.raises(ValueError, match="2 shapes"):
        sdfnet.train_sdf_autodecoder([geo.FourierShape(0.3, [])],
                                     sdfnet.SdfTrainConfig(epochs=1))


def test_single_shape_overfit():
    # same shape twice satisfies the >=2 precondition; checks the overfit path
    shape = geo.FourierShape(0.3, [])
    cfg = sdfnet.SdfTrainConfig(sigma=0.0, lam=0.0, epochs=20_000, batch=128,
                                samples_per_shape=128, near_fraction=1.0,
                                band=0.02, d=8, hidden=(64, 64), lr=1e-2, seed=32)
    decoder, table, _ = sdfnet.train_sdf_autodecoder([shape, shape], cfg)
    x, s = sdfnet.sample_training_pairs(shape, 600, near_fraction=cfg.near_fraction,
                                        band=cfg.band,
                                        rng=substream(cfg.seed, "sdf-samples", 0))
    pred = sdfnet.decode_sdf(decoder, x, table.codes[0])
    assert np.abs(pred - s).mean() < 1e-3


# ---------------------------------------------------------------------------
# latent fitting
# ---------------------------------------------------------------------------

def test_fit_latent_zero_steps_returns_zero():
    decoder = sdfnet.SdfDecoder.init(d=8, hidden=(16,), seed=24)
    z = sdfnet.fit_latent(decoder, (np.zeros((4, 2)), np.zeros(4)), steps=0)
    assert np.array_equal(z, np.zeros(8))


def test_fit_latent_shrinks_with_lambda(tiny_fit):
    shapes, decoder, table, _ = tiny_fit
    x, s = sdfnet.sample_training_pairs(shapes[1], 400, seed=77)
    norms = []
    for lam in [0.01, 0.1, 1.0]:
        z = sdfnet.fit_latent(decoder, (x, s), steps=150, lam=lam, lr=1e-2)
        norms.append(np.linalg.norm(z))
    assert norms[0] > norms[1] > norms[2]


def test_fit_latent_recovers_training_shape(tiny_fit):
    shapes, decoder, table, _ = tiny_fit
    shape = shapes[2]
    x, s = sdfnet.sample_training_pairs(shape, 800, seed=78)
    z_fit = sdfnet.fit_latent(decoder, (x, s), steps=400, lam=1e-4, lr=1e-2)
    truth = shape.boundary(512).points
    tau = 2 * 2.0 / 95

    def f1_of(z):
        contour = sdfnet.decoded_contour(decoder, z, n=96)
        assert contour is not None
        return geo.point_metrics(contour.resample(256).points, truth, tau)["f1"]

    assert f1_of(z_fit) >= f1_of(table.codes[2]) - 0.05


def test_training_loss_decreases(tiny_fit):
    _, _, _, history = tiny_fit
    assert history[-1] < history[0] * 0.5


# ---------------------------------------------------------------------------
# denoising-bound diagnostic
# ---------------------------------------------------------------------------

def test_denoising_bound_linear_decoder_gaussian_identity():
    # decoder with no hidden layer is exactly linear: s = [x, z] @ W + b
    decoder = sdfnet.SdfDecoder.init(d=6, hidden=(), seed=25)
    rng = np.random.default_rng(26)
    x = np.array([[0.2, -0.1]])
    z = rng.normal(0, 0.3, size=6)
    s_true = sdfnet.decode_sdf(decoder, x, z)[0]  # forces r = 0
    g = decoder.params["W0"][2:, 0]
    sigma = 0.05
    res = sdfnet.check_denoising_bound(decoder, z, x, s_true, sigma, n_mc=100_000, seed=1)
    exact = sigma * np.sqrt(2 / np.pi) * np.linalg.norm(g)
    assert abs(res["lhs"] - exact) <= 3 * res["mc_se"]


def test_denoising_bound_sigma_zero_is_residual():
    decoder = sdfnet.SdfDecoder.init(d=4, hidden=(16,), seed=27)
    x = np.array([[0.1, 0.1]])
    z = np.zeros(4)
    s0 = sdfnet.decode_sdf(decoder, x, z)[0]
    res = sdfnet.check_denoising_bound(decoder, z, x, s0 + 0.05, sigma=0.0)
    assert res["lhs"] == pytest.approx(0.05)
    assert res["lhs"] == res["rhs"]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path, tiny_fit):
    _, decoder, table, _ = tiny_fit
    path = tmp_path / "decoder.ckpt"
    sdfnet.save_decoder(path, decoder, table, extra_meta={"note": "test"})
    dec2, table2, meta = sdfnet.load_decoder(path)
    assert meta["d"] == decoder.d
    assert meta["layer_sizes"] == decoder.layer_sizes()
    assert meta["n_shapes"] == table.n
    for name in decoder.params.names():
        assert dec2.params[name].tobytes() == decoder.params[name].tobytes()
    assert table2.codes.tobytes() == table.codes.tobytes()


def test_latent_table_rejects_non_finite():
    with pytest.raises(ValueError, match="finite"):
        sdfnet.LatentTable(np.array([[np.inf, 0.0]]))
