"""SDF auto-decoder with a per-shape latent table.

One shared MLP ``s(x, z)`` maps a 2D point and a latent code to a signed
distance. Each training shape owns a learnable row of the latent table;
decoder weights and codes are optimized jointly. During training a fresh
Gaussian perturbation is added to the code at every use, which smooths the
latent-to-geometry map (the effect the latent-sensitivity diagnostics below
quantify).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import DivergenceError
from .checkpoint import load_arrays, save_arrays
from .params import AdamOptimizer, ParamStore, cosine_lr, init_linear
from .rng import substream


@dataclass
class SdfDecoder:
    """MLP decoder: input (x, y, z_1..z_d) -> scalar signed distance.

    SiLU on hidden layers, identity output. Parameters live in ``params`` as
    ``W0..Wk`` / ``b0..bk``.
    """

    d: int
    hidden: tuple = (128, 128, 128)
    params: ParamStore = field(default=None)

    def __post_init__(self):
        if self.params is None:
            self.params = ParamStore()

    @property
    def n_layers(self):
        return len(self.hidden) + 1

    def layer_sizes(self):
        return [2 + self.d, *self.hidden, 1]

    @classmethod
    def init(cls, d, hidden=(128, 128, 128), seed=0):
        dec = cls(d=d, hidden=tuple(hidden))
        rng = substream(seed, "decoder-init")
        sizes = dec.layer_sizes()
        for i in range(len(sizes) - 1):
            dec.params[f"W{i}"] = init_linear(rng, sizes[i], sizes[i + 1])
            dec.params[f"b{i}"] = np.zeros(sizes[i + 1])
        return dec

    def _forward(self, inp, weights):
        h = inp
        for i in range(self.n_layers):
            h = ad.add(ad.matmul(h, weights[f"W{i}"]), weights[f"b{i}"])
            if i < self.n_layers - 1:
                h = ad.silu(h)
        return h

    def forward_values(self, inp):
        """Numpy-only forward whose per-row results are bitwise independent of
        the batch size (BLAS picks size-dependent kernels for single rows and
        single columns, so both are padded away)."""
        inp = np.asarray(inp, dtype=np.float64)
        m = inp.shape[0]
        h = np.vstack([inp, np.zeros((2 - m, inp.shape[1]))]) if m < 2 else inp
        weights = self.params
        for i in range(self.n_layers):
            w, b = weights[f"W{i}"], weights[f"b{i}"]
            if w.shape[1] < 8:
                wide = np.zeros((w.shape[0], 8))
                wide[:, :w.shape[1]] = w
                h = (h @ wide)[:, :w.shape[1]] + b
            else:
                h = h @ w + b
            if i < self.n_layers - 1:
                h = h * (1.0 / (1.0 + np.exp(-h)))
        return h[:m]


@dataclass
class LatentTable:
    """N x d array of codes; row i belongs to shape i for the table's lifetime."""

    codes: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if not np.isfinite(self.codes).all():
            raise ValueError("LatentTable: non-finite entries")

    @property
    def n(self):
        return self.codes.shape[0]

    @property
    def d(self):
        return self.codes.shape[1]

    @classmethod
    def init(cls, n, d, seed=0, scale=0.01):
        rng = substream(seed, "latent-init")
        return cls(rng.normal(0.0, scale, size=(n, d)))


@dataclass
class SdfTrainConfig:
    sigma: float = 0.01          # latent noise std
    lam: float = 1e-4            # latent l2 weight
    lr: float = 1e-3
    epochs: int = 150
    batch: int = 1024
    samples_per_shape: int = 1500
    near_fraction: float = 0.7
    band: float = 0.05           # near-surface band width
    cosine_decay: bool = True
    d: int = 16
    hidden: tuple = (128, 128, 128)
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0 or self.lam < 0:
            raise ValueError("sigma and lam must be non-negative")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_training_pairs(shape: geo.FourierShape, n, seed=0, near_fraction=0.7,
                          band=0.05, rng=None):
    """(x, s) supervision pairs: a near-surface/uniform mixture with oracle targets.

    Near-surface points start on the boundary and move along the outward
    normal by a N(0, band^2) offset; the rest are uniform over [-1, 1]^2.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    if rng is None:
        rng = substream(seed, "sdf-samples")
    n_near = int(round(n * near_fraction))
    pts = np.empty((n, 2))
    if n_near > 0:
        theta = rng.uniform(0.0, 2.0 * np.pi, n_near)
        r = shape.radius(theta)
        dr = shape.radius_deriv(theta)
        base = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        tangent = np.stack([dr * np.cos(theta) - r * np.sin(theta),
                            dr * np.sin(theta) + r * np.cos(theta)], axis=1)
        normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        outward = np.sign((normal * base).sum(axis=1))
        normal *= outward[:, None]
        pts[:n_near] = base + normal * rng.normal(0.0, band, n_near)[:, None]
    if n - n_near > 0:
        pts[n_near:] = rng.uniform(-1.0, 1.0, size=(n - n_near, 2))
    s = geo.sdf_oracle(shape, pts)
    return pts, s


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batch_loss(decoder, weights, table_tensor, shape_idx, x, s_true, noise, lam):
    z = ad.gather(table_tensor, shape_idx, axis=0)
    z_used = ad.add(z, noise) if noise is not None else z
    inp = ad.concat([x, z_used], axis=1)
    pred = decoder._forward(inp, weights)
    data = ad.mean(ad.absolute(ad.sub(ad.reshape(pred, (-1,)), s_true)))
    reg = ad.mean(ad.tensor_sum(ad.square(z), axis=1))
    return ad.add(data, ad.mul(reg, lam))


def train_sdf_autodecoder(shapes, config: SdfTrainConfig, callback=None,
                          warm=None, start_epoch=0):
    """Joint Adam on decoder weights and all latent codes.

    Minimizes mean |s(x, z_i + eps) - s_oracle| + lam * |z_i|^2, with eps drawn
    fresh for every occurrence of a latent in a batch. Returns (decoder, table,
    history) where history is per-epoch mean loss. ``warm`` resumes from an
    existing (decoder, table) pair; ``start_epoch`` keeps the global step
    counter monotone across resumes.
    """
    shapes = list(shapes)
    if len(shapes) < 2:
        raise ValueError("need at least 2 shapes")
    cfg = config
    if warm is not None:
        decoder, table = warm
        if table.n != len(shapes):
            raise ValueError(f"resume table has {table.n} rows for {len(shapes)} shapes")
    else:
        decoder = SdfDecoder.init(d=cfg.d, hidden=cfg.hidden, seed=cfg.seed)
        table = LatentTable.init(len(shapes), decoder.d, seed=cfg.seed)

    xs, ss, owner = [], [], []
    for i, shp in enumerate(shapes):
        pts, s = sample_training_pairs(
            shp, cfg.samples_per_shape, near_fraction=cfg.near_fraction,
            band=cfg.band, rng=substream(cfg.seed, "sdf-samples", i))
        xs.append(pts)
        ss.append(s)
        owner.append(np.full(len(pts), i))
    X = np.concatenate(xs)
    S = np.concatenate(ss)
    owner = np.concatenate(owner)

    store = decoder.params
    store["latents"] = table.codes
    opt = AdamOptimizer(store, lr=cfg.lr)
    rng = substream(cfg.seed, "sdf-train", start_epoch)
    steps_per_epoch = max(1, len(X) // cfg.batch)
    total_steps = (start_epoch + cfg.epochs) * steps_per_epoch
    history = []
    step = start_epoch * steps_per_epoch
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        losses = []
        for b in range(steps_per_epoch):
            sel = order[b * cfg.batch:(b + 1) * cfg.batch]
            tape = ad.Tape()
            bound = store.bind(tape)
            noise = rng.normal(0.0, cfg.sigma, size=(len(sel), decoder.d)) \
                if cfg.sigma > 0 else None
            loss = _batch_loss(decoder, bound, bound["latents"], owner[sel],
                               X[sel], S[sel], noise, cfg.lam)
            lv = float(loss.values)
            if not np.isfinite(lv):
                raise DivergenceError(f"sdf training diverged at epoch {epoch}")
            grads = store.grads(ad.backward(tape, loss), bound)
            lr = cosine_lr(step, total_steps, cfg.lr) if cfg.cosine_decay else cfg.lr
            opt.step(grads, lr=lr)
            losses.append(lv)
            step += 1
        history.append(float(np.mean(losses)))
        if callback is not None:
            callback(epoch, history[-1])

    table.codes = store.pop("latents")
    return decoder, table, history


def eval_loss(decoder, z, x, s_true, lam=0.0, noise=None):
    """Objective value at fixed parameters (optionally with explicit noise)."""
    x = np.asarray(x, dtype=np.float64)
    zrep = np.tile(np.asarray(z, dtype=np.float64), (len(x), 1))
    if noise is not None:
        zrep = zrep + noise
    weights = decoder.params.arrays()
    weights.pop("latents", None)
    inp = np.concatenate([x, zrep], axis=1)
    out = decoder._forward(inp, weights).reshape(-1)
    data = float(np.abs(out - np.asarray(s_true)).mean())
    return data + lam * float(np.dot(z, z))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def decode_sdf(decoder: SdfDecoder, x, z, tape=None, z_tensor=None, x_tensor=None,
               weights=None):
    """Signed distances at points ``x`` (N x 2) for latent ``z``.

    Plain numpy in, plain numpy out. Pass a ``tape`` plus optional pre-bound
    ``z_tensor`` / ``x_tensor`` leaves to record the evaluation for backward;
    decoder weights stay constant unless a bound ``weights`` dict is given.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    if tape is None:
        inp = np.concatenate([x, np.tile(np.asarray(z, dtype=np.float64), (len(x), 1))], axis=1)
        return decoder.forward_values(inp).reshape(-1)
    if weights is None:
        weights = decoder.params.arrays()
        weights.pop("latents", None)
    if z_tensor is None:
        z_tensor = tape.leaf(np.tile(np.asarray(z), (len(x), 1)))
    xs = x_tensor if x_tensor is not None else x
    inp = ad.concat([xs, z_tensor], axis=1)
    return ad.reshape(decoder._forward(inp, weights), (-1,))


def decode_grid(decoder, z, n=128, bounds=(-1.0, 1.0, -1.0, 1.0)) -> geo.GridField:
    grid = geo.GridField(n, n, bounds, np.zeros(n * n))
    grid.values = decode_sdf(decoder, grid.node_coords(), z)
    return grid


def decoded_contour(decoder, z, n=128):
    """Largest zero contour of the decoded field (None if no contour)."""
    return geo.longest_contour(geo.marching_squares(decode_grid(decoder, z, n)))


def spatial_gradients(decoder, x, z):
    """(s, grad_x s) at each point, one reverse pass for the whole batch."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    tape = ad.Tape()
    xt = tape.leaf(x)
    s = decode_sdf(decoder, x, z, tape=tape, x_tensor=xt)
    total = ad.tensor_sum(s)
    grads = ad.backward(tape, total)
    return s.values.copy(), grads[xt.node]


def sdf_and_grad(field, x, z):
    """(s, grad_x s) for an SdfDecoder or any object exposing
    ``sdf_and_grad(points, z)`` (analytic fields in tests and demos)."""
    if isinstance(field, SdfDecoder):
        return spatial_gradients(field, x, z)
    return field.sdf_and_grad(np.asarray(x, dtype=np.float64).reshape(-1, 2), z)


def latent_gradients(decoder, x, z):
    """(s, grad_z s) per point; rows of the replicated latent give per-point
    gradients in a single reverse pass."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    tape = ad.Tape()
    zt = tape.leaf(np.tile(np.asarray(z, dtype=np.float64), (len(x), 1)))
    s = decode_sdf(decoder, x, z, tape=tape, z_tensor=zt)
    grads = ad.backward(tape, ad.tensor_sum(s))
    return s.values.copy(), grads[zt.node]


def latent_jacobian_norms(decoder, z, points):
    """|grad_z s(x, z)| for each query point near the surface."""
    _, gz = latent_gradients(decoder, points, z)
    return np.linalg.norm(gz, axis=1)


# ---------------------------------------------------------------------------
# latent fitting (test-time encoding)
# ---------------------------------------------------------------------------

def fit_latent(decoder: SdfDecoder, samples, steps=300, lr=1e-2, lam=1e-4, seed=0):
    """Latent code minimizing the reconstruction objective with the decoder
    frozen; initialized at zero. No noise is injected at inference."""
    x, s_true = samples
    x = np.asarray(x, dtype=np.float64)
    s_true = np.asarray(s_true, dtype=np.float64)
    z = np.zeros(decoder.d)
    if steps == 0:
        return z
    state = ad.AdamState(lr=lr)
    weights = decoder.params.arrays()
    for step in range(steps):
        tape = ad.Tape()
        zt = tape.leaf(z)
        zrow = ad.reshape(zt, (1, decoder.d))
        zrep = ad.matmul(np.ones((len(x), 1)), zrow)
        inp = ad.concat([x, zrep], axis=1)
        pred = decoder._forward(inp, weights)
        data = ad.mean(ad.absolute(ad.sub(ad.reshape(pred, (-1,)), s_true)))
        loss = ad.add(data, ad.mul(ad.tensor_sum(ad.square(zt)), lam))
        lv = float(loss.values)
        if not np.isfinite(lv):
            raise DivergenceError(f"fit_latent diverged at step {step}")
        grads = ad.backward(tape, loss)
        ad.adam_step(state, z, grads[zt.node])
    return z


# ---------------------------------------------------------------------------
# denoising-bound diagnostic
# ---------------------------------------------------------------------------

def check_denoising_bound(decoder, z, x, s_true, sigma, n_mc=100_000, seed=0):
    """Monte-Carlo check that noisy reconstruction error is bounded by
    |r| + sigma * sqrt(2/pi) * |grad_z s|.

    Returns lhs (MC estimate of E|s(x, z+eps) - s|), rhs, and the MC standard
    error of lhs.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, 2)
    z = np.asarray(z, dtype=np.float64)
    rng = substream(seed, "denoise-mc")
    weights = decoder.params.arrays()
    if sigma == 0.0:
        s0 = decode_sdf(decoder, x, z)[0]
        r = abs(s0 - s_true)
        return {"lhs": r, "rhs": r, "mc_se": 0.0}
    eps = rng.normal(0.0, sigma, size=(n_mc, len(z)))
    inp = np.concatenate([np.tile(x, (n_mc, 1)), z[None, :] + eps], axis=1)
    pred = decoder._forward(inp, weights).reshape(-1)
    errs = np.abs(pred - s_true)
    lhs = float(errs.mean())
    se = float(errs.std(ddof=1) / np.sqrt(n_mc))
    s0 = decode_sdf(decoder, x, z)[0]
    _, gz = latent_gradients(decoder, x, z)
    rhs = abs(s0 - s_true) + sigma * np.sqrt(2.0 / np.pi) * np.linalg.norm(gz[0])
    return {"lhs": lhs, "rhs": float(rhs), "mc_se": se}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_decoder(path, decoder: SdfDecoder, table: LatentTable | None = None,
                 extra_meta: dict | None = None):
    arrays = decoder.params.arrays()
    arrays.pop("latents", None)
    n = 0
    if table is not None:
        arrays["latents"] = table.codes
        n = table.n
    meta = {"kind": "sdf-decoder", "layer_sizes": decoder.layer_sizes(),
            "d": decoder.d, "n_shapes": n}
    meta.update(extra_meta or {})
    save_arrays(path, arrays, meta)


def load_decoder(path):
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "sdf-decoder":
        raise ValueError(f"checkpoint kind {meta.get('kind')!r} is not an sdf-decoder")
    codes = arrays.pop("latents", None)
    hidden = tuple(meta["layer_sizes"][1:-1])
    dec = SdfDecoder(d=meta["d"], hidden=hidden, params=ParamStore(arrays))
    table = LatentTable(codes) if codes is not None else None
    return dec, table, meta
