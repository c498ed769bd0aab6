"""Geometry-conditioned field predictor built on slice attention.

Query points are embedded, softly assigned to G slices, and each slice is
aggregated into one token. The shape latent is injected into the tokens
through a sigmoid gate, tokens interact by multi-head self-attention, and the
updated tokens are broadcast back to the points. The latent pathway makes the
predicted fields differentiable with respect to the shape code, which is what
the optimization loops differentiate.

Everything operates on stacked batches (B, N, F); single-sample inputs are
promoted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DivergenceError
from .checkpoint import load_arrays, save_arrays
from .geometry import rel_errors
from .params import AdamOptimizer, ParamStore, cosine_lr, init_linear
from .rng import substream

LN_EPS = 1e-6


@dataclass
class SurrogateConfig:
    n_slices: int = 8            # G
    width: int = 64              # D, token/feature width
    blocks: int = 3
    heads: int = 4
    d_latent: int = 16
    eps_slice: float = 1e-8
    in_features: int = 4         # (x, y, cos angle, sin angle)
    out_channels: int = 2        # Re/Im of the scattered field
    inject_per_block: bool = True

    def __post_init__(self):
        if self.n_slices < 2:
            raise ValueError("need at least 2 slices")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.eps_slice <= 0:
            raise ValueError("eps_slice must be positive")


def init_params(cfg: SurrogateConfig, seed=0) -> ParamStore:
    rng = substream(seed, "surrogate-init")
    p = ParamStore()
    D, G, d = cfg.width, cfg.n_slices, cfg.d_latent
    dh = D // cfg.heads
    p["embed.W0"] = init_linear(rng, cfg.in_features, D)
    p["embed.b0"] = np.zeros(D)
    p["embed.W1"] = init_linear(rng, D, D)
    p["embed.b1"] = np.zeros(D)
    for k in range(cfg.blocks):
        pre = f"blk{k}."
        p[pre + "ln1.g"] = np.ones(D)
        p[pre + "ln1.b"] = np.zeros(D)
        p[pre + "Ws"] = init_linear(rng, D, G)
        p[pre + "Wv"] = init_linear(rng, D, D)
        p[pre + "Wo"] = init_linear(rng, D, D)
        p[pre + "gate.W1"] = init_linear(rng, D, D)
        p[pre + "gate.W2"] = init_linear(rng, D, D)
        p[pre + "Wz"] = init_linear(rng, d, D)
        for h in range(cfg.heads):
            p[pre + f"attn.Wq{h}"] = init_linear(rng, D, dh)
            p[pre + f"attn.Wk{h}"] = init_linear(rng, D, dh)
            p[pre + f"attn.Wv{h}"] = init_linear(rng, D, dh)
        p[pre + "attn.Wo"] = init_linear(rng, D, D)
        p[pre + "ln2.g"] = np.ones(D)
        p[pre + "ln2.b"] = np.zeros(D)
        p[pre + "ff.W1"] = init_linear(rng, D, 2 * D)
        p[pre + "ff.b1"] = np.zeros(2 * D)
        p[pre + "ff.W2"] = init_linear(rng, 2 * D, D)
        p[pre + "ff.b2"] = np.zeros(D)
    p["head.ln.g"] = np.ones(D)
    p["head.ln.b"] = np.zeros(D)
    p["head.W0"] = init_linear(rng, D, D)
    p["head.b0"] = np.zeros(D)
    p["head.W1"] = init_linear(rng, D, cfg.out_channels)
    p["head.b1"] = np.zeros(cfg.out_channels)
    return p


# ---------------------------------------------------------------------------
# building blocks (each usable on plain arrays or Tensors)
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta):
    return ad.layer_norm_op(x, gamma, beta, eps=LN_EPS)


def slice_assign(h, w_s):
    """Row-stochastic slice weights: softmax over slices of a point-wise
    projection."""
    return ad.softmax(ad.matmul(h, w_s))


def slice_aggregate(w, h, w_v, eps):
    """Per-slice weighted mean of value-projected point features.

    Weights are normalized over points with an eps floor, so every token is a
    damped convex combination.
    """
    totals = ad.tensor_sum(w, axis=-2, keepdims=True)
    alpha = ad.div(w, ad.add(totals, eps))
    values = ad.matmul(h, w_v)
    return ad.matmul(ad.transpose(alpha, _swap_last_two(alpha)), values)


def _swap_last_two(x):
    nd = (x.values if isinstance(x, ad.Tensor) else np.asarray(x)).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def gate_inject(tokens, z, w1, w2, w_z):
    """Residual latent injection: tokens + sigmoid gate (from the tokens)
    times the projected latent. Unchanged when z = 0 or w_z = 0."""
    gate = ad.sigmoid(ad.matmul(ad.silu(ad.matmul(tokens, w1)), w2))
    zproj = ad.matmul(z, w_z)
    zv = zproj.values if isinstance(zproj, ad.Tensor) else zproj
    tv = tokens.values if isinstance(tokens, ad.Tensor) else np.asarray(tokens)
    if zv.ndim == 2 and tv.ndim == 3:  # (B, D) -> (B, 1, D) to broadcast over slices
        zproj = ad.reshape(zproj, (zv.shape[0], 1, zv.shape[1]))
    delta = ad.mul(gate, zproj)
    return ad.add(tokens, delta)


def token_attention(tokens, params, prefix, heads):
    """Standard multi-head scaled dot-product self-attention over the tokens."""
    tv = tokens.values if isinstance(tokens, ad.Tensor) else np.asarray(tokens)
    D = tv.shape[-1]
    dh = D // heads
    outs = []
    for h in range(heads):
        q = ad.matmul(tokens, params[prefix + f"attn.Wq{h}"])
        k = ad.matmul(tokens, params[prefix + f"attn.Wk{h}"])
        v = ad.matmul(tokens, params[prefix + f"attn.Wv{h}"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k, _swap_last_two(k))), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores)
        outs.append(ad.matmul(attn, v))
    merged = ad.concat(outs, axis=-1)
    return ad.matmul(merged, params[prefix + "attn.Wo"])


def deslice(w, tokens, w_o):
    """Broadcast tokens back to the points through the slice weights."""
    return ad.matmul(w, ad.matmul(tokens, w_o))


def forward(params, cfg: SurrogateConfig, queries, z, inject=True):
    """Predicted fields at the query points.

    ``queries``: (N, F) or (B, N, F); ``z``: (d,) or (B, d); either may be a
    Tensor for gradient tracking. Returns matching leading dimensions.
    """
    qv = queries.values if isinstance(queries, ad.Tensor) else np.asarray(queries, dtype=np.float64)
    single = qv.ndim == 2
    if single:
        queries = ad.reshape(queries, (1,) + qv.shape) if isinstance(queries, ad.Tensor) \
            else qv[None, :, :]
    zv = z.values if isinstance(z, ad.Tensor) else np.asarray(z, dtype=np.float64)
    if zv.ndim == 1:
        z = ad.reshape(z, (1, -1)) if isinstance(z, ad.Tensor) else zv[None, :]

    h = ad.relu(ad.add(ad.matmul(queries, params["embed.W0"]), params["embed.b0"]))
    h = ad.add(ad.matmul(h, params["embed.W1"]), params["embed.b1"])
    for k in range(cfg.blocks):
        pre = f"blk{k}."
        u = layer_norm(h, params[pre + "ln1.g"], params[pre + "ln1.b"])
        w = slice_assign(u, params[pre + "Ws"])
        tokens = slice_aggregate(w, u, params[pre + "Wv"], cfg.eps_slice)
        if inject and (cfg.inject_per_block or k == 0):
            tokens = gate_inject(tokens, z, params[pre + "gate.W1"],
                                 params[pre + "gate.W2"], params[pre + "Wz"])
        tokens = token_attention(tokens, params, pre, cfg.heads)
        h = ad.add(h, deslice(w, tokens, params[pre + "Wo"]))
        u2 = layer_norm(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
        ff = ad.matmul(ad.relu(ad.add(ad.matmul(u2, params[pre + "ff.W1"]),
                                      params[pre + "ff.b1"])),
                       params[pre + "ff.W2"])
        h = ad.add(h, ad.add(ff, params[pre + "ff.b2"]))
    u3 = layer_norm(h, params["head.ln.g"], params["head.ln.b"])
    out = ad.relu(ad.add(ad.matmul(u3, params["head.W0"]), params["head.b0"]))
    out = ad.add(ad.matmul(out, params["head.W1"]), params["head.b1"])
    if single:
        ov = out.values if isinstance(out, ad.Tensor) else out
        out = ad.reshape(out, ov.shape[1:])
    return out


@dataclass
class Surrogate:
    """Trained predictor: config plus parameter store."""

    cfg: SurrogateConfig
    params: ParamStore

    def predict(self, queries, z):
        """Plain numpy prediction (no recording)."""
        return forward(self.params.arrays(), self.cfg, queries, z)

    def predict_recorded(self, queries, z_tensor, query_tensor=None):
        """Recorded prediction for backward passes; weights stay frozen."""
        q = query_tensor if query_tensor is not None else queries
        return forward(self.params.arrays(), self.cfg, q, z_tensor)

    def save(self, path, extra_meta=None):
        meta = {"kind": "surrogate", "config": vars(self.cfg)}
        meta.update(extra_meta or {})
        save_arrays(path, self.params.arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "surrogate":
            raise ValueError(f"checkpoint kind {meta.get('kind')!r} is not a surrogate")
        cfg = SurrogateConfig(**meta["config"])
        return cls(cfg, ParamStore(arrays)), meta


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class SurrogateTrainConfig:
    lr: float = 1e-3
    epochs: int = 40
    batch: int = 16              # samples per step
    queries_per_step: int = 256  # random query subset per step (0 = all)
    cosine_decay: bool = True
    seed: int = 0
    val_target: float = None     # early stop when val rel_l2 falls below
    val_every: int = 5


def relative_l1_loss(pred, targets):
    """Batched relative l1: per-sample sum|err| / sum|target|, averaged."""
    tv = np.asarray(targets, dtype=np.float64)
    denom = np.abs(tv).reshape(tv.shape[0], -1).sum(axis=1)
    err = ad.absolute(ad.sub(pred, tv))
    per = ad.tensor_sum(ad.reshape(err, (tv.shape[0], -1)), axis=1)
    return ad.mean(ad.mul(per, 1.0 / denom))


def train_surrogate(queries, targets, latents, cfg: SurrogateConfig,
                    train_cfg: SurrogateTrainConfig, val=None, callback=None):
    """Adam on the relative-l1 loss over (queries, latent, field) samples.

    ``queries``: (S, N, F); ``targets``: (S, N, C); ``latents``: (S, d) from a
    frozen decoder table. ``val``: optional (queries, targets, latents) for
    held-out monitoring / early stop. Returns (Surrogate, history dict).
    """
    queries = np.asarray(queries, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    latents = np.asarray(latents, dtype=np.float64)
    n_samples = queries.shape[0]
    params = init_params(cfg, seed=train_cfg.seed)
    opt = AdamOptimizer(params, lr=train_cfg.lr)
    rng = substream(train_cfg.seed, "surrogate-train")
    steps_per_epoch = max(1, n_samples // train_cfg.batch)
    total = train_cfg.epochs * steps_per_epoch
    history = {"train_loss": [], "val_rel_l2": []}
    model = Surrogate(cfg, params)
    step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n_samples)
        losses = []
        for b in range(steps_per_epoch):
            sel = order[b * train_cfg.batch:(b + 1) * train_cfg.batch]
            qb, tb = queries[sel], targets[sel]
            nq = qb.shape[1]
            if train_cfg.queries_per_step and train_cfg.queries_per_step < nq:
                qsel = rng.choice(nq, size=train_cfg.queries_per_step, replace=False)
                qb, tb = qb[:, qsel], tb[:, qsel]
            tape = ad.Tape()
            bound = params.bind(tape)
            pred = forward(bound, cfg, qb, latents[sel])
            loss = relative_l1_loss(pred, tb)
            lv = float(loss.values)
            if not np.isfinite(lv):
                raise DivergenceError(f"surrogate training diverged at epoch {epoch}")
            grads = params.grads(ad.backward(tape, loss), bound)
            lr = cosine_lr(step, total, train_cfg.lr) if train_cfg.cosine_decay else train_cfg.lr
            opt.step(grads, lr=lr)
            losses.append(lv)
            step += 1
        history["train_loss"].append(float(np.mean(losses)))
        if val is not None and (epoch % train_cfg.val_every == 0
                                or epoch == train_cfg.epochs - 1):
            rl2 = eval_rel_l2(model, *val)
            history["val_rel_l2"].append((epoch, rl2))
            if callback is not None:
                callback(epoch, history["train_loss"][-1], rl2)
            if train_cfg.val_target is not None and rl2 < train_cfg.val_target:
                break
        elif callback is not None:
            callback(epoch, history["train_loss"][-1], None)
    return model, history


def eval_rel_l2(model: Surrogate, queries, targets, latents, chunk=32):
    """Mean per-sample relative l2 error over a sample set."""
    queries = np.asarray(queries, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    latents = np.asarray(latents, dtype=np.float64)
    vals = []
    for s in range(0, queries.shape[0], chunk):
        pred = model.predict(queries[s:s + chunk], latents[s:s + chunk])
        for p, t in zip(pred, targets[s:s + chunk]):
            vals.append(rel_errors(p, t)["rel_l2"])
    return float(np.mean(vals))
