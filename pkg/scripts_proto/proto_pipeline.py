"""Prototype of the desk pipeline with stage caching (development only)."""
import os
import pickle
import sys
import time

import numpy as np

sys.path.insert(0, "/root/pkg/src")
from latentshape import geometry as geo, helmholtz as hh, sdfnet, surrogate as sg
from latentshape import optloop as ol
from latentshape.rng import substream

CACHE = "/tmp/proto_cache"
os.makedirs(CACHE, exist_ok=True)
SEED = 7


def stage(name, fn):
    path = os.path.join(CACHE, name + ".pkl")
    if os.path.exists(path):
        print(f"[cache] {name}", flush=True)
        with open(path, "rb") as fh:
            return pickle.load(fh)
    t0 = time.time()
    out = fn()
    print(f"[run] {name}: {time.time()-t0:.0f}s", flush=True)
    with open(path, "wb") as fh:
        pickle.dump(out, fh)
    return out


def make_dataset():
    cfg = hh.ScatterConfig(n=64)
    return hh.gen_dataset(200, cfg, seed=SEED, sdf_samples=1200)


ds = stage("dataset", make_dataset)


def train_decoder():
    train_shapes = [ds.samples[i].shape for i in ds.splits["train"]]
    cfg = sdfnet.SdfTrainConfig(sigma=0.01, lam=1e-4, lr=3e-3, epochs=120, batch=1024,
                                samples_per_shape=1200, near_fraction=0.8, band=0.04,
                                d=16, hidden=(128, 128, 128), seed=11)
    dec, table, hist = sdfnet.train_sdf_autodecoder(train_shapes, cfg)
    return dec, table, hist


decoder, table, hist = stage("decoder", train_decoder)


def fit_holdout_latents():
    zs = {}
    t0 = time.time()
    for i in ds.splits["val"] + ds.splits["test"]:
        s = ds.samples[i]
        zs[i] = sdfnet.fit_latent(decoder, (s.sdf_points, s.sdf_values),
                                  steps=400, lr=1e-2, lam=1e-4)
    print(f"  fit {len(zs)} latents in {time.time()-t0:.0f}s", flush=True)
    return zs


holdout_z = stage("holdout_z", fit_holdout_latents)


def build_surrogate_arrays():
    grid = ds.samples[0].q.node_coords()
    rng = substream(SEED, "surrogate-queries")
    def build(idxs):
        Q, T, Z = [], [], []
        for i in idxs:
            s = ds.samples[i]
            z = table.codes[ds.splits["train"].index(i)] if i in ds.splits["train"] else holdout_z[i]
            for a, psi in s.fields.items():
                sel = rng.choice(len(grid), 1024, replace=False)
                cond = np.concatenate([grid[sel],
                                       np.tile([np.cos(a), np.sin(a)], (1024, 1))], axis=1)
                Q.append(cond)
                T.append(np.stack([psi.real.values[sel], psi.imag.values[sel]], axis=1))
                Z.append(z)
        return np.stack(Q), np.stack(T), np.stack(Z)
    return build(ds.splits["train"]), build(ds.splits["val"]), build(ds.splits["test"])


(trainQ, trainT, trainZ), (valQ, valT, valZ), (testQ, testT, testZ) = stage(
    "surrogate_arrays", build_surrogate_arrays)
print("train arrays:", trainQ.shape, trainT.shape, trainZ.shape, flush=True)


def train_sur():
    cfg = sg.SurrogateConfig()
    tc = sg.SurrogateTrainConfig(lr=1e-3, epochs=40, batch=16, queries_per_step=256,
                                 seed=3, val_every=5)
    def cb(epoch, loss, rl2):
        print(f"  epoch {epoch}: train {loss:.4f} val_rl2 {rl2}", flush=True)
    model, histo = sg.train_surrogate(trainQ, trainT, trainZ, cfg, tc,
                                      val=(valQ, valT, valZ), callback=cb)
    return model, histo


model, shist = stage("surrogate", train_sur)
print("test rel_l2:", sg.eval_rel_l2(model, testQ, testT, testZ), flush=True)
EOF_MARKER = True
