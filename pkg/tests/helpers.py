"""Shared oracles for the test suite.

The finite-difference gradient here is the independent check for every
autodiff path; it never calls backward().
"""

import numpy as np

from latentshape import autodiff as ad

FD_STEP = 1e-5


def fd_grad(f, x, h=FD_STEP):
    """Central-difference gradient of scalar f at array x, per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(approx, exact):
    """Max-norm relative disagreement between two gradient arrays."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    scale = max(np.abs(exact).max(), np.abs(approx).max(), 1e-12)
    return np.abs(approx - exact).max() / scale


def check_op_grads(fn, inputs, rng, tol, h=FD_STEP):
    """Compare backward() against fd_grad for a tape-built function.

    ``fn`` must be written in latentshape.autodiff primitives so the same
    code runs on Tensors (recorded) and on plain arrays (for the FD probe).
    Output is scalarized with a fixed random weighting.
    """
    tape = ad.Tape()
    leaves = [tape.leaf(v) for v in inputs]
    out = fn(*leaves)
    w = rng.standard_normal(out.values.shape)
    loss = ad.tensor_sum(ad.mul(out, w))
    grads = ad.backward(tape, loss)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def scalar(v, i=i):
            vals = [np.array(u, dtype=np.float64) for u in inputs]
            vals[i] = v
            return (np.asarray(fn(*vals)) * w).sum()

        fd = fd_grad(scalar, np.array(inputs[i], dtype=np.float64), h=h)
        worst = max(worst, rel_err(grads[leaf.node], fd))
    assert worst < tol, f"gradient mismatch {worst:.3e} >= {tol:g}"
    return worst
