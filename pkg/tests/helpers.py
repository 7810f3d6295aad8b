import numpy as np

from subsetlift import autodiff as ad


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def analytic_grad(fn, *values):
    """Gradient of ``sum(weights * fn(...))``-style scalar closures w.r.t. every input."""
    tensors = [ad.Tensor(v, requires_grad=True) for v in values]
    with ad.Tape():
        out = fn(*tensors)
        ad.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.value) for t in tensors]


def rigid_batch(rng, shape, nb, scale=1.0):
    from subsetlift.linalg import random_rotation

    out = []
    for _ in range(nb):
        r = random_rotation(rng)
        out.append(scale * shape @ r.T + rng.normal(size=3))
    return np.array(out)
