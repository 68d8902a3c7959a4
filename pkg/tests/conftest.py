import numpy as np

from rankuap import autodiff as ad


def numerical_grad(f, x, eps=1e-3):
    """Central finite differences of a scalar function over an ndarray."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def probe_grad(f, x, indices, eps=1e-3):
    """Central finite differences at selected flat indices only."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        out[n] = (fp - fm) / (2 * eps)
    return out


def check_grad_probes(build_loss, x0, rng, num_probes=100, eps=1e-3, rtol=1e-3):
    """Compare analytic gradients against finite differences on random probes.

    `build_loss` maps an ndarray to a scalar loss Tensor; the analytic gradient
    is read off the leaf after backward. Relative error is measured against
    max(|analytic|, |numeric|, 1e-6) so near-zero entries do not blow up.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    leaf = ad.Tensor(x0.copy(), requires_grad=True)
    loss = build_loss(leaf)
    ad.backward(loss)
    analytic = leaf.grad.reshape(-1)

    idx = rng.choice(x0.size, size=min(num_probes, x0.size), replace=False)
    numeric = probe_grad(lambda arr: build_loss(ad.Tensor(arr)).item(), x0.copy(), idx, eps=eps)
    denom = np.maximum(np.maximum(np.abs(analytic[idx]), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic[idx] - numeric) / denom
    assert rel.max() < rtol, f"max relative gradient error {rel.max():.2e}"
