"""Central finite-difference checks for the autodiff engine."""
import numpy as np


def numeric_grad(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = fn(*arrays)
            flat[i] = old - h
            fm = fn(*arrays)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    """Max-norm error scaled by the larger max-norm of the two gradients.

    Zero when both gradients vanish.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_params(loss_fn, params, h=1e-5):
    """Compare backprop and finite differences for every tensor in ``params``.

    ``loss_fn()`` must rebuild the graph from the current ``params[k].data``
    and return a scalar ``Tensor``. Returns ``{name: relative error}``.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    names = list(params)

    def scalar(*_):
        return loss_fn().item()

    numeric = numeric_grad(scalar, [params[k].data for k in names], h)
    return {k: relative_error(analytic[k], n) for k, n in zip(names, numeric)}
