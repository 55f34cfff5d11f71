"""Central finite-difference oracle used to verify reverse-mode gradients.

Kept independent of the autodiff engine: it only calls the forward pass,
perturbing raw numpy buffers one coordinate at a time.
"""

import numpy as np

from microdarts.tensor import Tensor, backward, no_grad


def numeric_grad(forward, tensors, eps=1e-5):
    """Central differences of a scalar-valued ``forward`` w.r.t. each tensor.

    ``forward`` takes no arguments and reads the current ``.value`` buffers
    of ``tensors``; returns one gradient array per tensor.
    """
    grads = []
    with no_grad():
        for t in tensors:
            flat = t.value.reshape(-1)
            g = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = forward().item()
                flat[i] = orig - eps
                f_minus = forward().item()
                flat[i] = orig
                g[i] = (f_plus - f_minus) / (2.0 * eps)
            grads.append(g.reshape(t.value.shape))
    return grads


def check_gradients(forward, tensors, eps=1e-5, rtol=1e-4, atol=1e-7):
    """Assert reverse-mode gradients match central differences.

    Runs the forward once under the tape, backpropagates, then compares
    against :func:`numeric_grad`. Returns the analytic gradients.
    """
    for t in tensors:
        t.grad = None
    loss = forward()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.value)
                for t in tensors]
    numeric = numeric_grad(forward, tensors, eps=eps)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)
    return analytic


def away_from_kinks(rng, shape, margin=0.05, scla=1.0):
    """Random values bounded away from zero so relu/pool kinks stay unperturbed."""
    x = rng.standard_normal(shape) * scla
    x = x + np.sign(x) * margin
    x[x == 0.0] = margin
    return x
