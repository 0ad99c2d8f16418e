import numpy as np
import pytest

from smoelab import numerics as nm


def central_difference_grads(make_loss, params, h=1e-5):
    """Finite-difference gradient oracle.

    `make_loss` re-runs the forward pass from scratch and returns a scalar
    Tensor; `params` are the leaf tensors whose storage is perturbed in place.
    Only forward evaluations are used, so the result is independent of the
    tape implementation it is checked against.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.array)
        flat = p.array.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = make_loss().item()
            flat[k] = orig - h
            down = make_loss().item()
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_match(make_loss, params, rtol=1e-4, h=1e-5):
    """Run the tape backward and compare every parameter gradient against
    central finite differences at relative tolerance `rtol`."""
    for p in params:
        p.grad = None
    loss = make_loss()
    nm.backward(loss)
    # a parameter the tape never reached has an exact-zero gradient; the
    # finite-difference side still flags it when the forward pass disagrees
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.array) for p in params]
    numeric = central_difference_grads(make_loss, params, h=h)
    for p, ana, num in zip(params, analytic, numeric):
        denom = np.maximum(1e-8, np.abs(ana))
        rel = np.abs(ana - num) / denom
        assert rel.max() < rtol, f"gradient mismatch on {p!r}: max rel err {rel.max():.3e}"


@pytest.fixture
def rng():
    return nm.make_rng(12345)
