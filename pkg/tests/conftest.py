"""Shared fixtures and the finite-difference gradient harness."""

import zlib

import numpy as np
import pytest

from advlab.autodiff import Tensor


def stable_seed(name: str) -> int:
    """Process-independent seed derived from a label (str hash is salted)."""
    return zlib.crc32(name.encode())


def numeric_gradient(f, x, h=1e-3):
    """Central-difference gradient of scalar f() w.r.t. array x (in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-4):
    """Worst-case relative disagreement between gradient estimates.

    ``floor`` marks where truncation noise of the difference quotient starts
    to dominate: coordinates smaller than the floor are compared against it
    rather than against their own magnitude (two-regime gradcheck).
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build, arrays, tol=1e-4, h=1e-3, floor=1e-4, dtype=np.float64):
    """Compare backward() gradients of ``build(*tensors)`` to central differences.

    ``build`` maps Tensors to a scalar Tensor; every array in ``arrays`` is
    checked as a differentiation target. Inputs are expected at unit scale so
    the default noise floor is meaningful.
    """
    tensors = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):

        def f():
            fresh = [Tensor(arr, dtype=dtype) for arr in arrays]
            return float(build(*fresh).item())

        numeric = numeric_gradient(f, a, h=h)
        assert t.grad is not None, "no gradient reached a tracked input"
        worst = max(worst, max_rel_error(t.grad, numeric, floor=floor))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e} >= {tol}"
    return worst


def weighted_sum(out, weights):
    """Scalar probe sum(out * weights); keeps every output coordinate live."""
    return (out * Tensor(weights, dtype=np.float64)).sum()


class FlatLinearClassifier:
    """Tiny duck-typed classifier over flattened pixels.

    Implements the model protocol the attack and evaluation code relies on
    (forward / predict / loss_and_input_gradient / params) without the model
    zoo's input-shape constraints, so tests can use arbitrary pixel counts.
    """

    def __init__(self, weights, bias, dtype=np.float64):
        import advlab.autodiff as ad

        self._ad = ad
        self.dtype = np.dtype(dtype)
        self.params = {
            "w": Tensor(np.asarray(weights), requires_grad=True, dtype=dtype),
            "b": Tensor(np.asarray(bias), requires_grad=True, dtype=dtype),
        }

    def forward(self, images):
        n = images.shape[0]
        flat = self._ad.reshape(images, (n, -1))
        return self._ad.matmul(flat, self.params["w"]) + self.params["b"]

    def predict(self, images):
        return np.argmax(self.forward(images).data, axis=1)

    def loss_and_input_gradient(self, images, labels):
        flags = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            x = Tensor(images.data, requires_grad=True, dtype=images.dtype)
            logits = self.forward(x)
            losses = self._ad.per_sample_cross_entropy(logits.data, labels)
            self._ad.cross_entropy(logits, labels).backward()
        finally:
            for k, p in self.params.items():
                p.requires_grad = flags[k]
        return Tensor(x.grad, dtype=x.dtype), losses

    def input_gradient(self, images, labels):
        return self.loss_and_input_gradient(images, labels)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
