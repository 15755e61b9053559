import numpy as np
import pytest

from gnplab.nn import Affine, Conv2d, Flatten, LossValueAndGrad, Model, ReLU, AvgPool2


class LinearLoss:
    """loss(x) = sum_i w . x_i over the batch (labels ignored)."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def per_sample_loss(self, x, labels=None):
        return (np.asarray(x).reshape(len(x), -1) * self.w.ravel()).sum(axis=1)

    def loss_and_input_gradient(self, x, labels=None, reduction="sum"):
        x = np.asarray(x, dtype=np.float64)
        per = self.per_sample_loss(x)
        g = np.broadcast_to(self.w, x.shape).copy()
        return LossValueAndGrad(float(per.sum()), g, per)


class QuadraticLoss:
    """loss(x) = 1/2 x^T A x per image, A symmetric PSD over the flattened image."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)

    def per_sample_loss(self, x, labels=None):
        f = np.asarray(x).reshape(len(x), -1)
        return 0.5 * np.einsum("bi,ij,bj->b", f, self.a, f)

    def loss_and_input_gradient(self, x, labels=None, reduction="sum"):
        x = np.asarray(x, dtype=np.float64)
        g = (x.reshape(len(x), -1) @ self.a).reshape(x.shape)
        per = self.per_sample_loss(x)
        return LossValueAndGrad(float(per.sum()), g, per)


class CountingGrad:
    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __call__(self, x, labels):
        self.calls += 1
        return self.model.loss_and_input_gradient(x, labels, reduction="sum").input_grad


def random_psd(rng, d):
    m = rng.standard_normal((d, d))
    return m @ m.T / d


def small_mlp(seed=0, shape=(1, 3, 3), hidden=16, classes=3):
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    return Model("mlp-test", [
        Flatten(),
        Affine(rng.standard_normal((hidden, d)) / np.sqrt(d), rng.standard_normal(hidden) * 0.1),
        ReLU(),
        Affine(rng.standard_normal((classes, hidden)) / np.sqrt(hidden), rng.standard_normal(classes) * 0.1),
    ], shape, classes)


def small_cnn(seed=0, shape=(1, 6, 6), classes=3):
    rng = np.random.default_rng(seed)
    c = shape[0]
    return Model("cnn-test", [
        Conv2d(rng.standard_normal((4, c, 3, 3)) / 3.0, rng.standard_normal(4) * 0.1),
        ReLU(),
        AvgPool2(),
        Flatten(),
        Affine(rng.standard_normal((classes, 4 * shape[1] * shape[2] // 4)) / 4.0, rng.standard_normal(classes) * 0.1),
    ], shape, classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_criterion(number, title, ok, detail):
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
