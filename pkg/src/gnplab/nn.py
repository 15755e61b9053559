"""Small feed-forward classifiers with hand-written backward passes.

Images are ``numpy`` arrays of shape (batch, C, H, W); logits are
(batch, num_classes).  Only the layers needed by the model zoo exist:
affine, 2-D convolution (stride 1, zero "same" padding), ReLU, 2x2 average
pooling and flatten, capped by softmax cross-entropy.  Every layer returns
its input gradient, so attacks get exact ``d loss / d image`` for free.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputError, NumericError, SpecError


class Layer:
    kind = "layer"
    params = ()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache, need_param_grads=False):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return in_shape

    def describe(self):
        return {"type": self.kind}


class Affine(Layer):
    kind = "affine"
    params = ("weight", "bias")

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, dy, cache, need_param_grads=False):
        dx = dy @ self.weight
        if not need_param_grads:
            return dx, None
        return dx, {"weight": dy.T @ cache, "bias": dy.sum(axis=0)}

    def output_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise SpecError(f"affine layer expects ({self.in_features},) input, got {tuple(in_shape)}")
        return (self.out_features,)

    def describe(self):
        return {"type": self.kind, "in": self.in_features, "out": self.out_features}


class Conv2d(Layer):
    """Stride-1 convolution with zero padding that preserves H and W."""

    kind = "conv2d"
    params = ("weight", "bias")

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weight.shape[2] % 2 == 0:
            raise SpecError("conv2d kernel size must be odd")

    @property
    def k(self):
        return self.weight.shape[2]

    def forward(self, x):
        b, c, h, w = x.shape
        f = self.weight.shape[0]
        cols = kernels.im2col(x, self.k, self.k // 2)
        y = cols @ self.weight.reshape(f, -1).T + self.bias
        y = y.reshape(b, h, w, f).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, dy, cache, need_param_grads=False):
        cols, (b, c, h, w) = cache
        f = self.weight.shape[0]
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, f)
        dcols = dy2 @ self.weight.reshape(f, -1)
        dx = kernels.col2im(dcols, b, c, h, w, self.k, self.k // 2)
        if not need_param_grads:
            return dx, None
        dw = (dy2.T @ cols).reshape(self.weight.shape)
        return dx, {"weight": dw, "bias": dy2.sum(axis=0)}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise SpecError(
                f"conv2d layer expects {self.weight.shape[1]} input channels, got shape {tuple(in_shape)}"
            )
        return (self.weight.shape[0],) + tuple(in_shape[1:])

    def describe(self):
        f, c, k, _ = self.weight.shape
        return {"type": self.kind, "in_channels": c, "out_channels": f, "kernel": k}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, need_param_grads=False):
        # subgradient at exactly 0 is 0
        return dy * cache, None


class AvgPool2(Layer):
    kind = "avgpool2"

    def forward(self, x):
        return kernels.avgpool2_forward(x), None

    def backward(self, dy, cache, need_param_grads=False):
        return kernels.avgpool2_backward(dy), None

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise SpecError(f"avgpool2 needs an even (C, H, W) input, got {tuple(in_shape)}")
        return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, need_param_grads=False):
        return dy.reshape(cache), None

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


@dataclass
class LossValueAndGrad:
    loss: float
    input_grad: np.ndarray
    per_sample_loss: np.ndarray = None


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Per-sample cross-entropy and its logits gradient ``softmax - onehot``."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(len(labels))
    losses = lse - z[idx, labels]
    dlogits = softmax(logits)
    dlogits[idx, labels] -= 1.0
    return losses, dlogits


@dataclass
class Model:
    """A feed-forward classifier: an ordered list of layers plus metadata.

    ``forward`` is a pure function of (parameters, input); calling it from
    several threads on disjoint batches is safe.
    """

    arch_id: str
    layers: list
    input_shape: tuple
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except SpecError as exc:
                raise SpecError(f"{self.arch_id}: layer {i} ({layer.kind}): {exc}") from None
        if shape != (self.num_classes,):
            raise SpecError(f"{self.arch_id}: network output {shape} != ({self.num_classes},)")

    # -- parameters -----------------------------------------------------------

    def parameters(self):
        """Yield (layer index, name, array) for every trainable array."""
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield i, name, getattr(layer, name)

    def n_parameters(self):
        return int(sum(p.size for _, _, p in self.parameters()))

    def copy(self):
        layers = []
        for layer in self.layers:
            if layer.params:
                layers.append(type(layer)(*(getattr(layer, n).copy() for n in layer.params)))
            else:
                layers.append(type(layer)())
        return Model(self.arch_id, layers, self.input_shape, self.num_classes, dict(self.meta))

    # -- evaluation -----------------------------------------------------------

    def _check_images(self, images):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != self.input_shape:
            raise InputError(
                f"{self.arch_id}: expected images of shape (batch, {', '.join(map(str, self.input_shape))}), "
                f"got {images.shape}"
            )
        if not np.all(np.isfinite(images)):
            raise NumericError(f"{self.arch_id}: non-finite values in input images")
        return images

    def _check_labels(self, labels, batch):
        labels = np.asarray(labels)
        if labels.shape != (batch,):
            raise InputError(f"expected {batch} labels, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise InputError("labels must be integers")
        if batch and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        return labels.astype(np.int64)

    def _forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def _backward(self, dlogits, caches, need_param_grads):
        grads = [None] * len(self.layers)
        d = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            d, grads[i] = self.layers[i].backward(d, caches[i], need_param_grads)
        return d, grads

    def forward(self, images):
        """Logits for a batch of images."""
        logits, _ = self._forward(self._check_images(images))
        return logits

    def predict(self, images, batch_size=1000):
        images = np.asarray(images)
        if len(images) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(
            [self.forward(images[i:i + batch_size]).argmax(axis=1) for i in range(0, len(images), batch_size)]
        )

    def loss_and_input_gradient(self, images, labels, reduction="mean"):
        """Cross-entropy loss and its exact gradient with respect to the images.

        ``reduction="mean"`` differentiates the batch-mean loss; ``"sum"``
        differentiates the summed loss, which gives every image its own
        unscaled gradient independent of batch size.
        """
        images = self._check_images(images)
        labels = self._check_labels(labels, images.shape[0])
        logits, caches = self._forward(images)
        losses, dlogits = softmax_cross_entropy(logits, labels)
        if reduction == "mean":
            dlogits /= max(len(labels), 1)
            loss = float(losses.mean()) if len(labels) else 0.0
        elif reduction == "sum":
            loss = float(losses.sum())
        else:
            raise ValueError(f"unknown reduction {reduction!r}")
        dx, _ = self._backward(dlogits, caches, need_param_grads=False)
        return LossValueAndGrad(loss, dx, losses)

    def loss_and_param_gradient(self, images, labels):
        """Mean cross-entropy, per-layer parameter gradients, and logits."""
        images = self._check_images(images)
        labels = self._check_labels(labels, images.shape[0])
        logits, caches = self._forward(images)
        losses, dlogits = softmax_cross_entropy(logits, labels)
        dlogits /= len(labels)
        _, grads = self._backward(dlogits, caches, need_param_grads=True)
        return float(losses.mean()), grads, logits

    def per_sample_loss(self, images, labels):
        images = self._check_images(images)
        labels = self._check_labels(labels, images.shape[0])
        logits, _ = self._forward(images)
        return softmax_cross_entropy(logits, labels)[0]

    def describe(self):
        return [layer.describe() for layer in self.layers]


def forward(model, images):
    return model.forward(images)


def loss_and_input_gradient(model, images, labels):
    return model.loss_and_input_gradient(images, labels)


def check_gradient(model, images, labels, fd_step=1e-5, n_coords=32, seed=0):
    """Largest relative error between the analytic input gradient and central differences.

    ``model`` is anything with ``loss_and_input_gradient(images, labels)``
    returning a :class:`LossValueAndGrad` whose ``loss`` is the scalar being
    differentiated.  ``n_coords`` coordinates of the flattened batch are
    sampled with ``seed``.
    """
    if not fd_step > 0:
        raise InputError(f"fd_step must be positive, got {fd_step}")
    x = np.array(images, dtype=np.float64)
    res = model.loss_and_input_gradient(x, labels)
    analytic = np.asarray(res.input_grad, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    n = min(n_coords, x.size)
    coords = rng.choice(x.size, size=n, replace=False)
    flat = x.reshape(-1)
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + fd_step
        up = model.loss_and_input_gradient(x, labels).loss
        flat[c] = orig - fd_step
        down = model.loss_and_input_gradient(x, labels).loss
        flat[c] = orig
        numeric = (up - down) / (2.0 * fd_step)
        a = analytic[c]
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
