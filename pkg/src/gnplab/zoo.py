"""Model zoo: architecture specs, seeded init, SGD training, and persistence.

Model files are ``<arch-id>-<seed>.bin`` with a ``.meta.json`` sidecar.
Binary layout (all integers little-endian)::

    b"GNPM"                 magic
    u32                     format version (FORMAT_VERSION)
    u32                     header length L
    L bytes                 UTF-8 JSON header: arch_id, input_shape,
                            num_classes, layers (type + sizes), meta
    float64[...]            parameters, little-endian, in layer order
                            (weight then bias)
    32 bytes                SHA-256 of everything above
"""
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, InputError, SpecError, TrainingError
from .nn import Affine, AvgPool2, Conv2d, Flatten, Model, ReLU
from .seeding import rng_for

FORMAT_VERSION = 1
# An epoch whose mean loss exceeds this multiple of chance level (ln k) counts as diverged.
DIVERGENCE_FACTOR = 20.0
MAGIC = b"GNPM"


@dataclass
class ArchSpec:
    arch_id: str
    layers: list
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 4

    def signature(self):
        """Structure key used for the zoo diversity check."""
        return json.dumps(self.layers, sort_keys=True)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate < 0 or self.momentum < 0:
            raise InputError(f"invalid training config {self}")


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)
    test_accuracy: float = float("nan")


def _conv(f, k):
    return {"type": "conv2d", "out": f, "kernel": k}


def default_zoo_specs(input_shape=(1, 28, 28), num_classes=4):
    """Six architecturally distinct classifiers; the first is the attack source."""
    relu, pool, flat = {"type": "relu"}, {"type": "avgpool2"}, {"type": "flatten"}

    def aff(n):
        return {"type": "affine", "out": n}

    head = aff(num_classes)
    specs = [
        ("cnn-a", [_conv(8, 3), relu, pool, _conv(16, 3), relu, pool, flat, aff(64), relu, head]),
        ("cnn-b", [_conv(12, 5), relu, pool, flat, head]),
        ("cnn-c", [_conv(8, 3), relu, _conv(8, 3), relu, pool, _conv(16, 3), relu, pool, flat, head]),
        ("cnn-d", [_conv(6, 3), relu, pool, pool, flat, aff(32), relu, head]),
        ("mlp-a", [flat, aff(128), relu, head]),
        ("mlp-b", [flat, aff(256), relu, aff(64), relu, head]),
    ]
    return [ArchSpec(name, layers, tuple(input_shape), num_classes) for name, layers in specs]


def build(spec, seed):
    """Instantiate ``spec`` with weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = rng_for(seed, f"init/{spec.arch_id}")
    shape = tuple(spec.input_shape)
    layers = []
    for i, desc in enumerate(spec.layers):
        kind = desc.get("type")
        where = f"{spec.arch_id}: layer {i} ({kind})"
        if kind == "conv2d":
            if len(shape) != 3:
                raise SpecError(f"{where}: needs a (C, H, W) input, got {shape}")
            c, k, f = shape[0], int(desc.get("kernel", 3)), int(desc["out"])
            if desc.get("in", c) != c:
                raise SpecError(f"{where}: declared {desc['in']} input channels but receives {c}")
            if k % 2 == 0 or k < 1:
                raise SpecError(f"{where}: kernel size must be a positive odd integer, got {k}")
            bound = 1.0 / np.sqrt(c * k * k)
            layers.append(Conv2d(rng.uniform(-bound, bound, (f, c, k, k)), rng.uniform(-bound, bound, f)))
        elif kind == "affine":
            if len(shape) != 1:
                raise SpecError(f"{where}: needs a flat input (add a flatten layer), got {shape}")
            n_in, n_out = shape[0], int(desc["out"])
            if desc.get("in", n_in) != n_in:
                raise SpecError(f"{where}: declared {desc['in']} inputs but receives {n_in}")
            bound = 1.0 / np.sqrt(n_in)
            layers.append(Affine(rng.uniform(-bound, bound, (n_out, n_in)), rng.uniform(-bound, bound, n_out)))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "avgpool2":
            layers.append(AvgPool2())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise SpecError(f"{where}: unknown layer type")
        try:
            shape = layers[-1].output_shape(shape)
        except SpecError as exc:
            raise SpecError(f"{where}: {exc}") from None
    if shape != (spec.num_classes,):
        raise SpecError(f"{spec.arch_id}: output shape {shape} does not match {spec.num_classes} classes")
    return Model(spec.arch_id, layers, spec.input_shape, spec.num_classes, {"init_seed": int(seed)})


def accuracy(model, dataset):
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(model.predict(dataset.images) == dataset.labels))


def train(model, data, cfg, test=None, log=None):
    """Minibatch SGD with momentum on mean cross-entropy.

    Returns a :class:`TrainResult` holding a trained copy of ``model``;
    the input model is left untouched.  Shuffling is driven by ``cfg.seed``.
    """
    if len(data) == 0:
        raise InputError("cannot train on an empty dataset")
    model = model.copy()
    rng = rng_for(cfg.seed, f"train/{model.arch_id}")
    velocity = [{n: np.zeros_like(getattr(l, n)) for n in l.params} for l in model.layers]
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, logits = model.loss_and_param_gradient(data.images[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"{model.arch_id}: loss became {loss} in epoch {epoch}; "
                    f"try a smaller learning rate than {cfg.learning_rate}"
                )
            total += loss * len(idx)
            correct += int((logits.argmax(axis=1) == data.labels[idx]).sum())
            for layer, g, v in zip(model.layers, grads, velocity):
                for name in layer.params:
                    v[name] *= cfg.momentum
                    v[name] -= cfg.learning_rate * g[name]
                    setattr(layer, name, getattr(layer, name) + v[name])
        diverged = total / n > DIVERGENCE_FACTOR * np.log(model.num_classes)
        if diverged or not all(np.all(np.isfinite(p)) for _, _, p in model.parameters()):
            raise TrainingError(
                f"{model.arch_id}: training diverged in epoch {epoch} (mean loss {total / n:.4g}); "
                f"try a smaller learning rate than {cfg.learning_rate}"
            )
        rec = {"epoch": epoch + 1, "train_loss": total / n, "train_accuracy": correct / n}
        if test is not None:
            rec["test_accuracy"] = accuracy(model, test)
        history.append(rec)
        if log:
            log(f"{model.arch_id} epoch {epoch + 1}/{cfg.epochs} " + " ".join(
                f"{k}={v:.4f}" for k, v in rec.items() if k != "epoch"))
    test_acc = accuracy(model, test) if test is not None else float("nan")
    model.meta.update({"train": asdict(cfg), "history": history, "test_accuracy": test_acc})
    return TrainResult(model, history, test_acc)


# -- persistence ----------------------------------------------------------------


def model_filename(arch_id, seed):
    return f"{arch_id}-{seed}.bin"


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def model_bytes(model):
    header = {
        "arch_id": model.arch_id,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": [
            dict(layer.describe(), shapes={n: list(getattr(layer, n).shape) for n in layer.params})
            for layer in model.layers
        ],
        "meta": _to_jsonable(model.meta),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hb)), hb]
    for _, _, p in model.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save(model, path):
    """Write the binary model file and its ``.meta.json`` sidecar; returns the SHA-256 hex."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = model_bytes(model)
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    sidecar = {
        "format_version": FORMAT_VERSION,
        "arch_id": model.arch_id,
        "file": path.name,
        "sha256": digest,
        "n_parameters": model.n_parameters(),
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": model.describe(),
        "meta": _to_jsonable(model.meta),
    }
    meta_path = path.with_name(path.name[: -len(path.suffix)] + ".meta.json")
    meta_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return digest


def load(path):
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 + 32 or blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a model file", offset=0)
    body, digest = blob[:-32], blob[-32:]
    (version, hlen) = struct.unpack("<II", body[4:12])
    if hashlib.sha256(body).digest() != digest:
        raise DataFormatError(f"{path}: checksum mismatch (file truncated or corrupt)", offset=len(blob) - 32)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}", offset=4)
    header = json.loads(body[12:12 + hlen].decode())
    pos = 12 + hlen
    layers = []
    ctor = {"affine": Affine, "conv2d": Conv2d, "relu": ReLU, "avgpool2": AvgPool2, "flatten": Flatten}
    for desc in header["layers"]:
        cls = ctor[desc["type"]]
        arrays = []
        for name in cls.params:
            shape = tuple(desc["shapes"][name])
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape))
            pos += 8 * count
        layers.append(cls(*arrays))
    if pos != len(body):
        raise DataFormatError(f"{path}: parameter payload size mismatch", offset=pos)
    return Model(header["arch_id"], layers, tuple(header["input_shape"]), header["num_classes"], header["meta"])
