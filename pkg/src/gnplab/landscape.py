"""Loss-surface probes around (adversarial) images.

Directions are normalised in the L-infinity norm (max |d_i| = 1), so a
probe at radius ``r`` moves each pixel by at most ``r``, the same scale as
the attack budget.  Probe points are clipped to [0, 1].
"""
import csv
from dataclasses import dataclass

import numpy as np

from .attacks import per_image_grad_fn
from .errors import InputError
from .seeding import rng_for


@dataclass
class FlatnessProbe:
    center: np.ndarray  # (N, C, H, W)
    radii: np.ndarray  # signed radii, ascending, includes 0
    directions: np.ndarray  # (D, C, H, W) or (N, D, C, H, W)
    losses: np.ndarray  # (N, D, len(radii))
    center_loss: np.ndarray  # (N,)
    grad_norm: np.ndarray  # (N,) L2 norm of the input gradient at the centre

    def drop(self, radius):
        """Mean over directions of ``center_loss - loss`` at ``+radius``, per image."""
        j = int(np.flatnonzero(np.isclose(self.radii, radius))[0])
        return (self.center_loss[:, None] - self.losses[:, :, j]).mean(axis=1)


def _loss_fn(model):
    if callable(model) and not hasattr(model, "per_sample_loss"):
        return model
    return model.per_sample_loss


def gradient_norm_at(model, x, labels):
    """Per-image L2 norm of the loss gradient with respect to the image."""
    g = per_image_grad_fn(model)(np.asarray(x, dtype=np.float64), labels)
    flat = g.reshape(len(g), -1)
    return np.sqrt((flat * flat).sum(axis=1))


def random_directions(seed, n, shape, kind="sign"):
    """``n`` random L-infinity-unit directions: Rademacher signs or normalised Gaussians."""
    rng = rng_for(seed, f"landscape/directions/{kind}")
    if kind == "sign":
        return rng.choice((-1.0, 1.0), size=(n,) + tuple(shape))
    d = rng.standard_normal((n,) + tuple(shape))
    return d / np.abs(d.reshape(n, -1)).max(axis=1).reshape((n,) + (1,) * len(shape))


def _normalise(d):
    flat = np.abs(d.reshape(d.shape[0], -1)).max(axis=1)
    if np.any(flat == 0):
        raise InputError("zero probe direction")
    return d / flat.reshape((-1,) + (1,) * (d.ndim - 1))


def loss_slice(model, x, labels, directions, radii, grad_norm=True):
    """Loss at ``clip(x + s * d)`` for every direction d and signed radius s in (-radii, 0, +radii).

    ``directions`` is (D, C, H, W), shared by all images, or (N, D, C, H, W).
    Each direction is rescaled to unit L-infinity norm.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    radii = np.asarray(sorted(set(float(r) for r in radii)), dtype=np.float64)
    if radii.size == 0 or radii[0] < 0:
        raise InputError("radii must be non-negative")
    pos = radii[radii > 0]
    signed = np.concatenate([-pos[::-1], [0.0], pos])
    d = np.asarray(directions, dtype=np.float64)
    shared = d.ndim == x.ndim
    if shared:
        d = _normalise(d)
    else:
        d = np.stack([_normalise(di) for di in d])
    loss = _loss_fn(model)
    center = np.asarray(loss(x, labels), dtype=np.float64)
    n_dir = d.shape[0] if shared else d.shape[1]
    out = np.empty((len(x), n_dir, len(signed)))
    for k in range(n_dir):
        dk = d[k][None] if shared else d[:, k]
        for j, s in enumerate(signed):
            if s == 0.0:
                out[:, k, j] = center
            else:
                out[:, k, j] = loss(np.clip(x + s * dk, 0.0, 1.0), labels)
    gn = gradient_norm_at(model, x, labels) if grad_norm and hasattr(model, "loss_and_input_gradient") else None
    return FlatnessProbe(x, signed, d, out, center, gn)


def sharpness(model, x, labels, radius, n_samples=8, seed=0, per_image=False):
    """Mean positive loss drop ``[l(x) - l(clip(x + radius * d))]+`` over random sign directions.

    Adversarial examples sit near loss maxima, so the statistic measures
    how fast the loss falls away; 0 means perfectly flat (or a minimum).
    """
    if not radius > 0:
        raise InputError(f"radius must be > 0, got {radius}")
    x = np.asarray(x, dtype=np.float64)
    loss = _loss_fn(model)
    center = np.asarray(loss(x, labels), dtype=np.float64)
    dirs = random_directions(seed, n_samples, x.shape[1:])
    drops = np.zeros(len(x))
    for d in dirs:
        drops += np.maximum(center - loss(np.clip(x + radius * d[None], 0.0, 1.0), labels), 0.0)
    drops /= n_samples
    return drops if per_image else float(drops.mean())


def write_probe_csv(probe, path, image_ids=None):
    ids = np.arange(len(probe.center)) if image_ids is None else image_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "direction_id", "radius", "loss"])
        for i, img in enumerate(ids):
            for k in range(probe.losses.shape[1]):
                for j, s in enumerate(probe.radii):
                    w.writerow([int(img), k, repr(float(s)), repr(float(probe.losses[i, k, j]))])
