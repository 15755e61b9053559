"""L-infinity gradient attacks and the gradient-norm-penalty (GNP) gradient.

Baselines: :func:`fgsm`, :func:`ifgsm`, :func:`mifgsm`.  The general engine
:func:`run_attack` composes a :class:`GradientTransform` in a fixed order::

    input diversity (DIM) -> gradient source (plain | gnp) -> TIM smoothing -> momentum

then takes a signed step of size ``alpha`` and projects back onto the
epsilon-ball and [0, 1].

Gradient sources work on per-image gradients (gradient of the *summed*
batch loss), so an image's result does not depend on what else is in the
batch.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ConfigError, InputError, NumericError
from .seeding import rng_for

ZERO_GRAD_TOL = 1e-12
ATTACKS = ("fgsm", "ifgsm", "mifgsm")


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    """Every attack hyperparameter.

    ``step_size`` of ``None`` means epsilon / steps.  ``momentum`` is the
    decay factor mu and only matters for ``attack="mifgsm"``.  GNP uses
    neighbourhood step ``gnp_r`` and coefficient ``gnp_beta``; the penalty
    weight on the gradient norm is ``gnp_lambda = gnp_beta * gnp_r``.
    ``dim_probability`` 0 and ``tim_kernel`` 0 disable those stages.
    """

    attack: str = "ifgsm"
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: float = None
    momentum: float = 1.0
    gnp: bool = False
    gnp_r: float = 0.01
    gnp_beta: float = 0.8
    dim_probability: float = 0.0
    dim_low: float = 0.85
    dim_high: float = 1.0
    tim_kernel: int = 0
    seed: int = 0
    name: str = None

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}; expected one of {', '.join(ATTACKS)}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps}")
        if self.step_size is not None and self.step_size < 0:
            raise ConfigError("step_size must be non-negative")
        if self.momentum < 0:
            raise ConfigError("momentum decay must be >= 0")
        if self.gnp and not self.gnp_r > 0:
            raise ConfigError("gnp_r must be > 0")
        if self.gnp_beta < 0:
            raise ConfigError("gnp_beta must be >= 0")
        if not 0.0 <= self.dim_probability <= 1.0:
            raise ConfigError("dim_probability must lie in [0, 1]")
        if not 0.0 < self.dim_low <= self.dim_high <= 1.0:
            raise ConfigError("need 0 < dim_low <= dim_high <= 1")
        if self.tim_kernel < 0 or (self.tim_kernel and self.tim_kernel % 2 == 0):
            raise ConfigError(f"tim_kernel must be 0 or odd, got {self.tim_kernel}")

    @property
    def effective_steps(self):
        return 1 if self.attack == "fgsm" else int(self.steps)

    @property
    def alpha(self):
        if self.attack == "fgsm":
            return self.epsilon
        return self.epsilon / self.steps if self.step_size is None else self.step_size

    @property
    def gnp_lambda(self):
        return self.gnp_beta * self.gnp_r

    @property
    def attack_id(self):
        if self.name:
            return self.name
        parts = [{"fgsm": "FGSM", "ifgsm": "I-FGSM", "mifgsm": "MI-FGSM"}[self.attack]]
        if self.dim_probability > 0:
            parts.append("DIM")
        if self.tim_kernel > 1:
            parts.append("TIM")
        if self.gnp:
            parts.append("GNP")
        return "+".join(parts)

    def pipeline(self):
        return GradientTransform(
            source="gnp" if self.gnp else "plain",
            gnp_r=self.gnp_r,
            gnp_beta=self.gnp_beta,
            dim=(self.dim_probability, self.dim_low, self.dim_high) if self.dim_probability > 0 else None,
            tim_kernel=self.tim_kernel if self.tim_kernel > 1 else 0,
            momentum=self.momentum if self.attack == "mifgsm" else None,
        )

    def to_dict(self):
        d = asdict(self)
        d["alpha"] = self.alpha
        d["gnp_lambda"] = self.gnp_lambda
        d["attack_id"] = self.attack_id
        return d


@dataclass(frozen=True)
class GradientTransform:
    """Stages of one attack iteration; the order is fixed, see module docstring."""

    source: str = "plain"
    gnp_r: float = 0.01
    gnp_beta: float = 0.8
    dim: tuple = None  # (probability, low fraction, high fraction)
    tim_kernel: int = 0
    momentum: float = None

    def __post_init__(self):
        if self.source not in ("plain", "gnp"):
            raise ConfigError(f"gradient source must be 'plain' or 'gnp', got {self.source!r}")
        if self.source == "gnp" and not (self.gnp_r > 0 and self.gnp_beta >= 0):
            raise ConfigError("gnp stage needs r > 0 and beta >= 0")
        if self.tim_kernel and self.tim_kernel % 2 == 0:
            raise ConfigError("tim_kernel must be odd")
        if self.momentum is not None and self.momentum < 0:
            raise ConfigError("momentum decay must be >= 0")


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    success: np.ndarray  # source model misclassifies the perturbed image
    config: dict = field(default_factory=dict)
    trace: list = None
    fallback_count: np.ndarray = None  # per image: zero-gradient fallbacks taken

    def __len__(self):
        return len(self.labels)

    def linf(self):
        d = (self.perturbed - self.originals).reshape(len(self), -1)
        return np.abs(d).max(axis=1) if d.size else np.zeros(len(self))

    def check_constraints(self, epsilon, tol=1e-9):
        ok_ball = self.linf() <= epsilon + tol
        ok_range = (self.perturbed.reshape(len(self), -1).min(axis=1) >= 0.0) & (
            self.perturbed.reshape(len(self), -1).max(axis=1) <= 1.0
        )
        return ok_ball & ok_range


# -- gradient plumbing --------------------------------------------------------------


def per_image_grad_fn(model):
    """``f(x, labels) -> per-image loss gradient`` for a model or a bare callable."""
    if callable(model) and not hasattr(model, "loss_and_input_gradient"):
        return model
    return lambda x, y: model.loss_and_input_gradient(x, y, reduction="sum").input_grad


def _per_image_norm(g, ord):
    flat = g.reshape(g.shape[0], -1)
    if ord == 1:
        return np.abs(flat).sum(axis=1)
    return np.sqrt((flat * flat).sum(axis=1))


def _bcast(v, like):
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def gnp_gradient(model, x, labels, r, beta, return_flags=False):
    """Gradient of the norm-penalised loss via one extra gradient evaluation.

    Returns ``(1 + beta) * g1 - beta * g2`` with ``g1 = grad l(x)`` and
    ``g2 = grad l(x + r * g1 / ||g1||_2)``, norms per image.  The probe
    point is not clipped.  Images whose ``||g1||_2`` is below 1e-12 get the
    plain gradient ``g1``; with ``return_flags`` a boolean mask of those
    images is returned too.
    """
    if not r > 0:
        raise ConfigError(f"gnp r must be > 0, got {r}")
    if beta < 0:
        raise ConfigError(f"gnp beta must be >= 0, got {beta}")
    grad = per_image_grad_fn(model)
    x = np.asarray(x, dtype=np.float64)
    g1 = grad(x, labels)
    norm = _per_image_norm(g1, 2)
    flat = norm < ZERO_GRAD_TOL
    step = np.where(flat, 0.0, r / np.where(flat, 1.0, norm))
    g2 = grad(x + _bcast(step, g1) * g1, labels)
    out = (1.0 + beta) * g1 - beta * g2
    if flat.any():
        out[flat] = g1[flat]
    return (out, flat) if return_flags else out


def fgsm(model, images, labels, epsilon):
    """One signed step of size epsilon, clipped to [0, 1]."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    x = np.asarray(images, dtype=np.float64)
    g = per_image_grad_fn(model)(x, labels)
    adv = np.clip(x + epsilon * np.sign(g), 0.0, 1.0)
    return _finish(model, x, adv, labels, {"attack": "fgsm", "epsilon": epsilon})


def ifgsm(model, images, labels, cfg):
    """Iterative FGSM: ``x <- project(x + alpha * sign(grad))`` for ``cfg.steps`` steps."""
    x0 = np.asarray(images, dtype=np.float64)
    grad = per_image_grad_fn(model)
    x = x0.copy()
    for _ in range(int(cfg.steps)):
        x = kernels.sign_step_project(x, grad(x, labels), x0, cfg.alpha, cfg.epsilon)
    return _finish(model, x0, x, labels, cfg.to_dict())


def mifgsm(model, images, labels, cfg):
    """Momentum iterative FGSM with per-image L1-normalised gradient accumulation."""
    x0 = np.asarray(images, dtype=np.float64)
    grad = per_image_grad_fn(model)
    x = x0.copy()
    acc = np.zeros_like(x0)
    for _ in range(int(cfg.steps)):
        g = grad(x, labels)
        acc = cfg.momentum * acc + _l1_normalise(g)[0]
        x = kernels.sign_step_project(x, acc, x0, cfg.alpha, cfg.epsilon)
    return _finish(model, x0, x, labels, cfg.to_dict())


def _l1_normalise(g):
    n = _per_image_norm(g, 1)
    small = n < ZERO_GRAD_TOL
    return g / _bcast(np.where(small, 1.0, n), g), small


def _finish(model, x0, adv, labels, config, trace=None, fallbacks=None):
    labels = np.asarray(labels)
    if hasattr(model, "predict"):
        success = model.predict(adv) != labels
    else:
        success = np.zeros(len(labels), dtype=bool)
    return AdversarialBatch(x0, adv, labels, success, dict(config), trace, fallbacks)


# -- input diversity and translation smoothing ---------------------------------------


def _resize_index(size, new):
    """Nearest-neighbour source index for each of ``new`` output positions."""
    return (np.arange(new) * size) // new


def _dim_params(rng, h, w, p, low, high):
    """(apply, s_h, s_w, top, left) for one image."""
    apply = rng.random() < p
    lo_h, hi_h = max(1, int(math.floor(low * h))), int(math.floor(high * h))
    s_h = int(rng.integers(lo_h, hi_h + 1))
    s_w = max(1, int(round(s_h * w / h)))
    top = int(rng.integers(0, h - s_h + 1))
    left = int(rng.integers(0, w - s_w + 1))
    return apply, s_h, s_w, top, left


def _dim_check(h, p, low, high):
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"DIM probability must lie in [0, 1], got {p}")
    if not 0.0 < low <= high <= 1.0 or int(math.floor(low * h)) > int(math.floor(high * h)):
        raise ConfigError(f"DIM resize bounds [{low}, {high}] are invalid for size {h}")


class _DimPlan:
    """Per-image resize-and-pad maps plus their adjoint, for one iteration."""

    def __init__(self, shape, p, low, high, seeds):
        _, _, h, w = shape
        _dim_check(h, p, low, high)
        self.h, self.w = h, w
        self.maps = [_dim_params(rng_for(s, "dim"), h, w, p, low, high) for s in seeds]

    def apply(self, x):
        out = x.copy()
        for i, (on, sh, sw, top, left) in enumerate(self.maps):
            if not on:
                continue
            ri, ci = _resize_index(self.h, sh), _resize_index(self.w, sw)
            out[i] = 0.0
            out[i, :, top:top + sh, left:left + sw] = x[i][:, ri][:, :, ci]
        return out

    def adjoint(self, g):
        out = g.copy()
        for i, (on, sh, sw, top, left) in enumerate(self.maps):
            if not on:
                continue
            ri, ci = _resize_index(self.h, sh), _resize_index(self.w, sw)
            acc = np.zeros_like(g[i])
            patch = g[i, :, top:top + sh, left:left + sw]
            tmp = np.zeros((g.shape[1], self.h, sw))
            np.add.at(tmp, (slice(None), ri), patch)
            np.add.at(acc, (slice(None), slice(None), ci), tmp)
            out[i] = acc
        return out


def dim_transform(images, p, seed, resize_low=0.85, resize_high=1.0, image_ids=None):
    """Random resize-and-pad input diversity.

    With probability ``p`` per image, nearest-neighbour downscale to a side
    length drawn from [resize_low*H, resize_high*H] and zero-pad back to H x W
    at a random offset.  Randomness comes from ``(seed, image id)`` so an
    image's transform does not depend on its batch neighbours.
    """
    images = np.asarray(images, dtype=np.float64)
    ids = np.arange(len(images)) if image_ids is None else image_ids
    plan = _DimPlan(images.shape, p, resize_low, resize_high, [_image_seed(seed, i) for i in ids])
    return plan.apply(images)


def _image_seed(seed, image_id, step=0):
    return (int(seed) * 1_000_003 + int(image_id)) * 10_007 + int(step)


def gaussian_kernel(width):
    if width < 1 or width % 2 == 0:
        raise ConfigError(f"kernel width must be a positive odd integer, got {width}")
    sigma = width / 6.0
    ax = np.arange(width) - width // 2
    k1 = np.exp(-(ax**2) / (2.0 * sigma**2))
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def tim_smooth(grad, kernel_width):
    """Per-channel 'same' convolution of the gradient with a normalised Gaussian (sigma = width/6)."""
    kern = gaussian_kernel(kernel_width)
    g = np.asarray(grad, dtype=np.float64)
    if kernel_width == 1:
        return g.copy()
    pad = kernel_width // 2
    h, w = g.shape[-2:]
    gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros_like(g)
    for i in range(kernel_width):
        for j in range(kernel_width):
            out += kern[i, j] * gp[:, :, i:i + h, j:j + w]
    return out


def project_clip(perturbed, originals, epsilon):
    """Clamp to the L-infinity ball of radius epsilon around ``originals``, then to [0, 1]."""
    perturbed = np.asarray(perturbed, dtype=np.float64)
    originals = np.asarray(originals, dtype=np.float64)
    if perturbed.shape != originals.shape:
        raise InputError(f"shape mismatch {perturbed.shape} vs {originals.shape}")
    return np.clip(np.clip(perturbed, originals - epsilon, originals + epsilon), 0.0, 1.0)


# -- the general engine ------------------------------------------------------------


def _run_chunk(pipeline, cfg, grad, x0, labels, ids, want_trace):
    x = x0.copy()
    acc = np.zeros_like(x0) if pipeline.momentum is not None else None
    fallbacks = np.zeros(len(x0), dtype=np.int64)
    trace = []
    for t in range(cfg.effective_steps):
        if pipeline.dim is not None:
            p, low, high = pipeline.dim
            plan = _DimPlan(x.shape, p, low, high, [_image_seed(cfg.seed, i, t) for i in ids])

            def source(z, y, plan=plan):
                return plan.adjoint(grad(plan.apply(z), y))
        else:
            source = grad
        if pipeline.source == "gnp":
            g, flat = gnp_gradient(source, x, labels, pipeline.gnp_r, pipeline.gnp_beta, return_flags=True)
            fallbacks += flat
        else:
            g = source(x, labels)
        if pipeline.tim_kernel:
            g = tim_smooth(g, pipeline.tim_kernel)
        if acc is not None:
            gn, small = _l1_normalise(g)
            fallbacks += small
            acc = pipeline.momentum * acc + gn
            g = acc
        x = kernels.sign_step_project(x, g, x0, cfg.alpha, cfg.epsilon)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite iterate at iteration {t}")
        if want_trace:
            trace.append({"iteration": t, "grad_l2": _per_image_norm(g, 2)})
    return x, fallbacks, trace


def run_attack(pipeline, cfg, model, images, labels, trace=False, workers=1, chunk_size=100):
    """Run ``cfg.effective_steps`` iterations of ``pipeline`` from ``images``.

    Images are processed in fixed chunks of ``chunk_size``; ``workers``
    threads share the chunks.  Chunking is independent of ``workers`` and
    every random draw is keyed by image id, so results do not depend on the
    worker count.
    """
    x0 = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(x0) != len(labels):
        raise InputError(f"{len(x0)} images but {len(labels)} labels")
    grad = per_image_grad_fn(model)
    n = len(x0)
    bounds = [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]

    def work(b):
        s, e = b
        return _run_chunk(pipeline, cfg, grad, x0[s:e], labels[s:e], np.arange(s, e), trace)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, bounds))
    else:
        results = [work(b) for b in bounds]
    adv = np.concatenate([r[0] for r in results]) if results else x0.copy()
    fallbacks = np.concatenate([r[1] for r in results]) if results else np.zeros(0, dtype=np.int64)
    tr = None
    if trace and results:
        tr = [
            {"iteration": t, "grad_l2": np.concatenate([r[2][t]["grad_l2"] for r in results])}
            for t in range(cfg.effective_steps)
        ]
    config = dict(cfg.to_dict(), pipeline=asdict(pipeline))
    return _finish(model, x0, adv, labels, config, tr, fallbacks)


def attack(model, images, labels, cfg, **kw):
    """Run the attack described by ``cfg`` through :func:`run_attack`."""
    return run_attack(cfg.pipeline(), cfg, model, images, labels, **kw)


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
