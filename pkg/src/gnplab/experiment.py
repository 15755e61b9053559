"""Glue shared by the CLI and the acceptance suite: data, zoo and sample selection from a config."""
from pathlib import Path

from . import zoo
from .data import cached_synth, load_idx, select_correctly_classified, synth_dataset
from .errors import ConfigError, UnknownModelError
from .seeding import derive_seed


def load_datasets(cfg):
    """(train, test) datasets described by ``cfg["data"]``."""
    d, seed = cfg["data"], cfg["run"]["seed"]
    if d["synth"]:
        knobs = {"contrast": d["contrast"], "noise": d["noise"]}
        data_seed = derive_seed(seed, "data")
        if cfg["run"]["cache_dir"]:
            make = lambda n, split: cached_synth(cfg["run"]["cache_dir"], data_seed, n, d["classes"], d["size"],
                                                 split, **knobs)
        else:
            make = lambda n, split: synth_dataset(data_seed, n, d["classes"], d["size"], split, **knobs)
        return make(d["n_train"], "train"), make(d["n_test"], "test")
    missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels") if not d[k]]
    if missing:
        raise ConfigError(f"[data] synth = false but no path given for: {', '.join(missing)}")
    for k in ("train_images", "train_labels", "test_images", "test_labels"):
        if not Path(d[k]).exists():
            raise ConfigError(f"[data] {k}: file not found: {d[k]}")
    train = load_idx(d["train_images"], d["train_labels"], d["classes"], "train")
    test = load_idx(d["test_images"], d["test_labels"], d["classes"], "test")
    return train, test


def zoo_specs(cfg, input_shape, num_classes):
    specs = {s.arch_id: s for s in zoo.default_zoo_specs(input_shape, num_classes)}
    unknown = [a for a in cfg["zoo"]["archs"] if a not in specs]
    if unknown:
        raise ConfigError(f"[zoo] unknown architectures {unknown}; available: {', '.join(specs)}")
    if cfg["zoo"]["source"] not in cfg["zoo"]["archs"]:
        raise ConfigError(f"[zoo] source {cfg['zoo']['source']!r} is not in archs")
    return [specs[a] for a in cfg["zoo"]["archs"]]


def model_dir(cfg):
    return Path(cfg["run"]["model_dir"] or Path(cfg["run"]["out_dir"]) / "models")


def train_zoo(cfg, train, test, log=None):
    """Build and train every configured architecture; returns {arch_id: Model}."""
    seed = cfg["run"]["seed"]
    z = cfg["zoo"]
    tc = zoo.TrainConfig(z["epochs"], z["batch_size"], z["learning_rate"], z["momentum"], derive_seed(seed, "train"))
    models = {}
    for spec in zoo_specs(cfg, train.image_shape, train.num_classes):
        res = zoo.train(zoo.build(spec, seed), train, tc, test=test, log=log)
        res.model.meta.update({"root_seed": seed, "dataset": train.source})
        models[spec.arch_id] = res.model
    return models


def save_zoo(cfg, models):
    out = model_dir(cfg)
    return {mid: (out / zoo.model_filename(mid, cfg["run"]["seed"]), zoo.save(m, out / zoo.model_filename(
        mid, cfg["run"]["seed"]))) for mid, m in models.items()}


def available_models(cfg):
    d, suffix = model_dir(cfg), f"-{cfg['run']['seed']}.bin"
    return sorted(p.name[: -len(suffix)] for p in d.glob(f"*{suffix}")) if d.exists() else []


def load_zoo(cfg, ids=None):
    """Load models by id from the model directory (files ``<id>-<seed>.bin``)."""
    ids = list(ids or cfg["zoo"]["archs"])
    if ids and cfg["zoo"]["source"] not in ids:
        ids.insert(0, cfg["zoo"]["source"])
    known = available_models(cfg)
    out = {}
    for mid in ids:
        if mid not in known:
            raise UnknownModelError(mid, known)
        out[mid] = zoo.load(model_dir(cfg) / zoo.model_filename(mid, cfg["run"]["seed"]))
    return out


def select_samples(cfg, models, test):
    return select_correctly_classified(list(models.values()), test, cfg["select"]["n"],
                                       derive_seed(cfg["run"]["seed"], "select"))


def source_and_targets(cfg, models):
    src = cfg["zoo"]["source"]
    if src not in models:
        raise UnknownModelError(src, models)
    return models[src], [m for k, m in models.items() if k != src]
