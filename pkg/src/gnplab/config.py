"""INI-style run configuration.

Flat ``key = value`` pairs grouped in sections.  Attack sections are named
``[attack.<name>]``.  Numeric values may be written as fractions
(``epsilon = 8/255``); lists are comma separated.  See ``configs/default.ini``
for every key and its default.
"""
import configparser
import copy
import re
from fractions import Fraction
from pathlib import Path

from .attacks import AttackConfig
from .errors import ConfigError

DEFAULTS = {
    "run": {"seed": 0, "out_dir": "runs/default", "cache_dir": "", "model_dir": ""},
    "data": {
        "synth": True,
        "classes": 4,
        "size": 28,
        "n_train": 4000,
        "n_test": 2000,
        "contrast": 0.18,
        "noise": 0.30,
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
    },
    "zoo": {
        "archs": ["cnn-a", "cnn-b", "cnn-c", "cnn-d", "mlp-a", "mlp-b"],
        "source": "cnn-a",
        "epochs": 10,
        "batch_size": 32,
        "learning_rate": 0.01,
        "momentum": 0.9,
    },
    "select": {"n": 500},
    "eval": {"attacks": ["ifgsm", "ifgsm_gnp", "mifgsm", "mifgsm_gnp"], "epsilons": [4 / 255, 8 / 255, 16 / 255]},
    "ablate": {"base": "ifgsm", "epsilon": 8 / 255, "r_values": [0.005, 0.01, 0.02],
               "beta_values": [0.0, 0.4, 0.6, 0.8, 1.0, 1.2, 1.6]},
    "landscape": {"attacks": ["ifgsm", "ifgsm_gnp"], "epsilon": 8 / 255, "radii": [2 / 255, 4 / 255, 8 / 255],
                  "directions": 8, "sharpness_radius": 4 / 255, "n_images": 100},
    "attack": {"attacks": ["ifgsm", "ifgsm_gnp"], "trace": False},
    "attacks": {
        "fgsm": {"attack": "fgsm"},
        "ifgsm": {"attack": "ifgsm"},
        "ifgsm_gnp": {"attack": "ifgsm", "gnp": True},
        "mifgsm": {"attack": "mifgsm"},
        "mifgsm_gnp": {"attack": "mifgsm", "gnp": True},
        "dim": {"attack": "ifgsm", "dim_probability": 0.5},
        "dim_gnp": {"attack": "ifgsm", "dim_probability": 0.5, "gnp": True},
        "tim": {"attack": "ifgsm", "tim_kernel": 7},
        "tim_gnp": {"attack": "ifgsm", "tim_kernel": 7, "gnp": True},
    },
}

_ATTACK_FIELDS = {f: type(v) for f, v in AttackConfig().__dict__.items()}
_ATTACK_FIELDS.update(step_size=float, name=str)


def parse_number(text):
    text = str(text).strip()
    try:
        if "/" in text:
            return float(Fraction(text))
        if re.fullmatch(r"[+-]?\d+", text):
            return int(text)
        return float(text)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number: {text!r}") from None


def _coerce(value, like):
    if isinstance(like, bool):
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, list):
        items = [s.strip() for s in str(value).split(",") if s.strip()]
        if like and isinstance(like[0], (int, float)) and not isinstance(like[0], bool):
            return [float(parse_number(s)) for s in items]
        return items
    if isinstance(like, float):
        return float(parse_number(value))
    if isinstance(like, int):
        n = parse_number(value)
        if int(n) != n:
            raise ValueError(f"not an integer: {value!r}")
        return int(n)
    return str(value).strip()


def _line_of(text, section, key):
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return i
    return None


def load_config(path=None, text=None):
    """Parse a config file into a nested dict with defaults filled in."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None and text is None:
        return cfg
    if text is None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    for section in parser.sections():
        if section.startswith("attack."):
            name = section.split(".", 1)[1]
            target = cfg["attacks"].setdefault(name, {})
            fields = _ATTACK_FIELDS
        elif section in cfg and section != "attacks":
            target, fields = cfg[section], cfg[section]
        else:
            raise ConfigError(f"unknown config section [{section}] (line {_line_of(text, section, '') or '?'})")
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{section}] (line {_line_of(text, section, key)})")
            like = fields[key] if section.startswith("attack.") else cfg[section][key]
            if section.startswith("attack."):
                like = {bool: False, int: 0, float: 0.0, str: "", type(None): ""}.get(like, like)
            try:
                target[key] = _coerce(raw, like)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc} (line {_line_of(text, section, key)})") from None
    return cfg


def attack_config(cfg, name, **overrides):
    """Build the :class:`AttackConfig` for section ``[attack.<name>]``."""
    if name not in cfg["attacks"]:
        raise ConfigError(f"no attack named {name!r}; defined: {', '.join(sorted(cfg['attacks']))}")
    kw = dict(cfg["attacks"][name])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    kw.setdefault("seed", cfg["run"]["seed"])
    try:
        return AttackConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"attack {name!r}: {exc}") from None
