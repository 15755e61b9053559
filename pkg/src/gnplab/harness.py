"""Transfer experiments: ASR matrices, ablation grids and report comparison.

A :class:`TransferReport` has one row per (attack id, epsilon) and one
column per model; the source column is the white-box one.  "Mean target
ASR" always averages the non-source columns only.
"""
import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import attack
from .errors import ComparisonError, InputError

REPORT_SCHEMA = 1


def asr(model, adv):
    """Fraction of perturbed images that ``model`` does not label correctly."""
    if len(adv) == 0:
        raise InputError("cannot compute ASR of an empty batch")
    return float(np.mean(model.predict(adv.perturbed) != adv.labels))


@dataclass
class TransferReport:
    rows: list  # [(attack_id, epsilon), ...]
    columns: list  # model ids, source first
    source: str
    cells: np.ndarray  # (len(rows), len(columns)) ASR values
    n_samples: int
    seeds: dict = field(default_factory=dict)
    configs: list = field(default_factory=list)
    samples_fingerprint: str = ""

    def __post_init__(self):
        self.rows = [(str(a), float(e)) for a, e in self.rows]
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.shape != (len(self.rows), len(self.columns)):
            raise InputError("report cells do not match rows x columns")
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() > 1):
            raise InputError("ASR values must lie in [0, 1]")

    @property
    def target_columns(self):
        return [i for i, c in enumerate(self.columns) if c != self.source]

    def mean_target_asr(self):
        """Per-row mean ASR over target (non-source) models."""
        return self.cells[:, self.target_columns].mean(axis=1)

    def row_index(self, attack_id, epsilon):
        for i, (a, e) in enumerate(self.rows):
            if a == attack_id and np.isclose(e, epsilon):
                return i
        raise KeyError((attack_id, epsilon))

    def to_dict(self):
        return {
            "schema": REPORT_SCHEMA,
            "kind": "transfer",
            "source": self.source,
            "columns": list(self.columns),
            "rows": [{"attack": a, "epsilon": e} for a, e in self.rows],
            "asr": [[float(v) for v in row] for row in self.cells],
            "mean_target_asr": [float(v) for v in self.mean_target_asr()],
            "n_samples": int(self.n_samples),
            "seeds": self.seeds,
            "configs": self.configs,
            "samples_fingerprint": self.samples_fingerprint,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != REPORT_SCHEMA:
            raise InputError(f"unsupported report schema {d.get('schema')}")
        return cls(
            [(r["attack"], r["epsilon"]) for r in d["rows"]],
            d["columns"],
            d["source"],
            np.array(d["asr"], dtype=np.float64).reshape(len(d["rows"]), len(d["columns"])),
            d["n_samples"],
            d.get("seeds", {}),
            d.get("configs", []),
            d.get("samples_fingerprint", ""),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "epsilon"] + [c + ("*" if c == self.source else "") for c in self.columns]
                   + ["mean_target"])
        for (a, e), row, m in zip(self.rows, self.cells, self.mean_target_asr()):
            w.writerow([a, repr(e)] + [f"{v:.6f}" for v in row] + [f"{m:.6f}"])
        return buf.getvalue()

    def format_table(self):
        head = f"{'attack':<22}{'eps':>8}" + "".join(
            f"{c + ('*' if c == self.source else ''):>9}" for c in self.columns) + f"{'mean':>9}"
        lines = [head, "-" * len(head)]
        for (a, e), row, m in zip(self.rows, self.cells, self.mean_target_asr()):
            lines.append(f"{a:<22}{e * 255:>6.0f}/255"[:30] + "".join(f"{v * 100:>8.2f}%" for v in row)
                         + f"{m * 100:>8.2f}%")
        return "\n".join(lines)


def evaluate_transfer(source, targets, attacks, samples, workers=1, seeds=None):
    """Craft adversarial examples on ``source`` once per config; score them on every model.

    ``samples`` should already be restricted to images that all models
    classify correctly (see :func:`gnplab.data.select_correctly_classified`).
    """
    models = [source] + [t for t in targets if t is not source]
    ids = [m.arch_id for m in models]
    if len(set(ids)) != len(ids):
        raise InputError(f"duplicate model ids in {ids}")
    rows, cells, configs = [], [], []
    for cfg in attacks:
        adv = attack(source, samples.images, samples.labels, cfg, workers=workers)
        rows.append((cfg.attack_id, cfg.epsilon))
        cells.append([asr(m, adv) for m in models])
        configs.append(cfg.to_dict())
    return TransferReport(rows, ids, source.arch_id, np.array(cells).reshape(len(rows), len(ids)),
                          len(samples), dict(seeds or {}), configs, samples.fingerprint())


@dataclass
class AblationGrid:
    r_values: list
    beta_values: list
    cells: np.ndarray  # (len(r_values), len(beta_values)) mean target ASR
    baseline: float  # plain-gradient attack, same samples and seeds
    source_asr: np.ndarray = None
    base_config: dict = field(default_factory=dict)
    n_samples: int = 0

    def cell(self, r, beta):
        i = int(np.flatnonzero(np.isclose(self.r_values, r))[0])
        j = int(np.flatnonzero(np.isclose(self.beta_values, beta))[0])
        return float(self.cells[i, j])

    def to_long_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "beta", "lambda", "mean_target_asr", "source_asr"])
        for i, r in enumerate(self.r_values):
            for j, b in enumerate(self.beta_values):
                src = "" if self.source_asr is None else f"{self.source_asr[i, j]:.6f}"
                w.writerow([repr(r), repr(b), repr(r * b), f"{self.cells[i, j]:.6f}", src])
        return buf.getvalue()

    def to_dict(self):
        return {
            "schema": REPORT_SCHEMA,
            "kind": "ablation",
            "r_values": list(self.r_values),
            "beta_values": list(self.beta_values),
            "mean_target_asr": [[float(v) for v in row] for row in self.cells],
            "source_asr": None if self.source_asr is None else [[float(v) for v in row] for row in self.source_asr],
            "baseline_mean_target_asr": float(self.baseline),
            "base_config": self.base_config,
            "n_samples": int(self.n_samples),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _unique(values):
    out = []
    for v in values:
        if not any(np.isclose(v, u, rtol=0, atol=1e-15) for u in out):
            out.append(float(v))
    return out


def ablate(source, targets, base_cfg, r_values, beta_values, samples, workers=1):
    """Mean target ASR of ``base_cfg`` + GNP for every (r, beta); duplicates collapse."""
    from dataclasses import replace

    r_values, beta_values = _unique(r_values), _unique(beta_values)
    if not r_values or not beta_values:
        raise InputError("ablation grids must be non-empty")
    models = [source] + [t for t in targets if t is not source]
    cells = np.zeros((len(r_values), len(beta_values)))
    src = np.zeros_like(cells)
    for i, r in enumerate(r_values):
        for j, b in enumerate(beta_values):
            cfg = replace(base_cfg, gnp=True, gnp_r=r, gnp_beta=b, name=None)
            adv = attack(source, samples.images, samples.labels, cfg, workers=workers)
            scores = [asr(m, adv) for m in models]
            src[i, j], cells[i, j] = scores[0], float(np.mean(scores[1:]))
    plain = replace(base_cfg, gnp=False, name=None)
    adv = attack(source, samples.images, samples.labels, plain, workers=workers)
    baseline = float(np.mean([asr(m, adv) for m in models[1:]]))
    return AblationGrid(r_values, beta_values, cells, baseline, src, plain.to_dict(), len(samples))


@dataclass
class Comparison:
    rows: list
    columns: list
    delta: np.ndarray  # a - b per cell
    mean_target_delta: np.ndarray  # per row
    summary: float  # mean of mean_target_delta


def compare(a, b):
    """Cell-wise ``a - b`` for two reports over identical rows, columns and samples."""
    if a.columns != b.columns or a.source != b.source:
        raise ComparisonError("reports have different model columns")
    if len(a.rows) != len(b.rows) or any(
        ea != eb or not np.isclose(xa, xb) for (ea, xa), (eb, xb) in zip(a.rows, b.rows)
    ):
        raise ComparisonError("reports have different rows")
    if a.n_samples != b.n_samples or a.samples_fingerprint != b.samples_fingerprint:
        raise ComparisonError("reports were computed on different samples")
    delta = a.cells - b.cells
    mt = a.mean_target_asr() - b.mean_target_asr()
    return Comparison(list(a.rows), list(a.columns), delta, mt, float(mt.mean()) if mt.size else 0.0)


def compare_rows(report, attack_a, attack_b, epsilon):
    """Mean-target-ASR difference between two attack rows of one report."""
    m = report.mean_target_asr()
    return float(m[report.row_index(attack_a, epsilon)] - m[report.row_index(attack_b, epsilon)])


def write_report(text, out_dir, stem, suffix):
    """Write ``text`` to ``<stem>-<sha256[:12]>.<suffix>``; existing files are never overwritten."""
    digest = hashlib.sha256(text.encode()).hexdigest()[:12]
    path = Path(out_dir) / f"{stem}-{digest}.{suffix}"
    path.parent.mkdir(parents=True, exist_ok=True)
    if not path.exists():
        path.write_text(text)
    return path
