"""Command-line entry point: ``gnplab {train,attack,eval,ablate,landscape,report}``.

Every command reads an INI config (``--config``), applies flag overrides
(flags win), writes its outputs under ``--out-dir`` and finishes by writing
``manifest-<command>.json``.  ``--manifest FILE`` re-runs a previous command
from the fully resolved config recorded in that manifest.

Exit codes: 0 success, 1 unexpected error, 2 configuration or input error,
3 data/file format error, 4 numeric error (including training divergence),
5 capacity error (too few qualifying samples), 6 unknown model id.
"""
import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .attacks import attack as run_configured_attack
from .config import attack_config, load_config
from .data import write_idx_float64
from .errors import GnpLabError, InputError
from .experiment import (load_datasets, load_zoo, model_dir, save_zoo, select_samples, source_and_targets,
                         train_zoo)
from .harness import TransferReport, ablate, compare, evaluate_transfer, write_report
from .zoo import model_filename
from .landscape import gradient_norm_at, loss_slice, random_directions, sharpness, write_probe_csv

log = logging.getLogger("gnplab")

COMMANDS = ("train", "attack", "eval", "ablate", "landscape", "report")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def resolve_config(args):
    if args.manifest:
        man = json.loads(Path(args.manifest).read_text())
        if man.get("command") != args.command:
            raise InputError(f"manifest was written by {man.get('command')!r}, not {args.command!r}")
        cfg = man["config"]
    else:
        cfg = load_config(args.config)
    cfg = copy.deepcopy(cfg)
    run = cfg["run"]
    if args.seed is not None:
        run["seed"] = args.seed
    if args.out_dir is not None:
        run["out_dir"] = args.out_dir
    if args.model_dir is not None:
        run["model_dir"] = args.model_dir
    elif not run["model_dir"] or (args.manifest and args.out_dir is not None and args.command == "train"):
        # pin the model directory so a replay into another out-dir still finds (or rewrites) the zoo
        run["model_dir"] = str(Path(run["out_dir"]).resolve() / "models")
    if args.models:
        cfg["zoo"]["archs"] = [m.strip() for m in args.models.split(",") if m.strip()]
    if args.source:
        cfg["zoo"]["source"] = args.source
    run["workers"] = args.workers if args.workers is not None else run.get("workers") or (os.cpu_count() or 1)
    over = {
        "epsilon": args.epsilon,
        "steps": args.steps,
        "gnp_r": args.gnp_r,
        "gnp_beta": args.gnp_beta,
        "dim_probability": 0.5 if args.dim else None,
        "tim_kernel": args.tim_kernel,
    }
    for spec in cfg["attacks"].values():
        spec.update({k: v for k, v in over.items() if v is not None})
    if args.attack:
        chosen = {"fgsm": "fgsm", "ifgsm": "ifgsm", "mifgsm": "mifgsm"}[args.attack]
        cfg["attack"]["attacks"] = [chosen, f"{chosen}_gnp"] if chosen != "fgsm" else ["fgsm"]
        cfg["eval"]["attacks"] = list(cfg["attack"]["attacks"])
        cfg["ablate"]["base"] = chosen
        cfg["attacks"].setdefault("fgsm", {"attack": "fgsm"})
    if args.epsilon is not None:
        cfg["eval"]["epsilons"] = [args.epsilon]
        cfg["ablate"]["epsilon"] = args.epsilon
        cfg["landscape"]["epsilon"] = args.epsilon
    return cfg


def write_manifest(cfg, command, inputs, outputs, started):
    out = Path(cfg["run"]["out_dir"])
    man = {
        "command": command,
        "tool_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "config": cfg,
        "seeds": {"root": cfg["run"]["seed"]},
        "inputs": inputs,
        "outputs": {str(Path(p).relative_to(out) if Path(p).is_relative_to(out) else p): _sha256(p)
                    for p in outputs},
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out / f"manifest-{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _zoo_and_samples(cfg):
    models = load_zoo(cfg)
    _, test = load_datasets(cfg)
    return models, select_samples(cfg, models, test)


def _model_inputs(cfg, models):
    return {mid: _sha256(model_dir(cfg) / model_filename(mid, cfg["run"]["seed"])) for mid in models}


def cmd_train(cfg):
    train, test = load_datasets(cfg)
    models = train_zoo(cfg, train, test, log=log.info)
    saved = save_zoo(cfg, models)
    outputs = []
    for mid, (path, digest) in saved.items():
        log.info("%s: test accuracy %.4f -> %s", mid, models[mid].meta["test_accuracy"], path)
        outputs += [path, path.with_name(path.name[:-4] + ".meta.json")]
    print(f"trained {len(models)} models into {outputs[0].parent if outputs else '-'}")
    return {"train_data": train.fingerprint(), "test_data": test.fingerprint()}, outputs


def cmd_attack(cfg):
    models, samples = _zoo_and_samples(cfg)
    source, _ = source_and_targets(cfg, models)
    out = Path(cfg["run"]["out_dir"]) / "adversarial"
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name in cfg["attack"]["attacks"]:
        acfg = attack_config(cfg, name)
        batch = run_configured_attack(source, samples.images, samples.labels, acfg,
                                      trace=cfg["attack"]["trace"], workers=cfg["run"]["workers"])
        stem = out / f"{name}-eps{round(acfg.epsilon * 255)}"
        write_idx_float64(f"{stem}.originals.idx", batch.originals)
        write_idx_float64(f"{stem}.perturbed.idx", batch.perturbed)
        Path(f"{stem}.labels.idx").write_bytes(
            b"\x00\x00\x08\x01" + len(batch).to_bytes(4, "big") + batch.labels.astype(np.uint8).tobytes())
        meta = {
            "attack": name,
            "config": batch.config,
            "source_model": source.arch_id,
            "n": len(batch),
            "white_box_success": batch.success.astype(int),
            "white_box_asr": float(batch.success.mean()),
            "max_linf": float(batch.linf().max()) if len(batch) else 0.0,
            "zero_gradient_fallbacks": batch.fallback_count,
            "trace": batch.trace,
        }
        Path(f"{stem}.meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=_json_default))
        outputs += [Path(f"{stem}.{s}") for s in ("originals.idx", "perturbed.idx", "labels.idx", "meta.json")]
        print(f"{acfg.attack_id:<16} eps={acfg.epsilon * 255:.0f}/255 white-box ASR {batch.success.mean():.4f}")
    return {"models": _model_inputs(cfg, models), "samples": samples.fingerprint()}, outputs


def cmd_eval(cfg):
    models, samples = _zoo_and_samples(cfg)
    source, targets = source_and_targets(cfg, models)
    attacks = [attack_config(cfg, name, epsilon=eps) for name in cfg["eval"]["attacks"]
               for eps in cfg["eval"]["epsilons"]]
    rep = evaluate_transfer(source, targets, attacks, samples, workers=cfg["run"]["workers"],
                            seeds={"root": cfg["run"]["seed"]})
    out = Path(cfg["run"]["out_dir"]) / "reports"
    paths = [write_report(rep.to_json(), out, "transfer", "json"), write_report(rep.to_csv(), out, "transfer", "csv")]
    print(rep.format_table())
    return {"models": _model_inputs(cfg, models), "samples": samples.fingerprint()}, paths


def cmd_ablate(cfg):
    models, samples = _zoo_and_samples(cfg)
    source, targets = source_and_targets(cfg, models)
    a = cfg["ablate"]
    base = attack_config(cfg, a["base"], epsilon=a["epsilon"], gnp=False)
    grid = ablate(source, targets, base, a["r_values"], a["beta_values"], samples, workers=cfg["run"]["workers"])
    out = Path(cfg["run"]["out_dir"]) / "reports"
    paths = [write_report(grid.to_json(), out, "ablation", "json"),
             write_report(grid.to_long_csv(), out, "ablation", "csv")]
    print(grid.to_long_csv(), end="")
    print(f"baseline (plain) mean target ASR: {grid.baseline:.4f}")
    return {"models": _model_inputs(cfg, models), "samples": samples.fingerprint()}, paths


def cmd_landscape(cfg):
    models, samples = _zoo_and_samples(cfg)
    source, _ = source_and_targets(cfg, models)
    lc = cfg["landscape"]
    n = min(lc["n_images"], len(samples))
    x, y = samples.images[:n], samples.labels[:n]
    dirs = random_directions(cfg["run"]["seed"], lc["directions"], x.shape[1:])
    out = Path(cfg["run"]["out_dir"]) / "landscape"
    out.mkdir(parents=True, exist_ok=True)
    summary, paths = {}, []
    for name in lc["attacks"]:
        acfg = attack_config(cfg, name, epsilon=lc["epsilon"])
        adv = run_configured_attack(source, x, y, acfg, workers=cfg["run"]["workers"])
        probe = loss_slice(source, adv.perturbed, y, dirs, lc["radii"])
        p = out / f"slice-{name}.csv"
        write_probe_csv(probe, p)
        paths.append(p)
        summary[name] = {
            "attack_id": acfg.attack_id,
            "mean_grad_norm": float(gradient_norm_at(source, adv.perturbed, y).mean()),
            "mean_sharpness": sharpness(source, adv.perturbed, y, lc["sharpness_radius"], lc["directions"],
                                        cfg["run"]["seed"]),
            "mean_center_loss": float(probe.center_loss.mean()),
        }
        print(f"{acfg.attack_id:<16} grad-norm {summary[name]['mean_grad_norm']:.4g} "
              f"sharpness {summary[name]['mean_sharpness']:.4g}")
    sp = out / "summary.json"
    sp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    paths.append(sp)
    return {"models": _model_inputs(cfg, models), "samples": samples.fingerprint()}, paths


def cmd_report(cfg, files):
    if not files:
        raise InputError("report needs one or two transfer report JSON files")
    reps = [TransferReport.from_dict(json.loads(Path(f).read_text())) for f in files]
    if len(reps) == 1:
        print(reps[0].format_table())
        return {"reports": {str(f): _sha256(f) for f in files}}, []
    c = compare(reps[0], reps[1])
    print("delta (a - b), mean target ASR per row:")
    for (a, e), d in zip(c.rows, c.mean_target_delta):
        print(f"  {a:<20} eps={e * 255:.0f}/255  {d * 100:+.2f} pts")
    print(f"summary: {c.summary * 100:+.2f} pts")
    out = Path(cfg["run"]["out_dir"]) / "reports"
    body = json.dumps({"rows": [{"attack": a, "epsilon": e} for a, e in c.rows], "columns": c.columns,
                       "delta": c.delta, "mean_target_delta": c.mean_target_delta, "summary": c.summary},
                      indent=2, sort_keys=True, default=_json_default) + "\n"
    return {"reports": {str(f): _sha256(f) for f in files}}, [write_report(body, out, "compare", "json")]


def build_parser():
    p = argparse.ArgumentParser(prog="gnplab", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"gnplab {__version__} ({kernels.BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="INI config file (defaults are built in)")
        s.add_argument("--manifest", type=Path, help="re-run from a manifest written by this command")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int, help="worker threads (default: all cores)")
        s.add_argument("--out-dir")
        s.add_argument("--model-dir")
        s.add_argument("--source", help="source model id (default from [zoo] source)")
        s.add_argument("--models", help="comma-separated model ids (default from [zoo] archs)")
        s.add_argument("--epsilon", type=_fraction)
        s.add_argument("--steps", type=int)
        s.add_argument("--gnp-r", type=float)
        s.add_argument("--gnp-beta", type=float)
        s.add_argument("--attack", choices=("fgsm", "ifgsm", "mifgsm"))
        s.add_argument("--dim", action="store_true", help="enable input diversity (p=0.5)")
        s.add_argument("--tim-kernel", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            s.add_argument("files", nargs="*", type=Path)
    return p


def _fraction(text):
    from .config import parse_number
    try:
        return float(parse_number(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        cfg = resolve_config(args)
        if args.command == "report":
            inputs, outputs = cmd_report(cfg, args.files)
        else:
            inputs, outputs = globals()[f"cmd_{args.command}"](cfg)
        man = write_manifest(cfg, args.command, inputs, outputs, started)
        log.info("manifest: %s", man)
    except GnpLabError as exc:
        print(f"gnplab {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
