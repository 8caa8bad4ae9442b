"""Command-line entry point for experiment workflows.

Subcommands: gen-data, train, eval, ablate, sweep, inspect-ckpt,
validate-feat. Every run writes a manifest (resolved config, seeds,
tool version, input/output hashes) beside its outputs; no timestamps,
so reruns with identical inputs are byte-identical.

Exit codes: 0 success, 2 validation error, 3 runtime divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (default_names, generate_synthetic, load_dataset,
                   save_dataset, split_pairs)
from .errors import ConfigError, DivergenceError, VapsError
from .evalmetrics import curve_rows
from .featfile import labels_path, validate_features
from .pipeline import (RunConfig, ablation_variants, evaluate, load_checkpoint,
                       restore, save_checkpoint, train)


@dataclass
class GenConfig:
    """Knobs of the synthetic dataset generator."""

    n_attrs: int = 8
    n_objs: int = 10
    seen_fraction: float = 0.6
    val_fraction: float = 0.5
    samples_per_pair: int = 20
    eval_samples_per_pair: int = 5
    sigma_n: float = 0.1
    seed: int = 0
    d: int = 32
    n_tokens: int = 8
    d_lat: int = 16
    basis_std: float = 0.1
    noise_corr: float = 0.9
    style_rank: int | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "GenConfig":
        extra = set(obj) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown generator config fields: {sorted(extra)}")
        return cls(**obj)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_manifest(out_base: Path, command: str, config: dict,
                    inputs: dict[str, Path], outputs: dict[str, Path],
                    extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "inputs": {k: _sha256(p) for k, p in sorted(inputs.items())},
        "outputs": {k: _sha256(p) for k, p in sorted(outputs.items())},
    }
    if extra:
        manifest.update(extra)
    path = out_base.with_name(out_base.name + ".manifest.json")
    _write_json(path, manifest)
    return path


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    return obj


def _apply_overrides(base: dict, args: argparse.Namespace, fields: dict) -> dict:
    """Overlay explicitly-passed CLI flags onto the config dict."""
    out = dict(base)
    for flag, key in fields.items():
        v = getattr(args, flag)
        if v is not None:
            out[key] = v
    return out


def _run_config(args, extra_switches: bool = True) -> RunConfig:
    raw = _load_config_file(args.config)
    raw = _apply_overrides(raw, args, {
        "epochs": "epochs", "seed": "seed", "lr": "lr",
        "batch_size": "batch_size", "m": "m", "n_select": "n_select",
        "tau_init": "tau_init",
    })
    cfg = RunConfig.from_dict(raw)
    if extra_switches and getattr(args, "ablate", None):
        variant = ablation_variants(cfg).get(args.ablate)
        if variant is None:
            raise ConfigError(f"unknown ablation {args.ablate!r}; "
                              "expected one of full, no-pr, no-pa, no-ca")
        cfg = variant
    return cfg


def _parse_threshold(text: str | None):
    if text is None or text == "auto":
        return None
    if text == "-inf":
        return -np.inf
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"threshold must be a number, '-inf', or 'auto', "
                          f"got {text!r}") from None


def _metrics_payload(result, mode: str, split: str) -> dict:
    payload = {"mode": mode, "split": split,
               "n_samples": result.curve.n_samples,
               "n_pairs": result.curve.n_pairs}
    payload.update(result.report.as_percent_dict())
    if result.threshold is not None:
        payload["threshold"] = (repr(result.threshold)
                                if np.isinf(result.threshold)
                                else result.threshold)
    return payload


def _write_metric_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _pct(x: float) -> str:
    return repr(round(100.0 * x, 10))


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = _load_config_file(args.config)
    raw = _apply_overrides(raw, args, {
        "n_attrs": "n_attrs", "n_objs": "n_objs",
        "seen_fraction": "seen_fraction", "val_fraction": "val_fraction",
        "samples_per_pair": "samples_per_pair",
        "eval_samples_per_pair": "eval_samples_per_pair",
        "sigma_n": "sigma_n", "seed": "seed", "d": "d",
        "n_tokens": "n_tokens", "d_lat": "d_lat", "basis_std": "basis_std",
        "noise_corr": "noise_corr", "style_rank": "style_rank",
    })
    gc = GenConfig.from_dict(raw)
    attrs, objs = default_names(gc.n_attrs, gc.n_objs)
    space = split_pairs(attrs, objs, gc.seen_fraction, gc.val_fraction,
                        seed=gc.seed)
    ds = generate_synthetic(space, samples_per_pair=gc.samples_per_pair,
                            sigma_n=gc.sigma_n, seed=gc.seed, d=gc.d,
                            n_tokens=gc.n_tokens, d_lat=gc.d_lat,
                            eval_samples_per_pair=gc.eval_samples_per_pair,
                            basis_std=gc.basis_std, noise_corr=gc.noise_corr,
                            style_rank=gc.style_rank)
    out = Path(args.out)
    save_dataset(out, ds)
    _write_manifest(out, "gen-data", asdict(gc), inputs={},
                    outputs={"features": out, "labels": labels_path(out)})
    print(f"wrote {len(ds.records)} records "
          f"({len(space.seen_pairs)} seen / {len(space.unseen_pairs)} unseen pairs) "
          f"to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"data file not found: {data_path}")
    ds = load_dataset(data_path)
    result = train(cfg, ds)
    out = Path(args.out)
    save_checkpoint(out, result.model, result.optimizer, step=len(result.log))
    log_path = out.with_name(out.name + ".log.csv")
    _write_metric_csv(
        log_path, ["step", "l_att", "l_obj", "l_sp", "l_ret", "l_total"],
        [[row.step, repr(row.report.l_att), repr(row.report.l_obj),
          repr(row.report.l_sp), repr(row.report.l_ret),
          repr(row.report.l_total)] for row in result.log])
    _write_manifest(out, "train", cfg.to_dict(),
                    inputs={"features": data_path,
                            "labels": labels_path(data_path)},
                    outputs={"checkpoint": out, "log": log_path})
    last = result.log[-1].report.l_total if result.log else float("nan")
    print(f"trained {len(result.log)} steps; final loss {last:.6f}; "
          f"checkpoint {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"data file not found: {data_path}")
    model, _ = restore(load_checkpoint(ckpt_path))
    ds = load_dataset(data_path)
    threshold = _parse_threshold(args.threshold)
    result = evaluate(model, ds, split=args.split, mode=args.mode,
                      threshold=threshold)
    out = Path(args.out)
    metrics_path = out.with_name(out.name + ".metrics.json")
    curve_path = out.with_name(out.name + ".curve.csv")
    _write_json(metrics_path, _metrics_payload(result, args.mode, args.split))
    _write_metric_csv(curve_path, ["bias", "seen_acc", "unseen_acc"],
                      [list(r) for r in curve_rows(result.curve)])
    _write_manifest(out, "eval",
                    {"mode": args.mode, "split": args.split,
                     "threshold": args.threshold, "model": model.config.to_dict()},
                    inputs={"checkpoint": ckpt_path, "features": data_path},
                    outputs={"metrics": metrics_path, "curve": curve_path})
    rep = result.report
    print(f"{args.mode}/{args.split}: S={100 * rep.s:.2f} U={100 * rep.u:.2f} "
          f"H={100 * rep.h:.2f} AUC={100 * rep.auc:.2f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args, extra_switches=False)
    ds = load_dataset(Path(args.data))
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    seeds = [cfg.seed + k for k in range(args.seeds)]
    rows = []
    for variant, vcfg in ablation_variants(cfg).items():
        for seed in seeds:
            res = train(replace(vcfg, seed=seed), ds)
            rep = evaluate(res.model, ds, split="test", mode="closed").report
            rows.append([variant, seed, _pct(rep.s), _pct(rep.u),
                         _pct(rep.h), _pct(rep.auc)])
    out = Path(args.out)
    _write_metric_csv(out, ["variant", "seed", "s", "u", "h", "auc"], rows)
    _write_manifest(out, "ablate", cfg.to_dict(),
                    inputs={"features": Path(args.data)},
                    outputs={"table": out}, extra={"seeds": seeds})
    print(f"wrote {len(rows)} ablation rows to {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args, extra_switches=False)
    ds = load_dataset(Path(args.data))
    m_values = _parse_int_list(args.M, "--M")
    n_values = _parse_int_list(args.N, "--N")
    rows = []
    for m in m_values:
        for n in n_values:
            res = train(replace(cfg, m=m, n_select=n), ds)
            rep = evaluate(res.model, ds, split="test", mode="closed").report
            rows.append([m, n, _pct(rep.s), _pct(rep.u), _pct(rep.h),
                         _pct(rep.auc)])
    out = Path(args.out)
    _write_metric_csv(out, ["m", "n_select", "s", "u", "h", "auc"], rows)
    _write_manifest(out, "sweep", cfg.to_dict(),
                    inputs={"features": Path(args.data)},
                    outputs={"table": out},
                    extra={"cells": [{"m": m, "n_select": n, "seed": cfg.seed}
                                     for m in m_values for n in n_values]})
    print(f"wrote {len(rows)} sweep rows to {out}")
    return 0


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers, "
                          f"got {text!r}") from None
    if not values:
        raise ConfigError(f"{flag} list is empty")
    return values


def cmd_inspect_ckpt(args) -> int:
    path = Path(args.ckpt)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    info = {
        "config": ckpt.config.to_dict(),
        "n_attrs": ckpt.n_attrs,
        "n_objs": ckpt.n_objs,
        "step": ckpt.step,
        "adam_step_count": ckpt.adam_step_count,
        "frozen": ckpt.frozen,
        "params": {name: list(arr.shape) for name, arr in ckpt.params.items()},
        "n_parameters": int(sum(arr.size for arr in ckpt.params.values())),
    }
    print(json.dumps(info, sort_keys=True, indent=1))
    return 0


def cmd_validate_feat(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise ConfigError(f"feature file not found: {path}")
    report = validate_features(path)
    for err in report.errors:
        print(f"error: {err}")
    for warning in report.warnings:
        print(f"warning: {warning}")
    if report.ok:
        print(f"{path}: ok ({len(report.warnings)} warnings)")
        return 0
    print(f"{path}: INVALID ({len(report.errors)} errors)")
    return 2


# -- argument plumbing -------------------------------------------------------


def _add_run_config_flags(p: argparse.ArgumentParser, with_ablate: bool) -> None:
    p.add_argument("--config", help="JSON file of run-config fields")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--m", type=int, default=None, help="repository size")
    p.add_argument("--n-select", dest="n_select", type=int, default=None)
    p.add_argument("--tau-init", dest="tau_init", type=float, default=None)
    if with_ablate:
        p.add_argument("--ablate", default=None,
                       help="train one ablation variant: no-pr | no-pa | no-ca")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vaps",
        description="Compositional zero-shot lab: prompt repository, "
                    "per-image prompt adapter, and seen/unseen evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic feature dataset")
    g.add_argument("--config", help="JSON file of generator fields")
    g.add_argument("--out", required=True, help="output feature file path")
    for flag, typ in (("--n-attrs", int), ("--n-objs", int),
                      ("--seen-fraction", float), ("--val-fraction", float),
                      ("--samples-per-pair", int),
                      ("--eval-samples-per-pair", int), ("--sigma-n", float),
                      ("--seed", int), ("--d", int), ("--n-tokens", int),
                      ("--d-lat", int), ("--basis-std", float),
                      ("--noise-corr", float), ("--style-rank", int)):
        g.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ,
                       default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a feature dataset")
    _add_run_config_flags(t, with_ablate=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("closed", "open"), default="closed")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--threshold", default=None,
                   help="open-world feasibility threshold: number, '-inf', "
                        "or 'auto' (calibrate on val)")
    e.add_argument("--out", required=True, help="output path prefix")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare full model against switch-off variants")
    _add_run_config_flags(a, with_ablate=False)
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", type=int, default=1,
                   help="number of consecutive seeds per variant")
    a.add_argument("--out", required=True, help="output CSV path")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="grid over repository size and selection count")
    _add_run_config_flags(s, with_ablate=False)
    s.add_argument("--data", required=True)
    s.add_argument("--M", required=True, help="comma-separated repository sizes")
    s.add_argument("--N", required=True, help="comma-separated selection counts")
    s.add_argument("--out", required=True, help="output CSV path")
    s.set_defaults(func=cmd_sweep)

    i = sub.add_parser("inspect-ckpt", help="print checkpoint header as JSON")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect_ckpt)

    v = sub.add_parser("validate-feat", help="check a feature file against the format")
    v.add_argument("path")
    v.set_defaults(func=cmd_validate_feat)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.diagnostics:
            print(json.dumps(e.diagnostics, sort_keys=True), file=sys.stderr)
        return 3
    except VapsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
