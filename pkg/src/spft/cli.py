"""Command-line entry point: pretrain, finetune, sweep, ablate-freeze,
forgetting, r2 and theory subcommands, all driven by one JSON config.

Every command writes its reports atomically into the output directory next
to a copy of the exact config and a run manifest (config hash, seeds,
version, timestamp); reruns with the same config produce byte-identical CSV
payloads.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, build_arch, build_task, build_train_config,
                     config_hash, load_config)
from .fisher import estimate_fisher_diag, fisher_sidecar_path, load_fisher, save_fisher
from .nets import load_checkpoint, save_checkpoint
from .optim import evaluate
from .penalties import FISHER_KINDS
from .theory import run_verification, write_verification_csv
from .transfer import (finetune, forgetting, freezing_ablation, pretrain,
                       r2_analysis, split_source, sweep, write_ablation_csv,
                       write_forgetting_csv, write_r2_csv, write_sweep_csv)


def _atomic_write(path: Path, writer_fn):
    """Write via temp file + rename so readers never see partial output."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        writer_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _write_manifest(out: Path, cfg: dict, seeds, extra: dict | None = None):
    manifest = {
        "config_sha256": config_hash(cfg),
        "seeds": list(seeds),
        "spft_version": __version__,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    _atomic_write(out / "manifest.json",
                  lambda tmp: Path(tmp).write_text(json.dumps(manifest, indent=2) + "\n"))
    _atomic_write(out / "config.json",
                  lambda tmp: Path(tmp).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n"))


def _prepare(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dict(cfg)
        cfg["seeds"] = [args.seed]
    out = Path(args.out) if args.out else Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _checkpoint_path(cfg: dict, out: Path) -> Path:
    if "checkpoint" in cfg:
        return Path(cfg["checkpoint"])
    return out / "source.ckpt"


def _fisher_for(cfg: dict, kind: str, ckpt: Path):
    if kind not in FISHER_KINDS:
        return None
    sidecar = fisher_sidecar_path(ckpt)
    if not sidecar.exists():
        raise FileNotFoundError(f"missing Fisher sidecar {sidecar}; rerun pretrain with --fisher")
    return load_fisher(sidecar, source_checkpoint_id=str(ckpt))


def cmd_pretrain(args) -> int:
    cfg, out = _prepare(args)
    task = build_task(cfg["task"])
    seed = cfg["seeds"][0]
    train_cfg = build_train_config(cfg["train"], seed)
    layers = build_arch(cfg.get("arch"), task.source.num_classes)
    pre_cfg = cfg.get("pretrain", {})
    result = pretrain(task.source, layers, train_cfg,
                      val_fraction=pre_cfg.get("val_fraction", 0.1),
                      test_fraction=pre_cfg.get("test_fraction", 0.1))
    ckpt = _checkpoint_path(cfg, out)
    _atomic_write(ckpt, lambda tmp: save_checkpoint(result.net, tmp))
    extra = {"source_test_accuracy": result.source_test_accuracy, "checkpoint": str(ckpt)}
    if args.fisher:
        f_cfg = cfg.get("fisher", {})
        m = f_cfg.get("m", min(len(result.source_train), 5000))
        fd = estimate_fisher_diag(result.net, result.source_train, m=m,
                                  seed=f_cfg.get("seed", seed),
                                  source_checkpoint_id=str(ckpt))
        _atomic_write(fisher_sidecar_path(ckpt), lambda tmp: save_fisher(fd, tmp))
        extra["fisher_m"] = m

    def write_eval(tmp):
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "source_test_accuracy"])
            w.writerow([seed, repr(result.source_test_accuracy)])

    _atomic_write(out / "pretrain.csv", write_eval)
    result.history.write_csv(out / "pretrain_history.csv")
    _write_manifest(out, cfg, [seed], extra)
    return 0


def _penalty_params(cfg: dict):
    pen = cfg.get("penalty", {"kind": "none"})
    kind = pen.get("kind", "none")
    return (None if kind == "none" else kind, pen.get("alpha", 0.0),
            pen.get("beta", 0.0), pen.get("epsilon", 1e-6))


def cmd_finetune(args) -> int:
    cfg, out = _prepare(args)
    task = build_task(cfg["task"])
    ckpt = _checkpoint_path(cfg, out)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    kind, alpha, beta, eps = _penalty_params(cfg)
    fisher = _fisher_for(cfg, kind, ckpt) if kind else None
    rows = []
    for seed in cfg["seeds"]:
        train_cfg = build_train_config(cfg["train"], seed)
        res = finetune(task, str(ckpt), kind, alpha, beta, train_cfg,
                       fisher=fisher, epsilon=eps)
        rows.append((seed, res.test_accuracy))
        res.history.write_csv(out / f"finetune_history_seed{seed}.csv")

    def write_rows(tmp):
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "test_accuracy"])
            for seed, acc in rows:
                w.writerow([seed, repr(acc)])

    _atomic_write(out / "finetune.csv", write_rows)
    _write_manifest(out, cfg, cfg["seeds"])
    return 0


def cmd_sweep(args) -> int:
    cfg, out = _prepare(args)
    task = build_task(cfg["task"])
    ckpt = _checkpoint_path(cfg, out)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    pen = cfg.get("penalty", {})
    kind = pen.get("kind")
    if kind in (None, "none"):
        raise ConfigError("config error at penalty.kind: sweep needs a penalty kind")
    alpha_grid = pen.get("alpha_grid") or [pen.get("alpha", 0.0)]
    beta_grid = pen.get("beta_grid") or [pen.get("beta", 0.0)]
    fisher = _fisher_for(cfg, kind, ckpt)
    folds = cfg.get("sweep", {}).get("folds", 5)
    train_cfg = build_train_config(cfg["train"], cfg["seeds"][0])
    result = sweep(task, str(ckpt), kind, alpha_grid, beta_grid, folds, train_cfg,
                   fisher=fisher, epsilon=pen.get("epsilon", 1e-6), jobs=args.jobs)
    _atomic_write(out / "sweep.csv", lambda tmp: write_sweep_csv(result, tmp))
    _write_manifest(out, cfg, cfg["seeds"],
                    {"best_alpha": result.best[0], "best_beta": result.best[1]})
    return 0


def cmd_ablate_freeze(args) -> int:
    cfg, out = _prepare(args)
    task = build_task(cfg["task"])
    ckpt = _checkpoint_path(cfg, out)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    freeze = cfg.get("freeze")
    if not freeze:
        raise ConfigError("config error at freeze: ablate-freeze needs a freeze section")
    rows = []
    for spec in freeze["kinds"]:
        fisher = _fisher_for(cfg, spec["kind"], ckpt)
        for seed in cfg["seeds"]:
            train_cfg = build_train_config(cfg["train"], seed)
            cells = freezing_ablation(task, str(ckpt), spec["kind"], freeze["k_values"],
                                      train_cfg, spec["alpha"], spec.get("beta", 0.0),
                                      fisher=fisher)
            rows.extend((c.penalty_kind, c.k, seed, c.test_accuracy) for c in cells)
    _atomic_write(out / "ablation.csv", lambda tmp: write_ablation_csv(rows, tmp))
    _write_manifest(out, cfg, cfg["seeds"])
    return 0


def _compare_specs(cfg: dict):
    compare = cfg.get("compare")
    if not compare:
        kind, alpha, beta, _ = _penalty_params(cfg)
        if kind is None:
            raise ConfigError("config error at compare: list the penalties to compare")
        compare = [{"kind": kind, "alpha": alpha, "beta": beta}]
    return compare


def cmd_forgetting(args) -> int:
    cfg, out = _prepare(args)
    task = build_task(cfg["task"])
    ckpt = _checkpoint_path(cfg, out)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    # rebuild the source split exactly as pretraining did (same seed)
    seed0 = cfg["seeds"][0]
    pre_cfg = cfg.get("pretrain", {})
    _, _, source_test, _ = split_source(task.source, seed0,
                                        pre_cfg.get("val_fraction", 0.1),
                                        pre_cfg.get("test_fraction", 0.1))
    rows = []
    for spec in _compare_specs(cfg):
        fisher = _fisher_for(cfg, spec["kind"], ckpt)
        for seed in cfg["seeds"]:
            train_cfg = build_train_config(cfg["train"], seed)
            res = finetune(task, str(ckpt), spec["kind"], spec["alpha"],
                           spec.get("beta", 0.0), train_cfg, fisher=fisher)
            m = forgetting(res.net, str(ckpt), source_test)
            rows.append((spec["kind"], seed, m.source_acc_pretrained, m.source_acc_after))
    _atomic_write(out / "forgetting.csv", lambda tmp: write_forgetting_csv(rows, tmp))
    _write_manifest(out, cfg, cfg["seeds"])
    return 0


def cmd_r2(args) -> int:
    cfg, out = _prepare(args)
    task = build_task(cfg["task"])
    ckpt = _checkpoint_path(cfg, out)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    pretrained = load_checkpoint(ckpt)
    seed = cfg["seeds"][0]
    for spec in _compare_specs(cfg):
        fisher = _fisher_for(cfg, spec["kind"], ckpt)
        train_cfg = build_train_config(cfg["train"], seed)
        res = finetune(task, str(ckpt), spec["kind"], spec["alpha"],
                       spec.get("beta", 0.0), train_cfg, fisher=fisher)
        report = r2_analysis(pretrained, res.net, task.target_test)
        _atomic_write(out / f"r2_{spec['kind']}.csv",
                      lambda tmp, report=report: write_r2_csv(report, tmp))
    _write_manifest(out, cfg, [seed])
    return 0


def cmd_theory(args) -> int:
    cfg, out = _prepare(args)
    t_cfg = cfg.get("theory", {})
    rows = run_verification(trials=t_cfg.get("trials", 100),
                            max_dim=t_cfg.get("max_dim", 50),
                            seed=t_cfg.get("seed", 0))
    _atomic_write(out / "theory.csv", lambda tmp: write_verification_csv(rows, tmp))
    _write_manifest(out, cfg, cfg["seeds"],
                    {"max_residual": max(r.residual for r in rows)})
    return 0


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "ablate-freeze": cmd_ablate_freeze,
    "forgetting": cmd_forgetting,
    "r2": cmd_r2,
    "theory": cmd_theory,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spft",
        description="Starting-point regularized fine-tuning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="override the seed list")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers where supported")
        p.add_argument("--fisher", action="store_true",
                       help="also write the Fisher sidecar (pretrain)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
