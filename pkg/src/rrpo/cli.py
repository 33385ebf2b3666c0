"""Command-line entry point: ``rrpo <command> [--config PATH] [--seed N] ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort or
calibration failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .checkpoint import CheckpointError
from .config import VARIANTS, ConfigError, RunConfig, load_config, variant_name
from .metrics import provenance
from .oracle import CalibrationError
from .train import NumericalAbort

log = logging.getLogger("rrpo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _setup_logging():
    level = os.environ.get("RRPO_LOG", "info").lower()
    if level not in ("error", "info", "debug"):
        level = "info"
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="run a single seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    ap = argparse.ArgumentParser(prog="rrpo", description="Reward-hacking testbed with a hybrid-regularized reward model.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write pretrain/finetune/eval corpora")
    sub.add_parser("pretrain-rm", parents=[common], help="train the vanilla model on the shortcut corpus")
    ft = sub.add_parser("finetune-rm", parents=[common], help="fine-tune with cumulative regularizer flags")
    ft.add_argument("--ls", action="store_true", help="label smoothing")
    ft.add_argument("--eam", action="store_true", help="energy-adaptive mixup (requires --ls)")
    ft.add_argument("--adv", action="store_true", help="adversarial perturbation (requires --eam)")
    tp = sub.add_parser("train-policy", parents=[common], help="SFT warm start then reward-gradient ascent")
    tp.add_argument("--rm", choices=["vanilla", *VARIANTS], help="frozen model to optimize against")
    tp.add_argument("--rm-checkpoint", metavar="PATH", help="explicit model checkpoint")
    sub.add_parser("eval", parents=[common], help="hacking-gap report over seeds")
    sub.add_parser("ablate", parents=[common], help="cumulative flag ablation over seeds")
    return ap


def _seeds(cfg: RunConfig, args) -> list[int]:
    return [args.seed] if args.seed is not None else cfg.seed_list()


def _header(cfg) -> str:
    return "".join(f"# {line}\n" for line in provenance(cfg))


def _write_report(out: Path, stem: str, cfg, payload: dict, text: str, force: bool = True):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"provenance": provenance(cfg), **payload}
    (out / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    (out / f"{stem}.txt").write_text(_header(cfg) + text)


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v))


def _table(rows: list[dict], cols: list[str]) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def cmd_gen_data(cfg, args):
    for seed in _seeds(cfg, args):
        paths = pipeline.gen_data(cfg, seed, force=args.force)
        for name, p in paths.items():
            print(f"seed {seed}: {name} -> {p}")


def cmd_pretrain_rm(cfg, args):
    for seed in _seeds(cfg, args):
        _, info = pipeline.pretrain(cfg, seed)
        print(f"seed {seed}: vanilla pretrain held-out accuracy {info['acc_pretrain_heldout']:.4f}")


def cmd_finetune_rm(cfg, args):
    variant = variant_name(args.ls, args.eam, args.adv)
    for seed in _seeds(cfg, args):
        _, info = pipeline.finetune(cfg, seed, variant)
        print(f"seed {seed}: {variant} clean {info['acc_clean']:.4f} shifted {info['acc_shifted']:.4f}")


def cmd_train_policy(cfg, args):
    name = args.rm or cfg.policy_rm
    rm = None
    if args.rm_checkpoint:
        if not Path(args.rm_checkpoint).is_file():
            raise ConfigError(f"model checkpoint not found: {args.rm_checkpoint}")
        from .reward_model import load_rm

        rm = load_rm(args.rm_checkpoint)
    for seed in _seeds(cfg, args):
        if rm is None and name != "vanilla":
            path = pipeline.Layout.of(cfg, seed).ckpt(f"rm_{name}.rm")
            if not path.is_file():
                raise ConfigError(f"model checkpoint not found: {path} (run finetune-rm first)")
        pipeline.train_policy(cfg, seed, name, rm=rm)
        print(f"seed {seed}: policy against {name} -> {pipeline.Layout.of(cfg, seed).ckpt(f'policy_{name}.pol')}")


def cmd_eval(cfg, args):
    res = pipeline.run_eval(cfg, _seeds(cfg, args), jobs=args.jobs)
    cols = ["seed", "policy", *res["columns"]]
    text = "per-seed rows\n" + _table(res["rows"], cols)
    means = []
    for policy in dict.fromkeys(r["policy"] for r in res["rows"]):
        sel = [r for r in res["rows"] if r["policy"] == policy]
        means.append({"policy": policy, **{c: float(np.mean([r[c] for r in sel])) for c in res["columns"]}})
    text += "\nseed means\n" + _table(means, ["policy", *res["columns"]])
    v = res["verdict"]
    text += "\nhacking gap\n" + "".join(f"{k} = {v[k]:.4f}\n" for k in v if k != "checks")
    text += "".join(f"check {k}: {'pass' if ok else 'FAIL'}\n" for k, ok in v["checks"].items())
    _write_report(Path(cfg.out_dir), "eval_summary", cfg, {**res, "means": means}, text)
    print(text, end="")


def cmd_ablate(cfg, args):
    res = pipeline.run_ablation(cfg, _seeds(cfg, args), jobs=args.jobs)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["seed", "variant", "clean_acc", "shifted_acc", "status"]
    with open(out / "ablation.csv", "w") as fh:
        fh.write(_header(cfg))
        fh.write(",".join(cols) + "\n")
        for c in res["cells"]:
            fh.write(",".join(repr(c[k]) if isinstance(c[k], float) else str(c[k]) for k in cols) + "\n")
    means = [{"variant": v, **m} for v, m in res["means"].items()]
    text = "cells\n" + _table(res["cells"], cols)
    text += "\nmeans\n" + _table(means, ["variant", "clean_acc", "shifted_acc", "n"])
    text += "\nshifted-domain gains\n" + "".join(f"{k} = {g:+.4f}\n" for k, g in res["gains"].items())
    _write_report(out, "ablation", cfg, res, text)
    print(text, end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-rm": cmd_pretrain_rm,
    "finetune-rm": cmd_finetune_rm,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = load_config(args.config)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointError) as exc:
        print(f"rrpo: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, CalibrationError) as exc:
        print(f"rrpo: aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
