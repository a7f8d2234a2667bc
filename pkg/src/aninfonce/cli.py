"""Command-line entry point.

    aninfonce run --config run.cfg --set loss.kind=infonce --out runs/a
    aninfonce sweep --axis dgp.d=[5,10,20] --repeats 2 --out runs/sweep
    aninfonce hn-scan --lam-pos 150 --lam-neg 100 --d 20
    aninfonce oracle --lam 5,5,5,5,5,25,25,25,25,25 --m 1023

The exit code is 0 only if every requested cell finished and all
configuration validated.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import SweepSpec, build_config, load_config_file, merged, parse_assignment
from .errors import ConfigError, InvalidArgumentError
from .evaluation import evaluate_latents
from .losses import bayes_optimal_loss
from .nn import forward, load_checkpoint
from .rng import RngStream
from .sphere import sample_uniform_sphere

log = logging.getLogger("aninfonce")


def _base_config(args) -> dict:
    flat = load_config_file(args.config) if args.config else {}
    for item in args.set or []:
        key, value = parse_assignment(item)
        flat[key] = value
    if args.seed is not None:
        flat["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        flat["out"] = args.out
    return merged(flat)


def _dump(obj, out, name):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_default)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text + "\n")
    print(text)


def _default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_run(args) -> int:
    cfg = build_config(_base_config(args))
    res = ex.run_training(cfg)
    print(res.report.to_json())
    return 0


def cmd_sweep(args) -> int:
    base = _base_config(args)
    axes = {}
    for item in args.axis or []:
        key, value = parse_assignment(item)
        axes[key] = value if isinstance(value, list) else [value]
    spec = SweepSpec(axes, args.repeats, int(base["seed"]))
    # validate every cell before spending compute
    for cell in spec.cells():
        build_config(merged(base, cell))
    cells = ex.run_sweep({k: v for k, v in base.items() if k != "out"}, spec, base["out"], args.workers)
    table = []
    for c in cells:
        row = {**c.overrides, "error": c.error, "out": c.out}
        if c.report is not None:
            row.update(r2_all=c.report.r2_all, r2_content=c.report.r2_content, r2_style=c.report.r2_style)
        table.append(row)
    _dump(table, base["out"], "sweep.json")
    return 0 if all(c.ok for c in cells) else 1


def cmd_hn_scan(args) -> int:
    gammas = _floats(args.gammas)
    res = ex.run_hn_scan(
        args.lam_pos,
        args.lam_neg or None,  # 0 means uniform negatives
        gammas,
        d=args.d,
        n_negatives=args.negatives,
        batch_size=args.batch_size,
        n_batches=args.batches,
        seed=args.seed or 0,
    )
    _dump({"gammas": res.gammas, "losses": res.losses, "stderrs": res.stderrs, "argmin": res.argmin}, args.out, "hn_scan.json")
    return 0


def cmd_hn_finetune(args) -> int:
    base = _base_config(args)
    out = base.pop("out")
    seeds = [int(s) for s in args.seeds.split(",")]
    build_config(merged(base, {"train.hard_negatives": args.hard_negatives}))
    results = ex.run_hn_finetune(base, args.finetune_steps, args.hard_negatives, seeds, out)
    rows = [
        {"seed": r.seed, "before": r.before.r2_all, "regular": r.regular.r2_all, "finetuned": r.finetuned.r2_all, "improvement": r.improvement}
        for r in results
    ]
    _dump(rows, out, "hn_finetune.json")
    return 0


def cmd_ensemble(args) -> int:
    base = _base_config(args)
    out = base.pop("out")
    seeds = [int(s) for s in args.seeds.split(",")]
    res = ex.run_ensemble(base, seeds=seeds, out=out)
    _dump(res.table, out, "ensemble.json")
    return 0 if res.ok else 1


def cmd_marginal_shift(args) -> int:
    base = _base_config(args)
    out = base.pop("out")
    seeds = [int(s) for s in args.seeds.split(",")]
    res = ex.run_marginal_shift(base, _floats(args.kappas), args.alpha, seeds, out=out)
    _dump({"table": res.table, "spearman": ex.spearman_by_seed(res.table)}, out, "marginal_shift.json")
    return 0 if res.ok else 1


def cmd_eval(args) -> int:
    nets, lams, meta = load_checkpoint(args.checkpoint)
    base = _base_config(args)
    cfg = build_config(base)
    z = sample_uniform_sphere(cfg.d, args.n, RngStream(cfg.seed, 0xE7A1).generator())
    z_hat = forward(nets["encoder"], nets["generator"](z))
    lam_hat = lams["lam0"].value if "lam0" in lams else None
    report = evaluate_latents(z, z_hat, cfg.lam_true, lam_hat, cfg.with_intercept)
    report.extra["checkpoint_step"] = meta.get("step")
    print(report.to_json())
    return 0


def cmd_oracle(args) -> int:
    res = bayes_optimal_loss(
        _floats(args.lam),
        None if args.lam_neg is None else _floats(args.lam_neg),
        m=args.m,
        n_mc=args.n_mc,
        rng=RngStream(args.seed or 0, 0x0AC1E),
    )
    print(json.dumps({"value": res.value, "stderr": res.stderr, "n_mc": res.n_mc}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aninfonce", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("run", help="train one model")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="cross product of config axes")
    common(sp)
    sp.add_argument("--axis", action="append", metavar="KEY=[V1,V2,...]")
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("hn-scan", help="loss vs isotropic critic scale under hard negatives")
    sp.add_argument("--lam-pos", type=float, default=150.0)
    sp.add_argument("--lam-neg", type=float, default=100.0)
    sp.add_argument("--d", type=int, default=20)
    sp.add_argument("--gammas", default="10,20,30,40,50,60,70,80,90,100")
    sp.add_argument("--negatives", type=int, default=64)
    sp.add_argument("--batch-size", type=int, default=1024)
    sp.add_argument("--batches", type=int, default=20)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_hn_scan)

    sp = sub.add_parser("hn-finetune", help="hard-negative finetuning vs continued training")
    common(sp)
    sp.add_argument("--finetune-steps", type=int, default=2000)
    sp.add_argument("--hard-negatives", type=int, default=3)
    sp.add_argument("--seeds", default="0,1,2")
    sp.set_defaults(func=cmd_hn_finetune)

    sp = sub.add_parser("ensemble", help="InfoNCE vs AnInfoNCE vs the two-DGP loss ensemble")
    common(sp)
    sp.add_argument("--seeds", default="0,1")
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("marginal-shift", help="domain accuracy vs R^2 under a shifted test marginal")
    common(sp)
    sp.add_argument("--kappas", default="0,5,20,50")
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--seeds", default="0")
    sp.set_defaults(func=cmd_marginal_shift)

    sp = sub.add_parser("eval", help="re-evaluate a checkpoint")
    common(sp, out=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--n", type=int, default=10000)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("oracle", help="Monte-Carlo Bayes-optimal loss")
    sp.add_argument("--lam", required=True, help="comma-separated diagonal")
    sp.add_argument("--lam-neg", help="comma-separated hard-negative diagonal")
    sp.add_argument("--m", type=int, default=1023, help="negatives per anchor")
    sp.add_argument("--n-mc", type=int, default=100_000)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
