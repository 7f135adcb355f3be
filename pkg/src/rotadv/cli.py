"""Command-line interface: ``rotadv <subcommand> [flags]``.

Every subcommand reads one config file (see :mod:`rotadv.config`), applies
flag overrides, and writes its artifacts under ``--out``.  Artifacts carry
the run's config digest and contain no timestamps, so reruns with the same
config and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from rotadv import attack, config, data, defense, evaluation, gradcheck, nn, training
from rotadv.errors import RotadvError

log = logging.getLogger("rotadv")

DATASET_FILE = "dataset.bin"


def _parse_bound(text: str) -> float:
    """Accept plain radians or fractions of pi such as ``pi/4`` or ``0.75pi``."""
    t = text.strip().lower().replace(" ", "")
    try:
        if "pi" in t:
            num, _, den = t.partition("/")
            coef = num.replace("*", "").replace("pi", "")
            value = (float(coef) if coef else 1.0) * math.pi
            return value / float(den) if den else value
        return float(t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse rotation bound {text!r}") from None


def _overrides(args) -> dict:
    o = {"seed": args.seed, "workers": args.workers, "out": args.out}
    if args.rotation_bound is not None:
        for key in ("attack.bound", "defense.bound", "eval.bound"):
            o[key] = args.rotation_bound
    o["attack.steps"] = args.attack_steps
    o["attack.step_size"] = args.step_size
    return o


def _load_run(args) -> config.RunConfig:
    cfg = config.load_config(args.config, _overrides(args))
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    return cfg


def _dataset(cfg: config.RunConfig) -> data.Dataset:
    if cfg.data.path:
        return data.load_dataset(cfg.data.path)
    cached = Path(cfg.out) / DATASET_FILE
    if cached.is_file():
        return data.load_dataset(cached)
    d = cfg.data
    return data.gen_synthetic(d.classes, d.per_class, d.points_per_cloud, d.jitter, cfg.seed, d.test_per_class)


def _arch(cfg: config.RunConfig, n_classes: int, h1=None, h2=None, h3=None) -> nn.Architecture:
    m = cfg.model
    return nn.Architecture(h1=h1 or m.h1, h2=h2 or m.h2, h3=h3 or m.h3, n_classes=n_classes)


def _write_provenance(cfg: config.RunConfig, name: str, extra: dict | None = None) -> None:
    # the output location is left out so that reruns elsewhere compare equal
    settings = config.to_yaml(replace(cfg, out="."))
    record = {"subcommand": name, "config_digest": cfg.digest(), "config": settings, **(extra or {})}
    path = Path(cfg.out) / f"{name}_provenance.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _eval_reports(cfg, params, split, protocols=None):
    reports = []
    for kind in protocols or cfg.eval.protocols:
        if kind == "clean":
            p = evaluation.Protocol.clean()
        elif kind == "random":
            p = evaluation.Protocol.random(cfg.eval.bound)
        else:
            p = evaluation.Protocol.adversarial(_attack_cfg(cfg, cfg.eval.bound))
        reports.append(evaluation.evaluate(params, split, p, seed=cfg.seed, workers=cfg.workers))
    return _stamp(reports, cfg.digest())


def _stamp(reports, digest):
    return [replace(r, config_digest=digest) for r in reports]


def _attack_cfg(cfg, bound=None) -> attack.AttackConfig:
    return replace(cfg.attack, bound=bound if bound is not None else cfg.attack.bound)


def _defense_cfg(cfg) -> defense.DefenseConfig:
    d = cfg.defense
    return defense.DefenseConfig(
        epochs=d.epochs,
        one_step_epochs=d.one_step_epochs,
        iterations=d.iterations,
        lr=d.lr,
        lr_min=d.lr_min,
        schedule=d.schedule,
        batch_size=d.batch_size,
        momentum=d.momentum,
        bound=d.bound,
        mixed_clean=d.mixed_clean,
        use_pool=d.use_pool,
    )


def _checkpoint(args, cfg, name):
    path = args.checkpoint or Path(cfg.out) / name
    return nn.load_checkpoint(path)


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_run(args)
    d = cfg.data
    ds = data.gen_synthetic(d.classes, d.per_class, d.points_per_cloud, d.jitter, cfg.seed, d.test_per_class)
    out = Path(cfg.out) / DATASET_FILE
    data.save_dataset(ds, out)
    _write_provenance(cfg, "gen-data", {"n_train": len(ds.train), "n_test": len(ds.test), "file": DATASET_FILE})
    log.info("wrote %s (%d train, %d test clouds)", out, len(ds.train), len(ds.test))
    return 0


def cmd_train(args) -> int:
    cfg = _load_run(args)
    ds = _dataset(cfg)
    mode = args.mode or "clean"
    if mode not in ("clean", "rotation-augment"):
        raise RotadvError(f"train mode must be clean or rotation-augment, not {mode!r}")
    params = nn.init_params(_arch(cfg, ds.n_classes), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if mode == "clean":
        params = training.fit(params, ds.train, cfg.train, rng)
    else:
        params = defense.rotation_augment_train(params, ds.train, cfg.train, rng, cfg.eval.bound)
    stem = "clean" if mode == "clean" else "ra"
    nn.save_checkpoint(params, Path(cfg.out) / f"model_{stem}.ckpt", {"config_digest": cfg.digest(), "mode": mode})
    reports = _eval_reports(cfg, params, ds.test, ("clean", "random"))
    evaluation.emit_report(reports, Path(cfg.out) / f"train_{stem}_eval.csv")
    _write_provenance(cfg, f"train-{stem}")
    for r in reports:
        log.info("%s accuracy %.4f", r.protocol, r.accuracy)
    return 0


def cmd_attack(args) -> int:
    cfg = _load_run(args)
    ds = _dataset(cfg)
    params = _checkpoint(args, cfg, "model_clean.ckpt")
    acfg = _attack_cfg(cfg)
    records = attack.attack_dataset(params, ds.test, acfg, seed=cfg.seed, workers=cfg.workers)
    digest = cfg.digest()
    attack.write_records_csv(records, Path(cfg.out) / "attack_records.csv", digest)
    rows = evaluation.loss_sweep(params, ds.test, evaluation.default_variants(acfg), seed=cfg.seed, restarts=acfg.restarts)
    evaluation.write_sweep_csv(rows, Path(cfg.out) / "loss_sweep.csv", digest)
    _write_provenance(cfg, "attack")
    log.info("mean final objective %.4f over %d samples", np.mean([r.final_objective for r in records]), len(records))
    return 0


def _ensemble(args, cfg, ds, target):
    if args.ensemble:
        return [target] + [nn.load_checkpoint(p) for p in args.ensemble]
    members = [target]
    for m in cfg.defense.ensemble:
        p = nn.init_params(_arch(cfg, ds.n_classes, m.h1, m.h2, m.h3), seed=m.seed)
        members.append(training.fit(p, ds.train, cfg.train, np.random.default_rng(m.seed)))
    return members


def cmd_defend(args) -> int:
    cfg = _load_run(args)
    ds = _dataset(cfg)
    mode = args.mode or "iterative"
    if mode not in ("iterative", "one-step"):
        raise RotadvError(f"defend mode must be iterative or one-step, not {mode!r}")
    target = _checkpoint(args, cfg, "model_clean.ckpt")
    dcfg = _defense_cfg(cfg)
    acfg = _attack_cfg(cfg, dcfg.bound)
    digest = cfg.digest()
    start = time.perf_counter()
    if mode == "iterative":
        params, reports = defense.iterative_optimize(target, ds, acfg, dcfg, seed=cfg.seed, workers=cfg.workers)
        reports = _stamp(reports, digest)
    else:
        members = _ensemble(args, cfg, ds, target)
        params = defense.one_step_optimize(target, members, ds, acfg, dcfg, seed=cfg.seed, workers=cfg.workers)
        reports = _eval_reports(cfg, params, ds.test, ("random",))
    log.info("%s defense took %.1f s", mode, time.perf_counter() - start)
    stem = mode.replace("-", "_")
    nn.save_checkpoint(params, Path(cfg.out) / f"robust_{stem}.ckpt", {"config_digest": digest, "mode": mode})
    with open(Path(cfg.out) / f"defend_{stem}.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration"] + evaluation.REPORT_COLUMNS)
        for i, r in enumerate(reports, 1):
            w.writerow([i] + r.row())
    _write_provenance(cfg, f"defend-{stem}")
    log.info("final random-protocol accuracy %.4f", reports[-1].accuracy)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run(args)
    ds = _dataset(cfg)
    params = _checkpoint(args, cfg, "model_clean.ckpt")
    reports = _eval_reports(cfg, params, ds.test)
    evaluation.emit_report(reports, Path(cfg.out) / "eval.csv")
    _write_provenance(cfg, "eval")
    for r in reports:
        extra = "" if r.success_rate is None else f" success rate {r.success_rate:.4f}"
        log.info("%s accuracy %.4f mean loss %.4f%s", r.protocol, r.accuracy, r.mean_loss, extra)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_run(args)
    ds = _dataset(cfg)
    params = _checkpoint(args, cfg, "model_clean.ckpt")
    checks = gradcheck.check_split(params, ds.test, args.samples, cfg.seed, cfg.attack.objective, bound=cfg.eval.bound)
    used = [c for c in checks if not c.tie]
    skipped = len(checks) - len(used)
    worst = np.max([c.axis_errors for c in used], axis=0) if used else np.zeros(3)
    ok = bool(used) and float(worst.max()) < args.tol
    digest = cfg.digest()
    with open(Path(cfg.out) / "gradcheck.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "tie", "err_x", "err_y", "err_z", "config_digest"])
        for c in checks:
            w.writerow([c.sample_id, int(c.tie), *(repr(float(e)) for e in c.axis_errors), digest])
    _write_provenance(cfg, "gradcheck", {"checked": len(used), "skipped_ties": skipped, "passed": ok})
    print(f"checked {len(used)} samples, skipped {skipped} with pooling ties")
    for axis, e in zip("xyz", worst):
        print(f"worst relative error d/dphi_{axis}: {e:.3e}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="processes for per-sample attack work (default 1)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--rotation-bound", type=_parse_bound, help="angle bound in radians, or e.g. pi/4")
    common.add_argument("--attack-steps", type=int)
    common.add_argument("--step-size", type=float)
    common.add_argument("--checkpoint", help="model checkpoint (default: <out>/model_clean.ckpt)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rotadv", description="Euler-angle rotation attacks and rotation-pool retraining.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset").set_defaults(func=cmd_gen_data)
    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--mode", choices=["clean", "rotation-augment"], default="clean")
    p.set_defaults(func=cmd_train)
    sub.add_parser("attack", parents=[common], help="attack the test split").set_defaults(func=cmd_attack)
    p = sub.add_parser("defend", parents=[common], help="retrain on attacked rotations (iterative or one-step)")
    p.add_argument("--mode", choices=["iterative", "one-step"], default="iterative")
    p.add_argument("--ensemble", nargs="*", help="extra checkpoints to attack in one-step mode")
    p.set_defaults(func=cmd_defend)
    sub.add_parser("eval", parents=[common], help="evaluate under clean/random/attack").set_defaults(func=cmd_eval)
    p = sub.add_parser("gradcheck", parents=[common], help="check angle gradients by finite differences")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (RotadvError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
