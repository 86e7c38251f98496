"""Command-line entry points: ``lalora run | theory | account | calibrate | sweep-noise | partition-stats | config``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import accountant, theory
from .config import ConfigError, build, dump_defaults, load_config
from .diagnostics import loglog_slope, perturbation_sweep
from .fedsim import NumericFailure, dirichlet_partition, run_experiment
from .numkit import SeededRng
from .tasks import LoraTask, load_csv_dataset, make_lora_task, train_linear

log = logging.getLogger("lalora")

ROUND_COLUMNS = ("round", "train_loss", "eval_loss", "eval_acc", "grad_cosine_mean", "eps_spent", "sigma", "strategy")


def _num(x):
    """JSON-safe float: non-finite values become null."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def make_task(cfg: dict) -> LoraTask:
    rng = SeededRng(cfg["seed"], ("task",))
    if cfg["task.kind"] == "csv":
        data = load_csv_dataset(cfg["task.csv_path"], cfg["task.label_column"], seed=cfg["seed"])
        # W0 from brief training on the first half of the training split
        half = data.x_train.shape[0] // 2
        w0 = train_linear(data.x_train[:half], data.y_train[:half], data.n_classes,
                          steps=cfg["task.pretrain_steps"], lr=cfg["task.pretrain_lr"])
        return LoraTask(data, w0, data)
    return make_lora_task(
        rng,
        n_classes=cfg["task.n_classes"],
        d=cfg["task.dim"],
        per_class=cfg["task.per_class"],
        separation=cfg["task.separation"],
        shift=cfg["task.shift"],
        pretrain_steps=cfg["task.pretrain_steps"],
        pretrain_lr=cfg["task.pretrain_lr"],
    )


def resolve_sigma(cfg: dict) -> float:
    target = cfg["privacy.epsilon_target"]
    if target is None:
        return cfg["privacy.sigma"]
    return accountant.calibrate_sigma(
        target, cfg["privacy.delta"], cfg["fed.rounds"], cfg["fed.local_steps"], cfg["privacy.batch_fraction"]
    )


def execute(cfg: dict):
    """Run one experiment from a resolved config. Returns ``(csv_text, summary_dict, result)``."""
    sigma = resolve_sigma(cfg)
    exp = build(cfg, sigma=sigma)
    task = make_task(cfg)
    result = run_experiment(exp.plan, task, exp.privacy, exp.kernel, exp.seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUND_COLUMNS)
    for row in result.logs:
        writer.writerow([repr(getattr(row, c)) if isinstance(getattr(row, c), float) else getattr(row, c) for c in ROUND_COLUMNS])
    last = result.logs[-1] if result.logs else None
    summary = {
        "config": cfg,
        "sigma": sigma,
        "final": None if last is None else {
            "round": last.round,
            "train_loss": _num(last.train_loss),
            "eval_loss": _num(last.eval_loss),
            "eval_acc": _num(last.eval_acc),
            "grad_cosine_mean": _num(last.grad_cosine_mean),
            "eps_spent": _num(last.eps_spent),
        },
        "late_cosine_mean": _num(np.mean(result.cosine_trace[-max(1, len(result.cosine_trace) // 10):]))
        if len(result.cosine_trace) >= 10 else None,
        "ledger": None if result.ledger is None else {k: _num(v) if isinstance(v, float) else v
                                                       for k, v in result.ledger.as_dict().items()},
        "dropped_clients": sum(len(r.dropped) for r in result.logs),
    }
    return buf.getvalue(), summary, result


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def cmd_run(args) -> int:
    overrides = {"seed": args.seed, "fed.strategy": args.strategy}
    if args.sequential:
        overrides["fed.workers"] = 1
    cfg = load_config(args.config, overrides)
    try:
        text, summary, _ = execute(cfg)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rounds.csv").write_text(text)
    (out / "summary.json").write_text(dump_json(summary))
    final = summary["final"] or {}
    print(f"wrote {out/'rounds.csv'} and {out/'summary.json'}; final eval_loss={final.get('eval_loss')}")
    return 0


def theory_report(seeds: int = 10) -> dict:
    """Contraction, half-step descent and FFA gap checks on synthetic problems."""
    report = {}
    contraction = []
    for seed in range(seeds):
        rng = SeededRng(seed, ("theory",))
        prob = theory.gen_sensing(20, 10, 8, 3, 1, "orthonormal", rng.child("problem"))
        f0 = theory.aligned_init(prob, rng.child("init"))
        rep = theory.verify_contraction(prob, f0, 0.4, 60)
        contraction.append(rep.as_dict() | {"seed": seed, "recovered": rep.final_error < 1e-6})
    report["contraction"] = {
        "runs": contraction,
        "passed": all(r["passed"] and r["recovered"] for r in contraction),
    }

    violations = 0
    for seed in range(seeds):
        rng = SeededRng(seed, ("descent",))
        prob = theory.gen_sensing(60, 8, 6, 2, 1, "gaussian", rng.child("problem"))
        delta = theory.estimate_rip_delta(prob, 200, rng.child("rip"))
        eta = 0.9 * theory.admissible_eta(min(delta, 0.99), 1)
        f = theory.random_init(prob, rng.child("init"))
        for _ in range(20):
            half, full = theory.half_steps(prob, f, eta)
            l0, l1, l2 = (theory.sensing_loss(prob, x) for x in (f, half, full))
            violations += (l1 > l0 * (1 + 1e-12)) + (l2 > l1 * (1 + 1e-12))
            f = full
    report["half_step_descent"] = {"violations": int(violations), "passed": violations == 0}

    rng = SeededRng(0, ("ffa",))
    a0 = rng.child("a0").normal(3 * 10).reshape(3, 10)
    inside = rng.child("c").normal(6 * 3).reshape(6, 3) @ a0
    report["ffa_gap_inside"] = {"gap": theory.ffa_subspace_gap(a0, inside)}
    return report


def cmd_theory(args) -> int:
    sys.stdout.write(dump_json(theory_report(args.seeds)))
    return 0


def cmd_account(args) -> int:
    from .dp import PrivacySpec

    spec = PrivacySpec(1.0, args.sigma, args.rate, max(1, math.ceil(1 / args.rate)), args.delta)
    ledger = accountant.account_training(spec, args.rounds, args.steps)
    out = ledger.as_dict()
    if args.n_clients:
        sv = accountant.server_view(ledger.epsilon, args.delta, args.n_clients, args.client_rate)
        out["server_epsilon"], out["server_delta"] = sv.epsilon, sv.delta
    sys.stdout.write(dump_json(out))
    return 0


def cmd_calibrate(args) -> int:
    try:
        sigma = accountant.calibrate_sigma(args.epsilon, args.delta, args.rounds, args.steps, args.rate)
    except accountant.CalibrationError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    eps = accountant.epsilon_for(sigma, args.rate, args.rounds * args.steps, args.delta)
    sys.stdout.write(dump_json({"sigma": sigma, "epsilon": eps, "delta": args.delta}))
    return 0


def cmd_sweep(args) -> int:
    rng = SeededRng(args.seed, ("sweep-noise",))
    b = args.factor_std * rng.child("B").normal(args.m * args.r).reshape(args.m, args.r)
    a = args.factor_std * rng.child("A").normal(args.r * args.n).reshape(args.r, args.n)
    rows = perturbation_sweep(b, a, args.sigmas, args.draws, rng.child("noise"))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["sigma", "cross", "linear", "lora_total", "full"])
    for row in rows:
        w.writerow([repr(row.sigma), repr(row.cross), repr(row.linear), repr(row.lora_total), repr(row.full)])
    pos = [r for r in rows if r.sigma > 0]
    if len(pos) >= 2:
        print(f"# slopes: cross={loglog_slope([r.sigma for r in pos], [r.cross for r in pos]):.4f} "
              f"linear={loglog_slope([r.sigma for r in pos], [r.linear for r in pos]):.4f}", file=sys.stderr)
    return 0


def cmd_partition(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed})
    task = make_task(cfg)
    rng = SeededRng(cfg["seed"]).child("partition")
    min_size = int(math.ceil(1.0 / cfg["privacy.batch_fraction"]))
    parts = dirichlet_partition(task.data.y_train, cfg["fed.n_clients"], cfg["fed.dirichlet_beta"], rng, min_size)
    w = csv.writer(sys.stdout, lineterminator="\n")
    k = task.data.n_classes
    w.writerow(["client", "size"] + [f"class_{c}" for c in range(k)])
    for i, p in enumerate(parts):
        counts = np.bincount(task.data.y_train[p], minlength=k)
        w.writerow([i, p.size] + counts.tolist())
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(dump_defaults())
    return 0


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lalora", description="DP federated LoRA simulator and theory bench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one federated experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out-dir", default="out")
    r.add_argument("--strategy", choices=["dp_lora", "ffa_lora", "ro_lora", "la_lora"])
    r.add_argument("--sequential", action="store_true", help="force single-threaded canonical execution")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("theory", help="JSON report of the theory-bench checks")
    t.add_argument("--seeds", type=int, default=10)
    t.set_defaults(func=cmd_theory)

    a = sub.add_parser("account", help="epsilon spent for given noise and schedule")
    a.add_argument("--sigma", type=float, required=True)
    a.add_argument("--rate", type=float, required=True, help="local batch fraction b")
    a.add_argument("--rounds", type=int, required=True)
    a.add_argument("--steps", type=int, required=True)
    a.add_argument("--delta", type=float, default=1e-5)
    a.add_argument("--n-clients", type=int)
    a.add_argument("--client-rate", type=float, default=1.0)
    a.set_defaults(func=cmd_account)

    c = sub.add_parser("calibrate", help="noise multiplier for a target epsilon")
    c.add_argument("--epsilon", type=float, required=True)
    c.add_argument("--rate", type=float, required=True)
    c.add_argument("--rounds", type=int, required=True)
    c.add_argument("--steps", type=int, required=True)
    c.add_argument("--delta", type=float, default=1e-5)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sweep-noise", help="perturbation norms against sigma (CSV)")
    s.add_argument("--m", type=int, default=64)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--r", type=int, default=8)
    s.add_argument("--factor-std", type=float, default=0.1)
    s.add_argument("--sigmas", type=float, nargs="+", default=[0.1, 0.3, 1.0, 3.0, 10.0])
    s.add_argument("--draws", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sweep)

    ps = sub.add_parser("partition-stats", help="per-client sizes and class counts (CSV)")
    ps.add_argument("--config", required=True)
    ps.add_argument("--seed", type=int)
    ps.set_defaults(func=cmd_partition)

    cf = sub.add_parser("config", help="configuration utilities")
    cf_sub = cf.add_subparsers(dest="config_cmd", required=True)
    dd = cf_sub.add_parser("dump-defaults", help="print every key with its default")
    dd.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
