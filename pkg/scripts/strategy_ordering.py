"""Desk-scale comparison of the four strategies at a fixed privacy budget.

Each strategy's learning rate is chosen from a small grid on a separate
tuning seed, then every strategy is run on the evaluation seeds. Prints one
line per (seed, strategy) with final eval loss, accuracy, late-window
gradient cosine and (optionally) the Hessian's largest eigenvalue.

    python scripts/strategy_ordering.py --seeds 5 --hessian
"""

import argparse
import time

from lalora.cli import execute, make_task
from lalora.config import resolve
from lalora.fedsim import final_sharpness

BASE = {
    "task.per_class": 200,
    "privacy.batch_fraction": 0.1,
    "privacy.epsilon_target": 1.0,
    "fed.n_clients": 8,
    "fed.client_rate": 0.5,
    "fed.rounds": 50,
    "fed.local_steps": 20,
}
# baselines run without the smoothing filter, LA-LoRA with it
METHODS = {
    "dp_lora": {"fed.strategy": "dp_lora", "filter.on": False},
    "ffa_lora": {"fed.strategy": "ffa_lora", "filter.on": False},
    "ro_lora": {"fed.strategy": "ro_lora", "filter.on": False},
    "la_lora": {"fed.strategy": "la_lora", "filter.on": True},
}
LR_GRID = (0.01, 0.02, 0.1, 0.2)
TUNING_SEED = 100


def final_loss(cfg):
    return execute(cfg)[1]["final"]["eval_loss"]


def tune(name, overrides):
    scores = {}
    for lr in LR_GRID:
        cfg = resolve({**BASE, **overrides, "seed": TUNING_SEED, "fed.lr_a": lr, "fed.lr_b": lr})
        scores[lr] = final_loss(cfg)
    best = min(scores, key=scores.get)
    print(f"tune {name}: " + " ".join(f"{lr}:{v:.4f}" for lr, v in scores.items()) + f" -> {best}", flush=True)
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--methods", nargs="+", default=list(METHODS))
    p.add_argument("--lr", type=float, help="skip tuning and use this learning rate for every method")
    p.add_argument("--hessian", action="store_true")
    args = p.parse_args()

    start = time.perf_counter()
    lrs = {m: args.lr if args.lr is not None else tune(m, METHODS[m]) for m in args.methods}
    print("seed,strategy,lr,eval_loss,eval_acc,late_cosine,lambda_max")
    for seed in range(args.seeds):
        for m in args.methods:
            cfg = resolve({**BASE, **METHODS[m], "seed": seed, "fed.lr_a": lrs[m], "fed.lr_b": lrs[m]})
            _, summary, result = execute(cfg)
            lam = final_sharpness(result, make_task(cfg)).value if args.hessian else float("nan")
            fin = summary["final"]
            print(f"{seed},{m},{lrs[m]},{fin['eval_loss']:.4f},{fin['eval_acc']:.3f},"
                  f"{summary['late_cosine_mean']:.4f},{lam:.4f}", flush=True)
    print(f"# {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
