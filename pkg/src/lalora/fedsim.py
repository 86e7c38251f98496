"""Federated simulation of DP LoRA fine-tuning.

Four strategies share one local loop and differ only in which factor a
local step touches:

* ``dp_lora``  both factors every step (simultaneous update)
* ``ffa_lora`` B only, A frozen at its initialization
* ``ro_lora``  one factor per round: B on rounds 1, 3, ...; A on rounds 2, 4, ...
* ``la_lora``  one factor per local step, following an AlternationSchedule

Every random draw is addressed by (seed, purpose, client, round, step),
so a run is bit-reproducible and any single client step can be replayed.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import dp
from .accountant import PrivacyLedger, account_training
from .diagnostics import hessian_max_eig, induced_cosine
from .lora import AlternationSchedule, LoraAdapter, Phase, init_adapter, phase_for_step, projected_grad_a, projected_grad_b
from .numkit import PowerResult, SeededRng, ShapeError, matmul
from .smoothing import SmoothingKernel, smooth_grad_a, smooth_grad_b
from .tasks import Dataset, LoraTask, accuracy, softmax_loss_and_grad, softmax_residuals

__all__ = [
    "Strategy",
    "FedPlan",
    "ClientState",
    "RoundLog",
    "ClientDiverged",
    "NumericFailure",
    "dirichlet_partition",
    "step_phase",
    "batch_indices",
    "local_update",
    "aggregate",
    "ExperimentResult",
    "run_experiment",
    "lora_param_grad",
    "final_sharpness",
]

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    DP_LORA = "dp_lora"
    FFA_LORA = "ffa_lora"
    RO_LORA = "ro_lora"
    LA_LORA = "la_lora"


class ClientDiverged(FloatingPointError):
    """A client's factors became non-finite during local training."""


class NumericFailure(FloatingPointError):
    """Every participating client diverged in the same round."""


@dataclass(frozen=True)
class FedPlan:
    n_clients: int = 8
    rounds: int = 50
    local_steps: int = 20
    client_rate: float = 0.5
    dirichlet_beta: float = 0.1
    strategy: Strategy = Strategy.LA_LORA
    filter_on: bool = True
    schedule: AlternationSchedule = AlternationSchedule()
    lr_a: float = 0.1
    lr_b: float = 0.1
    lr_decay: float = 0.99
    rank: int = 4
    alpha: float = 4.0
    client_sampling: str = "uniform"  # or "poisson"
    optimizer: str = "plain"  # or "projected"
    workers: int = 1

    def __post_init__(self):
        if self.local_steps < 0 or self.rounds < 0:
            raise ValueError("rounds and local_steps must be non-negative")
        if not 0 < self.client_rate <= 1:
            raise ValueError("client_rate must lie in (0, 1]")
        if math.floor(self.client_rate * self.n_clients) < 1:
            raise ValueError("floor(client_rate * n_clients) must be >= 1")
        if not self.dirichlet_beta > 0:
            raise ValueError("dirichlet_beta must be positive")
        if self.client_sampling not in ("uniform", "poisson"):
            raise ValueError(f"unknown client_sampling {self.client_sampling!r}")
        if self.optimizer not in ("plain", "projected"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def clients_per_round(self) -> int:
        return int(math.floor(self.client_rate * self.n_clients))


@dataclass(frozen=True)
class ClientState:
    id: int
    indices: np.ndarray


@dataclass(frozen=True)
class RoundLog:
    round: int
    train_loss: float
    eval_loss: float
    eval_acc: float
    grad_cosine_mean: float
    eps_spent: float
    sigma: float
    strategy: str
    update_norm_a: float
    update_norm_b: float
    clients: tuple = ()
    dropped: tuple = ()


def dirichlet_partition(
    labels: np.ndarray,
    n_clients: int,
    beta: float,
    rng: SeededRng,
    min_size: int = 1,
    max_attempts: int = 100,
) -> list[np.ndarray]:
    """Non-iid split: each class is divided by Dirichlet(beta) proportions.

    Counts use largest-remainder rounding. A draw that leaves some client
    with fewer than ``min_size`` samples is redrawn up to ``max_attempts``
    times. After that, samples move round-robin from the largest clients.
    """
    labels = np.asarray(labels)
    if not beta > 0:
        raise ValueError("beta must be positive")
    if n_clients < 1:
        raise ValueError("need at least one client")
    if labels.size < n_clients * min_size:
        raise ValueError(f"{labels.size} samples cannot give {n_clients} clients {min_size} each")
    classes = np.unique(labels)
    parts = None
    for attempt in range(max_attempts):
        gen = rng.child("dirichlet", attempt).generator()
        buckets = [[] for _ in range(n_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            idx = idx[gen.permutation(idx.size)]
            props = gen.dirichlet(np.full(n_clients, beta))
            raw = props * idx.size
            counts = np.floor(raw).astype(int)
            short = idx.size - counts.sum()
            order = np.lexsort((np.arange(n_clients), -(raw - counts)))
            counts[order[:short]] += 1
            start = 0
            for i, cnt in enumerate(counts):
                buckets[i].extend(idx[start:start + cnt].tolist())
                start += cnt
        parts = [np.sort(np.array(b, dtype=int)) for b in buckets]
        if min(p.size for p in parts) >= min_size:
            return parts
    # round-robin patch: move samples from the largest client until all reach min_size
    parts = [p.tolist() for p in parts]
    while True:
        sizes = [len(p) for p in parts]
        need = [i for i, s in enumerate(sizes) if s < min_size]
        if not need:
            break
        for i in need:
            donor = int(np.argmax([len(p) for p in parts]))
            if len(parts[donor]) <= min_size:
                raise ValueError("cannot make every client reach the minimum size")
            parts[i].append(parts[donor].pop())
    return [np.sort(np.array(p, dtype=int)) for p in parts]


def step_phase(plan: FedPlan, k: int, t: int) -> Phase:
    """Factor(s) updated at local step ``k`` of round ``t`` (both 1-based)."""
    if plan.strategy is Strategy.LA_LORA:
        return phase_for_step(plan.schedule, k)
    if plan.strategy is Strategy.DP_LORA:
        return Phase.UPDATE_BOTH
    if plan.strategy is Strategy.FFA_LORA:
        return Phase.B_ONLY
    return Phase.UPDATE_B if (t - 1) % 2 == 0 else Phase.UPDATE_A


def batch_indices(rng: SeededRng, client: int, t: int, k: int, n_local: int, size: int) -> np.ndarray:
    """Mini-batch positions within a client slice, uniform without replacement."""
    return rng.child("batch", client, t, k).generator().choice(n_local, size=size, replace=False)


class LocalResult(NamedTuple):
    a: np.ndarray
    b: np.ndarray
    cosines: list


def _induced_cos(resid, x, a, b, s) -> float | None:
    """Induced-direction cosine of the clean batch factor gradients; None while B = 0."""
    if not np.any(b):
        return None
    g = matmul(resid.T, x) / x.shape[0]
    return induced_cosine(s * matmul(b.T, g), s * matmul(g, a.T), a, b, s)


def local_update(
    client: ClientState,
    a: np.ndarray,
    b: np.ndarray,
    w0: np.ndarray,
    data: Dataset,
    plan: FedPlan,
    privacy: dp.PrivacySpec,
    kernel: SmoothingKernel | None,
    t: int,
    rng: SeededRng,
    track_cosine: bool = True,
) -> LocalResult:
    """K local steps of clipped, noised (and optionally smoothed) factor descent.

    ``privacy.local_dataset_size`` must equal the client's slice size.
    Smoothing is applied strictly after privatization.
    """
    if privacy.local_dataset_size != client.indices.size:
        raise ValueError("privacy spec does not match the client's dataset size")
    if a.shape[1] != w0.shape[1] or b.shape[0] != w0.shape[0] or a.shape[0] != b.shape[1]:
        raise ShapeError("global factors do not fit w0")
    s = plan.alpha / plan.rank
    decay = plan.lr_decay**t
    lr_a, lr_b = plan.lr_a * decay, plan.lr_b * decay
    x_all = data.x_train[client.indices]
    y_all = data.y_train[client.indices]
    size = privacy.batch_size
    cosines = []
    a = a.copy()
    b = b.copy()
    for k in range(1, plan.local_steps + 1):
        phase = step_phase(plan, k, t)
        pos = batch_indices(rng, client.id, t, k, client.indices.size, size)
        x, y = x_all[pos], y_all[pos]
        w = w0 + s * matmul(b, a)
        _, resid = softmax_residuals(w, x, y)
        if track_cosine:
            c = _induced_cos(resid, x, a, b, s)
            if c is not None:
                cosines.append(c)
        noise = rng.child("noise", client.id, t, k)

        new_a, new_b = a, b
        if phase in (Phase.UPDATE_B, Phase.B_ONLY, Phase.UPDATE_BOTH):
            u = matmul(x, a.T)  # (batch, r)
            per = s * resid[:, :, None] * u[:, None, :]
            g_b = dp.privatize_batch(per, privacy, noise.child("B"))
            if plan.optimizer == "projected":
                g_b = projected_grad_b(g_b, a, s)
            if kernel is not None and plan.filter_on:
                g_b = smooth_grad_b(g_b, kernel)
            new_b = b - lr_b * g_b
        if phase in (Phase.UPDATE_A, Phase.UPDATE_BOTH):
            v = matmul(resid, b)  # (batch, r)
            per = s * v[:, :, None] * x[:, None, :]
            g_a = dp.privatize_batch(per, privacy, noise.child("A"))
            if plan.optimizer == "projected":
                g_a = projected_grad_a(g_a, b, s)
            if kernel is not None and plan.filter_on:
                g_a = smooth_grad_a(g_a, kernel)
            new_a = a - lr_a * g_a
        a, b = new_a, new_b
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ClientDiverged(f"client {client.id} diverged at round {t}, step {k}")
    return LocalResult(a, b, cosines)


def aggregate(uploads: Sequence[tuple | None]) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Entrywise mean of ``(A_i, B_i)``, accumulated in list order.

    ``None`` or non-finite uploads are dropped and the rest renormalized.
    Returns ``(A, B, dropped_positions)``.
    """
    if len(uploads) == 0:
        raise ValueError("no uploads to aggregate")
    kept, dropped = [], []
    for i, up in enumerate(uploads):
        if up is None or not (np.all(np.isfinite(up[0])) and np.all(np.isfinite(up[1]))):
            dropped.append(i)
            continue
        kept.append(up)
    if not kept:
        raise NumericFailure("every upload was rejected")
    a_shape, b_shape = kept[0][0].shape, kept[0][1].shape
    # incremental mean in list order: exact for identical uploads, unlike sum / n
    mean_a, mean_b = np.array(kept[0][0], dtype=float), np.array(kept[0][1], dtype=float)
    for i, (a_i, b_i) in enumerate(kept[1:], start=2):
        if a_i.shape != a_shape or b_i.shape != b_shape:
            raise ShapeError("uploads disagree in shape")
        mean_a += (a_i - mean_a) / i
        mean_b += (b_i - mean_b) / i
    if dropped:
        log.warning("dropped %d non-finite upload(s) at positions %s", len(dropped), dropped)
    return mean_a, mean_b, dropped


@dataclass
class ExperimentResult:
    logs: list
    adapter: LoraAdapter
    partition: list
    ledger: PrivacyLedger | None
    cosine_trace: list = field(default_factory=list)


def _sample_clients(plan: FedPlan, rng: SeededRng, t: int) -> list[int]:
    gen = rng.child("clients", t).generator()
    if plan.client_sampling == "poisson":
        return [i for i, u in enumerate(gen.random(plan.n_clients)) if u < plan.client_rate]
    return sorted(gen.choice(plan.n_clients, size=plan.clients_per_round, replace=False).tolist())


def _eval(w, data: Dataset) -> tuple[float, float, float]:
    train_loss, _ = softmax_loss_and_grad(w, data.x_train, data.y_train)
    losses, _ = softmax_residuals(w, data.x_eval, data.y_eval)
    return train_loss, float(np.mean(losses)), accuracy(w, data.x_eval, data.y_eval)


def run_experiment(
    plan: FedPlan,
    task: LoraTask,
    privacy: dp.PrivacySpec,
    kernel: SmoothingKernel | None,
    seed: int,
) -> ExperimentResult:
    """Run ``plan.rounds`` rounds of sampling, local updates, FedAvg and evaluation.

    ``privacy.local_dataset_size`` is ignored; each client uses its own
    slice size with the shared batch fraction.
    """
    rng = SeededRng(seed)
    data = task.data
    min_size = int(math.ceil(1.0 / privacy.batch_fraction))
    partition = dirichlet_partition(data.y_train, plan.n_clients, plan.dirichlet_beta, rng.child("partition"), min_size=min_size)
    clients = [ClientState(i, idx) for i, idx in enumerate(partition)]
    adapter = init_adapter(task.w0, plan.rank, plan.alpha, rng.child("init"))
    a0 = adapter.a
    logs: list[RoundLog] = []
    trace: list[float] = []
    a, b = adapter.a, adapter.b

    def work(cid, t):
        spec = replace(privacy, local_dataset_size=int(clients[cid].indices.size))
        try:
            return local_update(clients[cid], a, b, task.w0, data, plan, spec, kernel, t, rng)
        except ClientDiverged as exc:
            log.warning("%s", exc)
            return None

    for t in range(1, plan.rounds + 1):
        chosen = _sample_clients(plan, rng, t)
        if not chosen:
            results = []
        elif plan.workers > 1:
            with ThreadPoolExecutor(plan.workers) as pool:
                results = list(pool.map(lambda cid: work(cid, t), chosen))
        else:
            results = [work(cid, t) for cid in chosen]
        dropped = ()
        if results:
            uploads = [None if r is None else (r.a, r.b) for r in results]
            new_a, new_b, drop_pos = aggregate(uploads)
            dropped = tuple(chosen[i] for i in drop_pos)
            for r in results:
                if r is not None:
                    trace.extend(r.cosines)
        else:
            new_a, new_b = a, b
        norm_a = float(np.linalg.norm(new_a - a))
        norm_b = float(np.linalg.norm(new_b - b))
        a, b = new_a, new_b
        w = task.w0 + adapter.s * matmul(b, a)
        train_loss, eval_loss, eval_acc = _eval(w, data)
        cos_round = [c for r in results if r is not None for c in r.cosines]
        eps = account_training(privacy, t, plan.local_steps).epsilon if privacy.private else math.inf
        logs.append(
            RoundLog(
                round=t,
                train_loss=train_loss,
                eval_loss=eval_loss,
                eval_acc=eval_acc,
                grad_cosine_mean=float(np.mean(cos_round)) if cos_round else math.nan,
                eps_spent=eps,
                sigma=privacy.sigma,
                strategy=plan.strategy.value,
                update_norm_a=norm_a,
                update_norm_b=norm_b,
                clients=tuple(chosen),
                dropped=dropped,
            )
        )
    final = adapter.with_factors(a=a, b=b)
    if plan.strategy is Strategy.FFA_LORA:
        assert np.array_equal(final.a, a0)
    ledger = account_training(privacy, plan.rounds, plan.local_steps) if privacy.private else None
    return ExperimentResult(logs, final, partition, ledger, trace)


def lora_param_grad(task: LoraTask, s: float, r: int, x=None, y=None):
    """Gradient of the mean softmax loss over ``theta = concat(vec A, vec B)``."""
    w0 = task.w0
    m, n = w0.shape
    x = task.data.x_train if x is None else x
    y = task.data.y_train if y is None else y

    def grad(theta):
        a = theta[: r * n].reshape(r, n)
        b = theta[r * n:].reshape(m, r)
        _, g = softmax_loss_and_grad(w0 + s * matmul(b, a), x, y)
        return np.concatenate([(s * matmul(b.T, g)).ravel(), (s * matmul(g, a.T)).ravel()])

    return grad


def final_sharpness(result: ExperimentResult, task: LoraTask, iters: int = 300, tol: float = 1e-7) -> PowerResult:
    """Largest Hessian eigenvalue of the training loss over the final LoRA factors."""
    ad = result.adapter
    theta = np.concatenate([ad.a.ravel(), ad.b.ravel()])
    return hessian_max_eig(lora_param_grad(task, ad.s, ad.rank), theta, iters=iters, tol=tol)
