"""The FedAvg engine: round loop, client selection, local training, weighted
aggregation, convergence detection, and the hook where compromised clients
substitute malicious updates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import nn
from .data import Dataset
from .errors import AggregationError, CapacityError, SimulationError
from .metrics import MetricsRow, evaluate_round
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class FederationConfig:
    num_clients: int
    clients_per_round: int
    local_epochs: int = 1
    batch_size: int = 16
    rounds: int = 50
    learning_rate: float = 0.001
    seed: int = 0
    compromised: frozenset[int] = frozenset()
    attack_after_convergence: bool = True
    convergence_window: int = 10
    stop_after_horizon: int | None = None  # stop this many rounds after convergence
    retain_deltas: bool = False

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise CapacityError(
                f"clients_per_round {self.clients_per_round} not in [1, {self.num_clients}]")
        bad = [k for k in self.compromised if not 0 <= k < self.num_clients]
        if bad:
            raise CapacityError(f"compromised ids {bad} outside [0, {self.num_clients})")
        if self.local_epochs < 1:
            raise CapacityError("local_epochs must be >= 1")


@dataclass
class UpdateRecord:
    """One client's round contribution. `malicious` is ground truth kept for
    logging and simulation-side defenses, never visible to the aggregator
    logic itself."""

    client_id: int
    delta: np.ndarray | None
    num_samples: int
    norm: float
    malicious: bool
    target_class: int | None = None
    gamma: float | None = None
    q_estimate: float | None = None
    note: str | None = None


@dataclass
class RoundLog:
    round_index: int
    selected: list[int]
    records: list[UpdateRecord]
    accepted_ids: list[int]
    rejections: list  # defense.RejectionEvent
    threshold: float | None
    metrics: MetricsRow
    attack_gate_open: bool
    aggregated: bool

    @property
    def benign_norms(self) -> list[float]:
        return [r.norm for r in self.records if not r.malicious]

    @property
    def malicious_norms(self) -> list[float]:
        return [r.norm for r in self.records if r.malicious]

    @property
    def had_attack(self) -> bool:
        return any(r.malicious for r in self.records)


@dataclass
class ExperimentLog:
    rounds: list[RoundLog]
    converged_round: int | None
    final_params: np.ndarray
    compromised: frozenset[int]


class AttackStrategy(Protocol):
    name: str

    def craft(self, ctx: "AttackContext"):  # returns attacks.AttackResult
        ...


@dataclass
class AttackContext:
    """Everything a compromised client sees when crafting its update.

    `model_factory` builds the shared architecture: zero weights when called
    with no arguments (for loading a parameter vector), seeded initial
    weights when given a generator.
    """

    round_index: int
    global_params: np.ndarray
    dataset: Dataset
    model_factory: Callable[..., nn.Model]
    epochs: int
    batch_size: int
    learning_rate: float
    rng: np.random.Generator
    oracle_q: float | None = None  # server threshold this round, when a defense is active

    def child_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng.integers(0, 2 ** 63))

    def local_train(self, dataset: Dataset, rng: np.random.Generator) -> np.ndarray:
        return local_train(self.global_params, dataset, model_factory=self.model_factory,
                           epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.learning_rate, rng=rng)


def select_clients(num_clients: int, m: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample of m distinct client ids, ascending."""
    if m > num_clients:
        raise CapacityError(f"cannot select {m} of {num_clients} clients")
    return sorted(int(k) for k in rng.choice(num_clients, size=m, replace=False))


def local_train(global_params: np.ndarray, dataset: Dataset, *,
                model_factory: Callable[[], nn.Model], epochs: int, batch_size: int,
                lr: float, rng: np.random.Generator) -> np.ndarray:
    """Copy the global parameters into a fresh model and run shuffled
    mini-batch Adam with a fresh optimizer state. Returns the new parameters."""
    if len(dataset) == 0:
        raise CapacityError("cannot train on an empty shard")
    model = model_factory()
    model.set_params(global_params)
    params = model.get_params()
    state = nn.init_adam(params.size, lr=lr)
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            grads = nn.backward(model, dataset.x[idx], dataset.y[idx])
            params = nn.adam_step(params, grads, state)
            model.set_params(params)
    return params


def aggregate_fedavg(global_params: np.ndarray, updates: Sequence[UpdateRecord]) -> np.ndarray:
    """Add the sample-count-weighted mean of the update deltas."""
    if not updates:
        raise AggregationError("no updates to aggregate")
    total = float(sum(rec.num_samples for rec in updates))
    acc = np.zeros_like(global_params)
    for rec in updates:
        acc += (rec.num_samples / total) * rec.delta
    return global_params + acc


def converged(history: Sequence[float], window: int = 10) -> bool:
    """True once the best loss of the last `window` rounds no longer improves
    on the best of everything before them."""
    if len(history) < window + 1:
        return False
    return min(history[-window:]) >= min(history[:-window])


def run_experiment(cfg: FederationConfig, model_factory: Callable[[], nn.Model],
                   client_datasets: Sequence[Dataset], val_dataset: Dataset,
                   source_class: int, attack: AttackStrategy | None = None,
                   defense=None, fixed_ts_target: int | None = None) -> ExperimentLog:
    """Run the full round loop and return per-round logs.

    Compromised clients invoke the attack strategy only once the validation
    loss has plateaued (unless `attack_after_convergence` is off). The
    defense, when present, filters updates before aggregation and is fed the
    round's benign norms afterwards. Everything is reproducible from the
    seed: selection, shuffling and attack randomness draw from disjoint
    per-round streams.
    """
    g = model_factory(stream(cfg.seed, "init")).get_params()

    eval_model = model_factory()
    ts_target = fixed_ts_target
    history: list[float] = []
    gate_open = not cfg.attack_after_convergence
    converged_round: int | None = None
    logs: list[RoundLog] = []

    for t in range(1, cfg.rounds + 1):
        selected = select_clients(cfg.num_clients, cfg.clients_per_round,
                                  stream(cfg.seed, "select", t))
        oracle_q = None
        if defense is not None:
            oracle_q = defense.threshold()
        records: list[UpdateRecord] = []
        chosen_this_round: int | None = None
        for k in selected:
            shard = client_datasets[k]
            try:
                if attack is not None and k in cfg.compromised and gate_open:
                    ctx = AttackContext(
                        round_index=t, global_params=g, dataset=shard,
                        model_factory=model_factory, epochs=cfg.local_epochs,
                        batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                        rng=stream(cfg.seed, "attack", t, k), oracle_q=oracle_q)
                    res = attack.craft(ctx)
                    delta = res.params - g
                    rec = UpdateRecord(k, delta, len(shard), nn.norm_diff(res.params, g),
                                       malicious=res.malicious, target_class=res.target,
                                       gamma=res.gamma, q_estimate=res.q_estimate,
                                       note=res.note)
                    if res.malicious and res.target is not None and chosen_this_round is None:
                        chosen_this_round = res.target
                else:
                    params_k = local_train(g, shard, model_factory=model_factory,
                                           epochs=cfg.local_epochs, batch_size=cfg.batch_size,
                                           lr=cfg.learning_rate,
                                           rng=stream(cfg.seed, "train", t, k))
                    delta = params_k - g
                    rec = UpdateRecord(k, delta, len(shard), float(np.linalg.norm(delta)),
                                       malicious=False)
            except SimulationError as exc:
                log.warning("round %d: client %d failed (%s); excluded", t, k, exc)
                continue
            records.append(rec)

        if defense is not None:
            accepted, rejections, threshold = defense.apply(records)
        else:
            accepted, rejections, threshold = list(records), [], None

        aggregated = bool(accepted)
        if aggregated:
            g = aggregate_fedavg(g, accepted)
        else:
            log.warning("round %d: all updates rejected; global model unchanged", t)

        if defense is not None:
            defense.observe_round([r.norm for r in records if not r.malicious])

        if chosen_this_round is not None:
            ts_target = chosen_this_round
        eval_model.set_params(g)
        row = evaluate_round(eval_model, val_dataset, source_class, t,
                             ts_target, chosen_this_round)
        history.append(row.val_loss)

        if not cfg.retain_deltas:
            for rec in records:
                rec.delta = None
        logs.append(RoundLog(
            round_index=t, selected=selected, records=records,
            accepted_ids=[r.client_id for r in accepted],
            rejections=rejections, threshold=threshold, metrics=row,
            attack_gate_open=gate_open, aggregated=aggregated))

        if converged_round is None and converged(history, cfg.convergence_window):
            converged_round = t
            gate_open = True
        if (cfg.stop_after_horizon is not None and converged_round is not None
                and t >= converged_round + cfg.stop_after_horizon):
            break

    return ExperimentLog(rounds=logs, converged_round=converged_round,
                         final_params=g, compromised=cfg.compromised)
