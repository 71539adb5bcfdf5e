"""Federated round loop: client selection, local training, aggregation.

Randomness is keyed by (master seed, round, client), never by execution
order, so rounds replay identically whether clients run serially or on a
thread pool.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import ClientShard, LabeledDataset, mixed_batch_iter
from .errors import AggregationError, DivergenceError, StateError, VhlError
from .vhl import VhlConfig, vhl_step_loss

STRATEGIES = ("fedavg", "fedprox", "scaffold", "fednova")
LR_DECAY = 0.992

# spawn-key tags that keep selection and client streams disjoint
_SELECT, _CLIENT, _INIT = 0, 1, 2


def lr_at_round(base_lr, r, decay=LR_DECAY):
    if r < 0:
        raise ValueError("round index must be non-negative")
    return base_lr * decay**r


def client_seed(master_seed, round_idx, client_id) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(_CLIENT, int(round_idx), int(client_id)))


def selection_rng(master_seed, round_idx) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(_SELECT, int(round_idx))))


def init_rng(master_seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(_INIT,)))


@dataclass(frozen=True)
class LocalConfig:
    epochs: int = 1
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = LR_DECAY
    batch_size: int = 128
    fedprox_mu: float = 0.1
    vhl: VhlConfig = field(default_factory=lambda: VhlConfig(mode="off"))

    def __post_init__(self):
        if self.epochs < 1:
            raise VhlError("local epochs must be >= 1")
        if self.batch_size < 1:
            raise VhlError("batch_size must be >= 1")


@dataclass
class ServerState:
    round: int
    params: nn.ModelParams
    strategy: str = "fedavg"
    seed: int = 0
    num_clients: int = 1
    control: nn.ModelParams | None = None
    client_controls: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise StateError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "scaffold" and self.control is None:
            self.control = self.params.zeros_like()

    def client_control(self, cid) -> nn.ModelParams:
        return self.client_controls.get(cid) or self.params.zeros_like()


@dataclass
class ClientUpdate:
    client: int
    params: nn.ModelParams
    n_samples: int
    steps: int
    mean_loss: float = 0.0
    mean_penalty: float = 0.0


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    train_loss: float
    client_drift: float
    calibration_penalty: float
    lr: float
    selected: tuple = ()
    diagnostics: dict = field(default_factory=dict)


def local_train(
    spec: nn.MlpSpec,
    global_params: nn.ModelParams,
    shard: ClientShard,
    config: LocalConfig,
    round_idx: int,
    seed: np.random.SeedSequence,
    virtual=None,
    strategy: str = "fedavg",
    correction: nn.ModelParams | None = None,
) -> ClientUpdate:
    """E epochs of momentum SGD on mixed natural/virtual batches.

    ``correction`` is the SCAFFOLD term (c - c_i) added to every step's
    gradient; FedProx adds mu * (w - w_global). The momentum buffer starts
    from zero every round.
    """
    lr = lr_at_round(config.base_lr, round_idx, config.lr_decay)
    vcfg = config.vhl
    b_v = vcfg.virtual_batch_size if vcfg.uses_virtual else 0
    w = global_params.copy()
    buffer = None
    steps, loss_sum, pen_sum = 0, 0.0, 0.0
    # derive epoch streams from the key rather than spawn(), which mutates the caller's sequence
    for e in range(config.epochs):
        epoch_seed = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (e,))
        for batch in mixed_batch_iter(shard, virtual, config.batch_size, b_v, epoch_seed):
            # overflow shows up as a non-finite loss, reported below as a DivergenceError
            with np.errstate(over="ignore", invalid="ignore"):
                res = vhl_step_loss(spec, w, batch.x, batch.y, batch.vx, batch.vy, vcfg)
            if not math.isfinite(res.loss):
                raise DivergenceError("non-finite local loss", step=steps, client=shard.owner)
            grad = res.grad
            if strategy == "fedprox" and config.fedprox_mu:
                grad = grad + config.fedprox_mu * (w - global_params)
            elif strategy == "scaffold" and correction is not None:
                grad = grad + correction
            w, buffer = nn.sgd_momentum_step(w, grad, lr, config.momentum, config.weight_decay, buffer)
            steps += 1
            loss_sum += res.loss
            pen_sum += res.diagnostics["penalty"]
    return ClientUpdate(shard.owner, w, shard.n_samples, steps, loss_sum / steps, pen_sum / steps)


def _sorted(updates):
    if not updates:
        raise AggregationError("no client updates to aggregate")
    return sorted(updates, key=lambda u: u.client)


def sample_weights(updates) -> np.ndarray:
    n = np.array([u.n_samples for u in updates], dtype=np.float64)
    if np.any(n <= 0):
        raise AggregationError("sample counts must be positive")
    return n / n.sum()


def aggregate_fedavg(updates, weights=None) -> nn.ModelParams:
    """Weighted mean of client models; weights default to n_k / sum n_k."""
    if weights is None:
        updates = _sorted(updates)
        p = sample_weights(updates)
    else:
        if not updates:
            raise AggregationError("no client updates to aggregate")
        pairs = sorted(zip(updates, weights), key=lambda t: t[0].client)
        updates = [u for u, _ in pairs]
        p = np.array([wt for _, wt in pairs], dtype=np.float64)
        if np.any(p <= 0):
            raise AggregationError("aggregation weights must be positive")
        p = p / p.sum()
    flat = np.zeros_like(updates[0].params.flat)
    for pk, u in zip(p, updates):
        flat += pk * u.params.flat
    return nn.ModelParams(updates[0].params.spec, flat)


def aggregate_fednova(global_params: nn.ModelParams, updates) -> nn.ModelParams:
    """w - tau_eff * sum_k p_k (w - w_k) / tau_k with tau_eff = sum_k p_k tau_k."""
    updates = _sorted(updates)
    if any(u.steps < 1 for u in updates):
        raise AggregationError("FedNova needs every client to report at least one local step")
    p = sample_weights(updates)
    tau_eff = float(np.dot(p, [u.steps for u in updates]))
    direction = np.zeros_like(global_params.flat)
    for pk, u in zip(p, updates):
        direction += pk * (global_params.flat - u.params.flat) / u.steps
    return nn.ModelParams(global_params.spec, global_params.flat - tau_eff * direction)


def scaffold_server_update(state: ServerState, updates, lr_local) -> ServerState:
    """Option-II control variates, then the weighted model mean."""
    updates = _sorted(updates)
    c = state.control
    if c is None or c.flat.shape != state.params.flat.shape:
        raise StateError("server control variate missing or mis-shaped")
    controls = dict(state.client_controls)
    delta_sum = np.zeros_like(c.flat)
    for u in updates:
        c_i = state.client_control(u.client)
        if c_i.flat.shape != c.flat.shape:
            raise StateError(f"client {u.client} control variate is mis-shaped")
        new_ci = c_i.flat - c.flat + (state.params.flat - u.params.flat) / (u.steps * lr_local)
        delta_sum += new_ci - c_i.flat
        controls[u.client] = nn.ModelParams(c.spec, new_ci)
    frac = len(updates) / state.num_clients
    new_c = nn.ModelParams(c.spec, c.flat + frac * delta_sum / len(updates))
    return replace(state, params=aggregate_fedavg(updates), control=new_c, client_controls=controls)


def client_drift(aggregate: nn.ModelParams, client_models) -> float:
    models = list(client_models)
    if not models:
        raise AggregationError("client_drift needs at least one client model")
    return float(np.mean([np.linalg.norm(aggregate.flat - m.flat) for m in models]))


def accuracy(spec: nn.MlpSpec, params: nn.ModelParams, dataset: LabeledDataset) -> float:
    """Top-1 accuracy restricted to the natural-class logits."""
    if len(dataset) == 0:
        return 0.0
    # a blown-up model evaluates to garbage logits rather than a warning storm
    with np.errstate(over="ignore", invalid="ignore"):
        logits = nn.forward(spec, params, dataset.features).logits[:, : spec.natural_classes]
    return float((logits.argmax(axis=1) == dataset.labels).mean())


def select_clients(master_seed, round_idx, num_clients, per_round) -> list[int]:
    m = min(per_round, num_clients)
    if m < 1:
        raise VhlError("no client selectable")
    chosen = selection_rng(master_seed, round_idx).choice(num_clients, size=m, replace=False)
    return sorted(int(c) for c in chosen)


def run_round(
    spec: nn.MlpSpec,
    state: ServerState,
    shards: list[ClientShard],
    config: LocalConfig,
    clients_per_round: int,
    test_set: LabeledDataset | None = None,
    virtual=None,
    workers: int = 1,
    selected: list[int] | None = None,
) -> tuple[ServerState, RoundMetrics]:
    r = state.round
    lr = lr_at_round(config.base_lr, r, config.lr_decay)
    if selected is None:
        selected = select_clients(state.seed, r, len(shards), clients_per_round)

    def train(cid):
        correction = None
        if state.strategy == "scaffold":
            correction = state.control - state.client_control(cid)
        try:
            return local_train(spec, state.params, shards[cid], config, r,
                               client_seed(state.seed, r, cid), virtual, state.strategy, correction)
        except DivergenceError:
            raise
        except (ArithmeticError, FloatingPointError, VhlError) as exc:
            raise DivergenceError(f"{type(exc).__name__}: {exc}", client=cid) from exc

    if workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(train, selected))
    else:
        updates = [train(cid) for cid in selected]

    if state.strategy == "scaffold":
        new_state = scaffold_server_update(state, updates, lr)
    elif state.strategy == "fednova":
        new_state = replace(state, params=aggregate_fednova(state.params, updates))
    else:
        new_state = replace(state, params=aggregate_fedavg(updates))
    new_state = replace(new_state, round=r + 1)

    ordered = _sorted(updates)
    p = sample_weights(ordered)
    metrics = RoundMetrics(
        round=r + 1,
        accuracy=accuracy(spec, new_state.params, test_set) if test_set is not None else float("nan"),
        train_loss=float(np.dot(p, [u.mean_loss for u in ordered])),
        client_drift=client_drift(new_state.params, [u.params for u in ordered]),
        calibration_penalty=float(np.dot(p, [u.mean_penalty for u in ordered])),
        lr=lr,
        selected=tuple(u.client for u in ordered),
        diagnostics={"steps": {u.client: u.steps for u in ordered}},
    )
    return new_state, metrics
