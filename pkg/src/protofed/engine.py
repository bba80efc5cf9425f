"""Federated round loop.

Each round: sample clients, broadcast the global model, run local training
(with straggler simulation and optional partial-workload toleration),
exchange prototypes and margins, build the round's attention vector per
strategy, and aggregate. Per-client randomness comes from streams derived
from (seed, client), so client work is order-independent and replays are
bit-exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics, rand
from .agg import (
    StrategyConfig,
    aggregate_weights,
    attention_entropy,
    deviation,
    dplus_deviation,
    fairness_attention,
    fedavg_attention,
    federated_attention,
    normalize_attention,
)
from .data import ClientDataset, FederatedDataset
from .metrics import RoundRecord
from .nn import ModelSpec, ParamSet, init_params, local_train
from .proto import (
    MarginVector,
    PrototypeSet,
    aggregate_prototypes,
    apm,
    dplus_total,
    empty_prototype_set,
    extract_prototypes,
    lpm,
    minmax_normalize,
)


@dataclass
class SimConfig:
    model: ModelSpec
    strategy: StrategyConfig
    rounds: int                 # nominal T; the loop runs ceil(1.1 T)
    local_epochs: int           # F
    clients_per_round: int      # K'
    lr: float
    batch_size: int
    delta: float                # fraction of stragglers per round
    seed: int
    eval_every: int = 1
    mmd_every: int = 0          # 0 -> follow eval_every
    moving_avg_window_frac: float = 0.1
    sampling: str = "proportional"  # proportional | iid
    lr_schedule: str = "constant"
    mmd_reference_points: int = 512

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.sampling not in ("proportional", "iid"):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.lr_schedule != "constant":
            raise ValueError("only the constant lr schedule is supported")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    @property
    def total_rounds(self) -> int:
        # ceil(1.1 T) in exact integer arithmetic
        return self.rounds + (self.rounds + 9) // 10

    @property
    def effective_mmd_every(self) -> int:
        return self.mmd_every if self.mmd_every >= 1 else self.eval_every


@dataclass
class RoundState:
    t: int
    global_params: ParamSet
    global_protos: PrototypeSet       # normalized aggregate from the previous round
    global_protos_raw: PrototypeSet   # unnormalized twin, feeds the margin instrument
    selected: list[int] = field(default_factory=list)
    straggler_epochs: dict[int, int] = field(default_factory=dict)


@dataclass
class ClientReport:
    """What a client sends back: updated weights, its local margin vector,
    and its prototypes (raw + normalized views of the same statistic)."""

    client_id: int
    updated_params: ParamSet
    lpm: MarginVector
    local_protos: PrototypeSet        # min-max normalized
    local_protos_raw: PrototypeSet
    epochs_done: int
    n_train: int
    local_dplus: float | None = None  # d+-only ablation statistic


def sample_clients(dataset: FederatedDataset, count: int, weighting: str, seed: int, t: int) -> list[int]:
    """Weighted sampling without replacement of the round's participants;
    proportional weighting uses training-set sizes. Sorted ascending."""
    ids = np.arange(dataset.num_clients)
    if count > len(ids):
        raise ValueError(f"cannot select {count} of {len(ids)} clients")
    if weighting == "proportional":
        sizes = np.array([c.n_train for c in dataset.clients], dtype=np.float64)
        p = sizes / sizes.sum()
    elif weighting == "iid":
        p = None
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    gen = rand.rng(seed, rand.SELECT, t)
    chosen = gen.choice(ids, size=count, replace=False, p=p)
    return sorted(int(k) for k in chosen)


def assign_stragglers(selected, delta: float, local_epochs: int, seed: int, t: int) -> dict[int, int]:
    """Pick floor(delta * K') of the selected clients and give each a
    reduced epoch budget drawn uniformly from {0, ..., F-1}."""
    selected = sorted(selected)
    m = int(math.floor(delta * len(selected)))
    if m == 0:
        return {}
    gen = rand.rng(seed, rand.STRAGGLER, t)
    chosen = sorted(int(k) for k in gen.choice(np.array(selected), size=m, replace=False))
    budgets = gen.integers(0, local_epochs, size=m)
    return {k: int(f) for k, f in zip(chosen, budgets)}


def _client_update(
    global_params: ParamSet,
    config: SimConfig,
    client: ClientDataset,
    epochs: int,
    t: int,
    need_margins: bool,
) -> ClientReport:
    """Local step of one client: prototypes before (margin strategies
    only), local SGD for the epoch budget, prototypes and margins after.
    Sees only the broadcast parameters and its own data."""
    x, y = client.train_x, client.train_y
    before = None
    if need_margins:
        before = minmax_normalize(extract_prototypes(global_params, config.model, x, y))
    proximal = None
    if config.strategy.kind == "fedprox":
        proximal = (config.strategy.prox_mu, global_params)
    updated = local_train(
        global_params,
        config.model,
        x,
        y,
        epochs,
        config.lr,
        config.batch_size,
        proximal=proximal,
        seed=rand.derive_seed(config.seed, rand.CLIENT, client.client_id),
        epoch_offset=t * config.local_epochs,
    )
    raw_after = extract_prototypes(updated, config.model, x, y)
    after = minmax_normalize(raw_after)
    margins: MarginVector = {}
    local_dplus = None
    if need_margins:
        if config.strategy.fedproto_variant == "dplus_only":
            local_dplus = dplus_total(before, after)
        else:
            margins = lpm(before, after)
    return ClientReport(
        client_id=client.client_id,
        updated_params=updated,
        lpm=margins,
        local_protos=after,
        local_protos_raw=raw_after,
        epochs_done=epochs,
        n_train=client.n_train,
        local_dplus=local_dplus,
    )


def _fedproto_attention(reports: list[ClientReport], state: RoundState, config: SimConfig):
    """Round attention from local and aggregate margin deviations."""
    variant = config.strategy.fedproto_variant
    sizes = {r.client_id: r.n_train for r in reports}
    if state.t == 0:
        return federated_attention({}, {}, 0, sizes)
    if variant == "dplus_only":
        v_loc = {r.client_id: _sigmoid_of(r.local_dplus) for r in reports}
        v_agg = {r.client_id: dplus_deviation(r.local_protos, state.global_protos) for r in reports}
    else:
        v_loc = deviation({r.client_id: r.lpm for r in reports})
        v_agg = deviation({r.client_id: apm(r.local_protos, state.global_protos) for r in reports})
    a_loc = normalize_attention(v_loc)
    a_agg = normalize_attention(v_agg)
    if variant == "lpm_only":
        a_agg = a_loc
    elif variant == "apm_only":
        a_loc = a_agg
    return federated_attention(a_loc, a_agg, state.t, sizes)


def _sigmoid_of(total: float) -> float:
    return 1.0 / (1.0 + math.exp(-total))


def run_round(state: RoundState, config: SimConfig, dataset: FederatedDataset):
    """Execute one federated round from `state`.

    Returns (new_state, reports, attention). Stragglers either report
    partial work (toleration on) or are dropped (off); with every report
    dropped the global model and prototypes carry over unchanged.
    """
    strategy = config.strategy
    full_epochs = config.local_epochs
    active = [
        k
        for k in state.selected
        if strategy.tolerate_stragglers or k not in state.straggler_epochs
    ]
    need_margins = strategy.kind == "fedproto"
    reports = [
        _client_update(
            state.global_params,
            config,
            dataset.clients[k],
            state.straggler_epochs.get(k, full_epochs),
            state.t,
            need_margins,
        )
        for k in active
    ]
    if not reports:
        carried = RoundState(
            t=state.t + 1,
            global_params=state.global_params.copy(),
            global_protos=state.global_protos,
            global_protos_raw=state.global_protos_raw,
        )
        return carried, [], {}

    if strategy.kind in ("fedavg", "fedprox"):
        attention = fedavg_attention({r.client_id: r.n_train for r in reports})
    elif strategy.kind == "fairness":
        attention = fairness_attention([r.client_id for r in reports])
    else:
        attention = _fedproto_attention(reports, state, config)

    new_params = aggregate_weights({r.client_id: r.updated_params for r in reports}, attention)
    new_state = RoundState(
        t=state.t + 1,
        global_params=new_params,
        global_protos=aggregate_prototypes([r.local_protos for r in reports]),
        global_protos_raw=aggregate_prototypes([r.local_protos_raw for r in reports]),
    )
    return new_state, reports, attention


def run_simulation(
    config: SimConfig,
    dataset: FederatedDataset,
    centralized_params: ParamSet | None = None,
) -> tuple[list[RoundRecord], ParamSet]:
    """Run ceil(1.1 T) rounds and log one RoundRecord per round.

    Expensive metrics are computed every eval_every rounds (MMD every
    mmd_every, and only when a centralized reference model is supplied);
    the final round is always evaluated. Fully determined by (config,
    dataset, centralized_params).
    """
    if config.clients_per_round > dataset.num_clients:
        raise ValueError("clients_per_round exceeds the client population")
    model = config.model
    params = init_params(model, rand.rng(config.seed, rand.INIT))
    state = RoundState(
        t=0,
        global_params=params,
        global_protos=empty_prototype_set(model.embedding_dim),
        global_protos_raw=empty_prototype_set(model.embedding_dim),
    )
    reference = None
    if centralized_params is not None:
        reference = metrics.reference_embeddings(
            centralized_params, model, dataset, config.seed, config.mmd_reference_points
        )
    records: list[RoundRecord] = []
    total = config.total_rounds
    mmd_every = config.effective_mmd_every
    for t in range(total):
        state.selected = sample_clients(dataset, config.clients_per_round, config.sampling, config.seed, t)
        state.straggler_epochs = assign_stragglers(
            state.selected, config.delta, config.local_epochs, config.seed, t
        )
        selected = state.selected
        new_state, _, attention = run_round(state, config, dataset)
        if not new_state.global_params.all_finite():
            raise FloatingPointError(f"non-finite global parameters after round {t}")
        last = t == total - 1
        acc = loss = gd = mmd_value = None
        if t % config.eval_every == 0 or last:
            acc = metrics.accuracy(new_state.global_params, model, dataset)
            gd, loss = metrics.grad_dissimilarity_and_loss(new_state.global_params, model, dataset)
        if reference is not None and (t % mmd_every == 0 or last):
            mmd_value = metrics.mean_mmd_to_reference(
                new_state.global_params, model, dataset, selected, reference
            )
        records.append(
            RoundRecord(
                t=t,
                accuracy=acc,
                loss=loss,
                grad_dissimilarity=gd,
                amm=metrics.amm(new_state.global_protos_raw),
                mmd=mmd_value,
                attention_entropy=attention_entropy(attention),
            )
        )
        state = new_state
    return records, state.global_params


def train_centralized(
    dataset: FederatedDataset,
    model: ModelSpec,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> ParamSet:
    """Plain SGD over the union of all clients' training splits; the
    reference model for MMD / FFD and the reported centralized accuracy."""
    x, y = dataset.pooled_train()
    params = init_params(model, rand.rng(seed, rand.CENTRAL_INIT))
    if epochs == 0:
        return params
    return local_train(
        params,
        model,
        x,
        y,
        epochs,
        lr,
        batch_size,
        seed=rand.derive_seed(seed, rand.CENTRAL),
        epoch_offset=0,
    )
