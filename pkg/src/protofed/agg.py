"""Client deviations, attention vectors, and weight aggregation.

Margins are folded into per-client deviations through a sigmoid, deviations
are normalized into attention weights, and attention convexly combines the
clients' parameter sets. FedAvg / Fairness weights are the size-proportional
and uniform special cases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .nn import ParamSet, check_congruent
from .proto import MarginVector, NormalizedPrototypeSet, dplus_total

# client id -> value
DeviationVector = dict[int, float]
AttentionVector = dict[int, float]

STRATEGY_KINDS = ("fedavg", "fairness", "fedprox", "fedproto")
FEDPROTO_VARIANTS = ("full", "lpm_only", "apm_only", "dplus_only")


@dataclass(frozen=True)
class StrategyConfig:
    """Which aggregation rule a simulation runs, and its knobs."""

    kind: str
    tolerate_stragglers: bool
    fedproto_variant: str = "full"
    prox_mu: float = 0.0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.fedproto_variant not in FEDPROTO_VARIANTS:
            raise ValueError(f"unknown fedproto variant {self.fedproto_variant!r}")
        if self.kind != "fedproto" and self.fedproto_variant != "full":
            raise ValueError("fedproto_variant is only meaningful for kind='fedproto'")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be non-negative")
        if self.kind != "fedprox" and self.prox_mu != 0.0:
            raise ValueError("prox_mu is only meaningful for kind='fedprox'")


def _sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def deviation(margins_per_client: dict[int, MarginVector]) -> DeviationVector:
    """Sigmoid of each client's summed margins; empty margins give the
    neutral 0.5."""
    return {k: _sigmoid(sum(m.values())) for k, m in margins_per_client.items()}


def dplus_deviation(p_local: NormalizedPrototypeSet, p_ref: NormalizedPrototypeSet) -> float:
    """Deviation entry for the d+-only ablation: sigmoid of summed
    same-class distances instead of the margin sum."""
    return _sigmoid(dplus_total(p_local, p_ref))


def normalize_attention(v: DeviationVector) -> AttentionVector:
    """Deviations scaled to sum to 1."""
    if not v:
        raise ValueError("cannot normalize an empty deviation vector")
    total = sum(v[k] for k in sorted(v))
    return {k: v[k] / total for k in v}


def fedavg_attention(sizes: dict[int, int]) -> AttentionVector:
    """Weights proportional to local training-set size."""
    if not sizes:
        raise ValueError("cannot build attention over zero clients")
    if any(n < 1 for n in sizes.values()):
        raise ValueError("client sizes must be >= 1")
    total = sum(sizes[k] for k in sorted(sizes))
    return {k: sizes[k] / total for k in sizes}


def fairness_attention(clients) -> AttentionVector:
    """Uniform weights 1/K' over the round's clients."""
    clients = list(clients)
    if not clients:
        raise ValueError("cannot build attention over zero clients")
    w = 1.0 / len(clients)
    return {k: w for k in clients}


def federated_attention(
    a_loc: AttentionVector,
    a_agg: AttentionVector,
    t: int,
    sizes: dict[int, int],
) -> AttentionVector:
    """Round attention: size-proportional at t = 0, elementwise mean of the
    local and aggregate attention vectors afterwards."""
    if t == 0:
        return fedavg_attention(sizes)
    if set(a_loc) != set(a_agg):
        raise ValueError("local and aggregate attention cover different clients")
    return {k: (a_agg[k] + a_loc[k]) / 2.0 for k in a_loc}


def aggregate_weights(params: dict[int, ParamSet], a: AttentionVector) -> ParamSet:
    """Convex combination of client parameter sets, summed in ascending
    client-id order for bit determinism."""
    if set(params) != set(a):
        raise ValueError("attention keys do not match client parameter keys")
    if not params:
        raise ValueError("nothing to aggregate")
    order = sorted(params)
    first = params[order[0]]
    for k in order[1:]:
        check_congruent(first, params[k])
    out = first.zeros_like()
    for k in order:
        weight = a[k]
        for (ow, ob), (w, b) in zip(out.layers, params[k].layers):
            ow += weight * w
            ob += weight * b
    return out


def attention_entropy(a: AttentionVector) -> float:
    """Shannon entropy (nats) of an attention vector; empty -> 0."""
    return float(-sum(w * math.log(w) for w in a.values() if w > 0.0))
