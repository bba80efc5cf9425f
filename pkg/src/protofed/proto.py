"""Class prototypes and prototype margins.

A prototype is the mean embedding of all samples of one class. Margins
contrast same-class prototype distance against cross-class distances; they
drive the attentive aggregation and the latent-space instruments.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nn import ModelSpec, ParamSet, forward_batch

# class index -> margin in [-1, 1]
MarginVector = dict[int, float]


@dataclass
class PrototypeSet:
    """Per-class mean feature vectors with their support counts.

    Classes with zero support are simply absent. The same container holds
    raw and min-max-normalized prototypes; normalization status is a
    property of how the set was produced.
    """

    protos: dict[int, np.ndarray]
    counts: dict[int, int]
    dim: int

    def __post_init__(self):
        if set(self.protos) != set(self.counts):
            raise ValueError("protos and counts must cover the same classes")
        for c, v in self.protos.items():
            if v.shape != (self.dim,):
                raise ValueError(f"prototype for class {c} has shape {v.shape}, expected ({self.dim},)")
            if self.counts[c] < 1:
                raise ValueError(f"class {c} present with non-positive count {self.counts[c]}")

    @property
    def classes(self) -> list[int]:
        return sorted(self.protos)

    def copy(self) -> "PrototypeSet":
        return PrototypeSet({c: v.copy() for c, v in self.protos.items()}, dict(self.counts), self.dim)


# Alias used in signatures where min-max-normalized input is expected.
NormalizedPrototypeSet = PrototypeSet


def empty_prototype_set(dim: int) -> PrototypeSet:
    return PrototypeSet({}, {}, dim)


def extract_prototypes(params: ParamSet, spec: ModelSpec, x: np.ndarray, y: np.ndarray) -> PrototypeSet:
    """Mean embedding per ground-truth class over (x, y)."""
    if len(y) == 0:
        raise ValueError("cannot extract prototypes from empty data")
    _, emb = forward_batch(params, spec, x)
    protos: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for c in np.unique(y):
        rows = emb[y == c]
        protos[int(c)] = rows.mean(axis=0)
        counts[int(c)] = len(rows)
    return PrototypeSet(protos, counts, emb.shape[1])


def minmax_normalize(p: PrototypeSet) -> NormalizedPrototypeSet:
    """Rescale each prototype vector to [0, 1] over its channels.

    A constant vector maps to all-zeros (consistent with zero
    initialization of prototypes).
    """
    out: dict[int, np.ndarray] = {}
    for c, v in p.protos.items():
        lo, hi = v.min(), v.max()
        if hi == lo:
            out[c] = np.zeros_like(v)
        else:
            out[c] = (v - lo) / (hi - lo)
    return PrototypeSet(out, dict(p.counts), p.dim)


def spm(p_i: NormalizedPrototypeSet, p_j: NormalizedPrototypeSet) -> MarginVector:
    """Semantic prototype margin per shared class.

    Restricting to classes present in both sets, for each class c the
    same-class distance d+ = ||p_i[c] - p_j[c]|| is contrasted against the
    mean cross-class distance d- of p_i[c] to the other classes of p_j:
    margin = (d- - d+) / (d- + d+), in [-1, 1]. Degenerate cases (fewer
    than two shared classes, or d- + d+ = 0) contribute a neutral 0.
    """
    shared = sorted(set(p_i.protos) & set(p_j.protos))
    if not shared:
        return {}
    if len(shared) < 2:
        return {shared[0]: 0.0}
    vi = np.stack([p_i.protos[c] for c in shared])
    vj = np.stack([p_j.protos[c] for c in shared])
    # dist[a, b] = || p_i[class a] - p_j[class b] ||
    dist = np.linalg.norm(vi[:, None, :] - vj[None, :, :], axis=2)
    margins: MarginVector = {}
    m = len(shared)
    for a, c in enumerate(shared):
        d_plus = dist[a, a]
        d_minus = (dist[a].sum() - d_plus) / (m - 1)
        denom = d_minus + d_plus
        margins[c] = 0.0 if denom == 0.0 else float((d_minus - d_plus) / denom)
    return margins


def lpm(before: NormalizedPrototypeSet, after: NormalizedPrototypeSet) -> MarginVector:
    """Local prototype margin: before-vs-after local training."""
    return spm(before, after)


def apm(local: NormalizedPrototypeSet, aggregate: NormalizedPrototypeSet) -> MarginVector:
    """Aggregate prototype margin: local vs server-side aggregate."""
    return spm(local, aggregate)


def dplus_total(p_i: NormalizedPrototypeSet, p_j: NormalizedPrototypeSet) -> float:
    """Sum of same-class prototype distances over shared classes.

    Margin-free displacement used by the d+-only ablation; 0 when the sets
    share no class.
    """
    shared = set(p_i.protos) & set(p_j.protos)
    return float(sum(np.linalg.norm(p_i.protos[c] - p_j.protos[c]) for c in sorted(shared)))


def aggregate_prototypes(locals_: list[PrototypeSet]) -> PrototypeSet:
    """Support-weighted mean of local prototypes, class by class."""
    if not locals_:
        raise ValueError("need at least one prototype set to aggregate")
    dim = locals_[0].dim
    if any(p.dim != dim for p in locals_):
        raise ValueError("prototype sets have inconsistent dimensionality")
    protos: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    all_classes = sorted({c for p in locals_ for c in p.protos})
    for c in all_classes:
        total = sum(p.counts[c] for p in locals_ if c in p.protos)
        acc = np.zeros(dim)
        for p in locals_:
            if c in p.protos:
                acc += (p.counts[c] / total) * p.protos[c]
        protos[c] = acc
        counts[c] = total
    return PrototypeSet(protos, counts, dim)


def prototypes_to_json(p: PrototypeSet) -> str:
    payload = {
        "dim": p.dim,
        "classes": {str(c): {"count": p.counts[c], "proto": p.protos[c].tolist()} for c in p.classes},
    }
    return json.dumps(payload)


def prototypes_from_json(text: str) -> PrototypeSet:
    payload = json.loads(text)
    protos = {int(c): np.array(rec["proto"], dtype=np.float64) for c, rec in payload["classes"].items()}
    counts = {int(c): int(rec["count"]) for c, rec in payload["classes"].items()}
    return PrototypeSet(protos, counts, payload["dim"])
