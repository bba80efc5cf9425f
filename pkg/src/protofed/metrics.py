"""Quantitative instruments: accuracy, loss, gradient dissimilarity,
aggregate mean margin, MMD / feature-discrepancy gain, smoothing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rand
from .data import FederatedDataset
from .nn import ModelSpec, ParamSet, forward_batch, loss_and_grad
from .proto import PrototypeSet


@dataclass
class RoundRecord:
    """One row of the per-round log. Expensive metrics are None on rounds
    where evaluation was skipped; mmd additionally requires a trained
    centralized reference."""

    t: int
    accuracy: float | None
    loss: float | None
    grad_dissimilarity: float | None
    amm: float
    mmd: float | None
    attention_entropy: float

    def __post_init__(self):
        for name in ("accuracy", "loss", "grad_dissimilarity", "amm", "mmd", "attention_entropy"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"non-finite {name} at round {self.t}: {v}")
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy out of range at round {self.t}: {self.accuracy}")


def accuracy(params: ParamSet, spec: ModelSpec, dataset: FederatedDataset) -> float:
    """Mean over clients of the fraction of correct argmax predictions on
    each client's test split.

    Every client counts equally regardless of size; under the benchmark's
    power-law sample counts a pooled (size-weighted) average is dominated
    by the single largest client and stops reflecting federation-wide
    performance.
    """
    fractions = []
    for client in dataset.clients:
        if client.n_test == 0:
            continue
        logits, _ = forward_batch(params, spec, client.test_x)
        correct = int((np.argmax(logits, axis=1) == client.test_y).sum())
        fractions.append(correct / client.n_test)
    if not fractions:
        raise ValueError("dataset has no test samples")
    return float(np.mean(fractions))


def grad_dissimilarity_and_loss(params: ParamSet, spec: ModelSpec, dataset: FederatedDataset) -> tuple[float, float]:
    """One pass over all clients' training splits returning

    - mean over clients of || g_k - g_mean ||^2, where g_k is the client's
      full-batch gradient and g_mean the size-weighted mean gradient, and
    - the size-weighted mean training loss.
    """
    sizes = np.array([c.n_train for c in dataset.clients], dtype=np.float64)
    weights = sizes / sizes.sum()
    n_clients = dataset.num_clients
    sq_sum = 0.0
    flat_sum = None
    flat_weighted = None
    loss_total = 0.0
    for client, w in zip(dataset.clients, weights):
        loss_k, grad_k = loss_and_grad(params, spec, client.train_x, client.train_y)
        g = grad_k.flat()
        sq_sum += float(g @ g)
        if flat_sum is None:
            flat_sum = g.copy()
            flat_weighted = w * g
        else:
            flat_sum += g
            flat_weighted += w * g
        loss_total += w * loss_k
    # (1/K) sum ||g_k - g_mean||^2 expanded to avoid storing every gradient
    mean_dot = float(flat_sum @ flat_weighted) / n_clients
    value = sq_sum / n_clients - 2.0 * mean_dot + float(flat_weighted @ flat_weighted)
    return max(0.0, value), loss_total


def grad_dissimilarity(params: ParamSet, spec: ModelSpec, dataset: FederatedDataset) -> float:
    return grad_dissimilarity_and_loss(params, spec, dataset)[0]


def train_loss(params: ParamSet, spec: ModelSpec, dataset: FederatedDataset) -> float:
    return grad_dissimilarity_and_loss(params, spec, dataset)[1]


def _interclass_distances(protos: PrototypeSet) -> np.ndarray | None:
    classes = protos.classes
    if len(classes) < 2:
        return None
    v = np.stack([protos.protos[c] for c in classes])
    diff = v[:, None, :] - v[None, :, :]
    return np.linalg.norm(diff, axis=2)


def amm(protos: PrototypeSet) -> float:
    """Aggregate mean margin, adopted reading: mean over classes of the
    mean distance to the other classes' prototypes (the same-class term is
    identically zero when a set is compared against itself, so the
    normalized margin ratio always saturates; see amm_literal). Computed on
    unnormalized prototypes; 0 with fewer than two classes."""
    dist = _interclass_distances(protos)
    if dist is None:
        return 0.0
    m = dist.shape[0]
    d_minus = (dist.sum(axis=1)) / (m - 1)  # diagonal is zero
    return float(d_minus.mean())


def amm_literal(protos: PrototypeSet) -> float:
    """Diagnostic: the margin ratio of a prototype set against itself.

    d+ is identically 0, so every class with a positive cross-class
    distance contributes exactly 1; kept so the saturation is inspectable."""
    dist = _interclass_distances(protos)
    if dist is None:
        return 0.0
    m = dist.shape[0]
    d_minus = dist.sum(axis=1) / (m - 1)
    margins = np.where(d_minus > 0.0, 1.0, 0.0)
    return float(margins.mean())


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def median_bandwidth(p: np.ndarray, q: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled samples, clamped
    below at 1e-12."""
    pooled = np.concatenate([p, q])
    d2 = _sq_dists(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return max(med, 1e-12)


def mmd(p: np.ndarray, q: np.ndarray, estimator: str = "unbiased", bandwidth: float | None = None) -> float:
    """Squared maximum mean discrepancy with a Gaussian kernel
    k(x, y) = exp(-||x - y||^2 / (2 h^2)).

    h defaults to the median heuristic over the pooled samples. The
    unbiased estimator excludes diagonal terms and can be slightly
    negative; reporting paths clamp at 0. Each sample needs >= 2 points
    for the unbiased estimator.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != q.shape[1]:
        raise ValueError("samples must be 2-d arrays of common dimensionality")
    n, m = len(p), len(q)
    if estimator not in ("unbiased", "biased"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if estimator == "unbiased" and (n < 2 or m < 2):
        raise ValueError(f"unbiased estimator needs >= 2 points per sample, got {n} and {m}")
    if n < 1 or m < 1:
        raise ValueError("empty sample")
    h = median_bandwidth(p, q) if bandwidth is None else max(float(bandwidth), 1e-12)
    c = -0.5 / (h * h)
    k_pp = np.exp(c * _sq_dists(p, p))
    k_qq = np.exp(c * _sq_dists(q, q))
    k_pq = np.exp(c * _sq_dists(p, q))
    if estimator == "biased":
        return float(k_pp.mean() + k_qq.mean() - 2.0 * k_pq.mean())
    pp = (k_pp.sum() - np.trace(k_pp)) / (n * (n - 1))
    qq = (k_qq.sum() - np.trace(k_qq)) / (m * (m - 1))
    return float(pp + qq - 2.0 * k_pq.mean())


def embeddings_of(params: ParamSet, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    _, emb = forward_batch(params, spec, x)
    return emb


def reference_embeddings(
    centralized_params: ParamSet,
    spec: ModelSpec,
    dataset: FederatedDataset,
    seed: int,
    max_points: int = 512,
) -> np.ndarray:
    """Embeddings of the centralized model on a seeded subsample (<= max_points)
    of the pooled test data."""
    x, _ = dataset.pooled_test()
    if len(x) > max_points:
        idx = rand.rng(seed, rand.MMD_REF).choice(len(x), size=max_points, replace=False)
        x = x[np.sort(idx)]
    return embeddings_of(centralized_params, spec, x)


def mean_mmd_to_reference(
    params: ParamSet,
    spec: ModelSpec,
    dataset: FederatedDataset,
    round_clients,
    reference: np.ndarray,
) -> float | None:
    """Mean over the round's clients of MMD between the global model's
    embeddings on that client's test data and the reference embeddings.

    Per-client estimates are clamped at 0 for reporting. Clients with
    fewer than 2 test points are skipped (the unbiased estimator is
    undefined there); returns None if no client qualifies.
    """
    values = []
    for k in sorted(round_clients):
        client = dataset.clients[k]
        if client.n_test < 2:
            continue
        emb = embeddings_of(params, spec, client.test_x)
        values.append(max(0.0, mmd(emb, reference)))
    if not values:
        return None
    return float(np.mean(values))


def federated_mmd(
    global_params: ParamSet,
    centralized_params: ParamSet,
    spec: ModelSpec,
    dataset: FederatedDataset,
    round_clients,
    seed: int = 0,
    reference_points: int = 512,
) -> float | None:
    """MMD of the global model's per-client feature distributions against a
    centralized model's features, averaged over the round's clients."""
    reference = reference_embeddings(centralized_params, spec, dataset, seed, reference_points)
    return mean_mmd_to_reference(global_params, spec, dataset, round_clients, reference)


def ffd(mmd_a: float, mmd_b: float) -> float:
    """Relative gain (%) of mmd_a over the baseline mmd_b."""
    if mmd_b <= 0.0:
        raise ValueError(f"ffd undefined for baseline mmd {mmd_b}")
    return (mmd_b - mmd_a) / mmd_b * 100.0


def moving_average(series, window_frac: float) -> list[float]:
    """Trailing mean with window max(1, ceil(window_frac * len)); early
    entries average over the available prefix."""
    values = list(series)
    if not values:
        raise ValueError("empty series")
    w = max(1, int(np.ceil(window_frac * len(values))))
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= w:
            acc -= values[i - w]
        out.append(acc / min(i + 1, w))
    return out
