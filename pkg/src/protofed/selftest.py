"""Fast oracle and property suites, runnable via `protofed selftest`.

Every check re-derives its expected values through an independent route
(finite differences, brute-force double loops, direct formula evaluation)
and is sized to keep the whole run well under a minute.
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import rand
from .agg import fedavg_attention, federated_attention, normalize_attention
from .data import ClientDataset, FederatedDataset
from .engine import RoundState, SimConfig, run_round, run_simulation
from .metrics import mmd, moving_average
from .nn import (
    ModelSpec,
    ParamSet,
    init_params,
    local_train,
    loss_and_grad,
    params_equal,
)
from .proto import PrototypeSet, aggregate_prototypes, empty_prototype_set, spm
from .agg import StrategyConfig


def _random_model(gen) -> tuple[ModelSpec, ParamSet]:
    input_dim = int(gen.integers(2, 6))
    hidden = tuple(int(h) for h in gen.integers(2, 6, size=int(gen.integers(1, 3))))
    classes = int(gen.integers(2, 5))
    spec = ModelSpec(input_dim, hidden, classes)
    return spec, init_params(spec, gen)


def _batch_away_from_kinks(gen, spec, params, margin: float = 1e-3):
    """Draw a batch whose hidden pre-activations stay clear of the ReLU
    kink, where finite differences disagree with any subgradient."""
    from .nn import _forward_acts

    for _ in range(100):
        x = gen.normal(size=(int(gen.integers(2, 8)), spec.input_dim))
        y = gen.integers(0, spec.num_classes, size=len(x))
        _, _, zs = _forward_acts(params.layers, spec, x)
        if all(np.abs(z).min() > margin for z in zs):
            return x, y
    raise RuntimeError("could not find a kink-free batch")


def check_gradients() -> tuple[bool, str]:
    """Analytic gradient vs central finite differences over 20 seeds."""
    worst = 0.0
    for seed in range(20):
        gen = rand.rng(seed, 900)
        spec, params = _random_model(gen)
        for w, b in params.layers:
            b += gen.normal(0.0, 0.1, size=b.shape)
        x, y = _batch_away_from_kinks(gen, spec, params)
        _, grad = loss_and_grad(params, spec, x, y)
        eps = 1e-5
        for li, (w, b) in enumerate(params.layers):
            for arr, garr in ((w, grad.layers[li][0]), (b, grad.layers[li][1])):
                flat = arr.ravel()
                gflat = garr.ravel()
                for idx in range(flat.size):
                    orig = flat[idx]
                    flat[idx] = orig + eps
                    up, _ = loss_and_grad(params, spec, x, y)
                    flat[idx] = orig - eps
                    dn, _ = loss_and_grad(params, spec, x, y)
                    flat[idx] = orig
                    fd = (up - dn) / (2 * eps)
                    denom = max(abs(fd), abs(gflat[idx]))
                    if denom > 1e-8:
                        worst = max(worst, abs(fd - gflat[idx]) / denom)
                    else:
                        worst = max(worst, abs(fd - gflat[idx]))
    return worst < 1e-4, f"max relative error {worst:.3g}"


def _random_prototype_set(gen, dim: int, classes) -> PrototypeSet:
    protos = {int(c): gen.uniform(0.0, 1.0, size=dim) for c in classes}
    counts = {int(c): int(gen.integers(1, 20)) for c in classes}
    return PrototypeSet(protos, counts, dim)


def _spm_bruteforce(p_i: PrototypeSet, p_j: PrototypeSet) -> dict[int, float]:
    shared = sorted(set(p_i.protos) & set(p_j.protos))
    if not shared:
        return {}
    if len(shared) < 2:
        return {shared[0]: 0.0}
    out = {}
    for c in shared:
        d_plus = float(np.sqrt(((p_i.protos[c] - p_j.protos[c]) ** 2).sum()))
        others = [
            float(np.sqrt(((p_i.protos[c] - p_j.protos[cc]) ** 2).sum()))
            for cc in shared
            if cc != c
        ]
        d_minus = sum(others) / len(others)
        denom = d_minus + d_plus
        out[c] = 0.0 if denom == 0 else (d_minus - d_plus) / denom
    return out


def check_spm_oracle() -> tuple[bool, str]:
    """200 random prototype pairs vs a double-loop oracle, plus range."""
    worst = 0.0
    gen = rand.rng(1, 901)
    for _ in range(200):
        dim = int(gen.integers(2, 8))
        all_classes = list(range(int(gen.integers(2, 7))))
        cls_i = [c for c in all_classes if gen.random() < 0.8] or all_classes[:1]
        cls_j = [c for c in all_classes if gen.random() < 0.8] or all_classes[:1]
        p_i = _random_prototype_set(gen, dim, cls_i)
        p_j = _random_prototype_set(gen, dim, cls_j)
        got = spm(p_i, p_j)
        want = _spm_bruteforce(p_i, p_j)
        if set(got) != set(want):
            return False, f"class sets differ: {sorted(got)} vs {sorted(want)}"
        for c in got:
            worst = max(worst, abs(got[c] - want[c]))
            if not -1.0 <= got[c] <= 1.0:
                return False, f"margin {got[c]} outside [-1, 1]"
    return worst < 1e-12, f"max deviation from oracle {worst:.3g}"


def check_attention_normalization() -> tuple[bool, str]:
    """500 random deviation vectors normalize to sum 1 within 1e-9."""
    gen = rand.rng(2, 902)
    worst = 0.0
    for _ in range(500):
        k = int(gen.integers(1, 21))
        v = {i: float(gen.uniform(1e-6, 1.0)) for i in range(k)}
        total = sum(normalize_attention(v).values())
        worst = max(worst, abs(total - 1.0))
    return worst < 1e-9, f"max |sum - 1| = {worst:.3g}"


def check_prototype_aggregation() -> tuple[bool, str]:
    """Count-weighted aggregation vs brute force; convex per coordinate."""
    gen = rand.rng(3, 903)
    worst = 0.0
    for _ in range(100):
        dim = int(gen.integers(2, 6))
        n_sets = int(gen.integers(1, 5))
        sets = []
        for _ in range(n_sets):
            classes = [c for c in range(4) if gen.random() < 0.7] or [0]
            sets.append(_random_prototype_set(gen, dim, classes))
        agg = aggregate_prototypes(sets)
        for c in agg.protos:
            holders = [p for p in sets if c in p.protos]
            total = sum(p.counts[c] for p in holders)
            want = sum(p.counts[c] * p.protos[c] for p in holders) / total
            worst = max(worst, float(np.abs(agg.protos[c] - want).max()))
            stack = np.stack([p.protos[c] for p in holders])
            if (agg.protos[c] < stack.min(axis=0) - 1e-12).any() or (
                agg.protos[c] > stack.max(axis=0) + 1e-12
            ).any():
                return False, f"class {c} left its convex hull"
            if agg.counts[c] != total:
                return False, f"class {c} count {agg.counts[c]} != {total}"
    return worst < 1e-12, f"max deviation from oracle {worst:.3g}"


def check_round_zero_attention() -> tuple[bool, str]:
    """The t = 0 branch is exactly the size-proportional rule."""
    gen = rand.rng(4, 904)
    for _ in range(100):
        sizes = {i: int(gen.integers(1, 500)) for i in range(int(gen.integers(1, 12)))}
        if federated_attention({}, {}, 0, sizes) != fedavg_attention(sizes):
            return False, f"mismatch for sizes {sizes}"
    return True, "t=0 attention equals size-proportional weights on 100 draws"


def _single_class_dataset(num_clients: int, per_client: int, dim: int, seed: int) -> FederatedDataset:
    """Clients holding one class each: every margin vector degenerates to
    {c: 0}, so deviations are exactly 0.5 for everyone."""
    gen = rand.rng(seed, 905)
    clients = []
    for k in range(num_clients):
        c = k % 3
        x = gen.normal(loc=c, size=(per_client, dim))
        y = np.full(per_client, c, dtype=np.int64)
        n_tr = per_client - 2
        clients.append(ClientDataset(k, x[:n_tr], y[:n_tr], x[n_tr:], y[n_tr:]))
    return FederatedDataset(clients, 3, dim, num_clients * per_client)


def check_uniform_margins_match_fairness() -> tuple[bool, str]:
    """With all margin sums identical (here: exactly zero), a margin-guided
    round aggregates bitwise like a fairness round."""
    dataset = _single_class_dataset(num_clients=4, per_client=8, dim=3, seed=5)
    model = ModelSpec(3, (4,), 3)

    def one_round(kind: str, variant: str = "full"):
        config = SimConfig(
            model=model,
            strategy=StrategyConfig(kind, True, variant),
            rounds=2,
            local_epochs=1,
            clients_per_round=4,
            lr=0.05,
            batch_size=4,
            delta=0.0,
            seed=11,
        )
        params = init_params(model, rand.rng(11, rand.INIT))
        state = RoundState(0, params, empty_prototype_set(4), empty_prototype_set(4),
                           selected=list(range(4)), straggler_epochs={})
        state1, reports, _ = run_round(state, config, dataset)
        # margins only steer attention from round 1 on
        state1.selected = list(range(4))
        state1.straggler_epochs = {}
        state2, _, attention = run_round(state1, config, dataset)
        return state2.global_params, attention

    p_proto, a_proto = one_round("fedproto")
    p_fair, a_fair = one_round("fairness")
    if a_proto != a_fair:
        return False, f"attention differs: {a_proto} vs {a_fair}"
    if not params_equal(p_proto, p_fair):
        return False, "aggregated parameters differ bitwise"
    return True, "margin-guided round == fairness round (bitwise)"


def check_single_client_reduction() -> tuple[bool, str]:
    """1-client federation is centralized SGD: the simulation must equal
    one uninterrupted local_train of T_total * F epochs."""
    gen = rand.rng(6, 906)
    x = gen.normal(size=(12, 4))
    y = gen.integers(0, 3, size=12)
    dataset = FederatedDataset(
        [ClientDataset(0, x[:9], y[:9].astype(np.int64), x[9:], y[9:].astype(np.int64))], 3, 4, 12
    )
    model = ModelSpec(4, (5,), 3)
    config = SimConfig(
        model=model,
        strategy=StrategyConfig("fedavg", False),
        rounds=3,
        local_epochs=2,
        clients_per_round=1,
        lr=0.05,
        batch_size=4,
        delta=0.0,
        seed=21,
    )
    _, final = run_simulation(config, dataset)
    direct = local_train(
        init_params(model, rand.rng(21, rand.INIT)),
        model,
        dataset.clients[0].train_x,
        dataset.clients[0].train_y,
        epochs=config.total_rounds * config.local_epochs,
        lr=0.05,
        batch_size=4,
        seed=rand.derive_seed(21, rand.CLIENT, 0),
        epoch_offset=0,
    )
    ok = params_equal(final, direct)
    return ok, "simulation equals uninterrupted local SGD (bitwise)" if ok else "paths diverged"


def check_determinism() -> tuple[bool, str]:
    """Identical configs produce identical logs and final parameters."""
    dataset = _single_class_dataset(num_clients=5, per_client=10, dim=4, seed=7)
    model = ModelSpec(4, (6,), 3)
    config = SimConfig(
        model=model,
        strategy=StrategyConfig("fedproto", True),
        rounds=4,
        local_epochs=2,
        clients_per_round=3,
        lr=0.05,
        batch_size=5,
        delta=0.5,
        seed=31,
    )
    rec1, p1 = run_simulation(config, dataset)
    rec2, p2 = run_simulation(config, dataset)
    if not params_equal(p1, p2):
        return False, "final parameters differ"
    if rec1 != rec2:
        return False, "round records differ"
    return True, f"{len(rec1)} rounds replayed bit-identically"


def check_mmd() -> tuple[bool, str]:
    """Biased self-MMD is exactly 0; separated samples dominate re-samples."""
    gen = rand.rng(8, 907)
    p = gen.normal(size=(60, 3))
    if mmd(p, p, estimator="biased") != 0.0:
        return False, "biased self-MMD non-zero"
    p2 = gen.normal(size=(60, 3))
    q = gen.normal(loc=3.0, size=(60, 3))
    near = mmd(p, p2)
    far = mmd(p, q)
    ok = far > near
    return ok, f"mmd(separated) {far:.3g} > mmd(re-sampled) {near:.3g}" if ok else f"{far:.3g} <= {near:.3g}"


def check_moving_average() -> tuple[bool, str]:
    """Trailing mean vs an independent prefix-sum oracle."""
    gen = rand.rng(9, 908)
    worst = 0.0
    for _ in range(50):
        n = int(gen.integers(1, 200))
        frac = float(gen.uniform(0.0, 1.0))
        series = gen.normal(size=n)
        got = moving_average(series, frac)
        w = max(1, math.ceil(frac * n))
        prefix = np.concatenate([[0.0], np.cumsum(series)])
        want = [
            (prefix[i + 1] - prefix[max(0, i + 1 - w)]) / min(i + 1, w) for i in range(n)
        ]
        worst = max(worst, float(np.abs(np.array(got) - np.array(want)).max()))
    return worst < 1e-9, f"max deviation from prefix-sum oracle {worst:.3g}"


CHECKS = [
    ("gradient-check", check_gradients),
    ("spm-oracle", check_spm_oracle),
    ("attention-normalization", check_attention_normalization),
    ("prototype-aggregation", check_prototype_aggregation),
    ("round-zero-attention", check_round_zero_attention),
    ("uniform-margins-fairness", check_uniform_margins_match_fairness),
    ("single-client-reduction", check_single_client_reduction),
    ("determinism", check_determinism),
    ("mmd", check_mmd),
    ("moving-average", check_moving_average),
]


def run_selftest(verbose: bool = True) -> int:
    """Run every suite; returns 0 when all pass."""
    failures = 0
    start = time.perf_counter()
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {exc!r}"
        dt = time.perf_counter() - t0
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name:28s} {detail} ({dt:.2f}s)")
        failures += 0 if ok else 1
    if verbose:
        total = time.perf_counter() - start
        print(f"{len(CHECKS) - failures}/{len(CHECKS)} suites passed in {total:.1f}s")
    return 1 if failures else 0
