import numpy as np
import pytest

from protofed import rand
from protofed.data import ClientDataset, FederatedDataset
from protofed.engine import train_centralized
from protofed.metrics import (
    RoundRecord,
    accuracy,
    amm,
    amm_literal,
    federated_mmd,
    ffd,
    grad_dissimilarity,
    grad_dissimilarity_and_loss,
    mmd,
    moving_average,
    train_loss,
)
from protofed.nn import ModelSpec, ParamSet, init_params, loss_and_grad
from protofed.proto import PrototypeSet


def pset(mapping, counts=None):
    protos = {c: np.asarray(v, dtype=np.float64) for c, v in mapping.items()}
    dim = len(next(iter(protos.values())))
    return PrototypeSet(protos, counts or {c: 1 for c in protos}, dim)


def make_dataset(clients_xy, num_classes, input_dim):
    clients = []
    for k, (tx, ty, vx, vy) in enumerate(clients_xy):
        clients.append(
            ClientDataset(
                k,
                np.asarray(tx, dtype=np.float64),
                np.asarray(ty, dtype=np.int64),
                np.asarray(vx, dtype=np.float64),
                np.asarray(vy, dtype=np.int64),
            )
        )
    total = sum(c.n_train + c.n_test for c in clients)
    return FederatedDataset(clients, num_classes, input_dim, total)


def _identity_logit_params():
    # 2 inputs -> 2 logits through the identity: argmax(x) is the prediction
    return ParamSet([(np.eye(2), np.zeros(2))])


IDENTITY_SPEC = ModelSpec(2, (), 2)


# ---------------------------------------------------------------- accuracy

def test_accuracy_perfect_classifier():
    ds = make_dataset(
        [
            ([[1, 0]], [0], [[1, 0], [0, 1]], [0, 1]),
            ([[0, 1]], [1], [[0, 1]], [1]),
        ],
        2,
        2,
    )
    assert accuracy(_identity_logit_params(), IDENTITY_SPEC, ds) == 1.0


def test_accuracy_constant_classifier_on_balanced_data_is_half():
    # all-zero net always predicts class 0
    params = ParamSet([(np.zeros((2, 2)), np.zeros(2))])
    ds = make_dataset(
        [([[1, 0]], [0], [[1, 0], [0, 1], [1, 0], [0, 1]], [0, 1, 0, 1])],
        2,
        2,
    )
    assert accuracy(params, IDENTITY_SPEC, ds) == 0.5


def test_accuracy_matches_counting_oracle():
    spec = ModelSpec(3, (4,), 3)
    params = init_params(spec, 5)
    gen = rand.rng(5, 70)
    clients = []
    for _ in range(4):
        n = int(gen.integers(2, 9))
        x = gen.normal(size=(n, 3))
        y = gen.integers(0, 3, size=n)
        clients.append(([[0, 0, 0]], [0], x, y))
    ds = make_dataset(clients, 3, 3)
    # per-client argmax counting, every client weighted equally
    from protofed.nn import forward_batch

    fractions = []
    for c in ds.clients:
        logits, _ = forward_batch(params, spec, c.test_x)
        fractions.append(float((logits.argmax(axis=1) == c.test_y).mean()))
    assert accuracy(params, spec, ds) == pytest.approx(np.mean(fractions), abs=1e-15)


# ------------------------------------------------------- grad dissimilarity

def test_grad_dissimilarity_identical_clients_is_zero():
    spec = ModelSpec(2, (3,), 2)
    params = init_params(spec, 6)
    gen = rand.rng(6, 70)
    x = gen.normal(size=(6, 2))
    y = gen.integers(0, 2, size=6)
    ds = make_dataset([(x, y, x[:1], y[:1])] * 3, 2, 2)
    assert grad_dissimilarity(params, spec, ds) == pytest.approx(0.0, abs=1e-18)


def test_grad_dissimilarity_single_client_is_zero():
    spec = ModelSpec(2, (3,), 2)
    params = init_params(spec, 7)
    gen = rand.rng(7, 70)
    x = gen.normal(size=(5, 2))
    y = gen.integers(0, 2, size=5)
    ds = make_dataset([(x, y, x[:1], y[:1])], 2, 2)
    assert grad_dissimilarity(params, spec, ds) == pytest.approx(0.0, abs=1e-18)


def test_grad_dissimilarity_matches_direct_formula():
    spec = ModelSpec(3, (4,), 3)
    params = init_params(spec, 8)
    gen = rand.rng(8, 70)
    clients = []
    for _ in range(3):
        n = int(gen.integers(3, 9))
        x = gen.normal(size=(n, 3))
        y = gen.integers(0, 3, size=n)
        clients.append((x, y, x[:1], y[:1]))
    ds = make_dataset(clients, 3, 3)

    grads = []
    losses = []
    sizes = []
    for c in ds.clients:
        loss, g = loss_and_grad(params, spec, c.train_x, c.train_y)
        grads.append(g.flat())
        losses.append(loss)
        sizes.append(c.n_train)
    weights = np.array(sizes) / sum(sizes)
    g_mean = sum(w * g for w, g in zip(weights, grads))
    want = float(np.mean([np.sum((g - g_mean) ** 2) for g in grads]))
    got, got_loss = grad_dissimilarity_and_loss(params, spec, ds)
    assert got == pytest.approx(want, rel=1e-10)
    assert got_loss == pytest.approx(float(np.dot(weights, losses)), rel=1e-12)
    assert train_loss(params, spec, ds) == pytest.approx(got_loss, rel=1e-12)


# --------------------------------------------------------------------- AMM

def test_amm_single_class_is_zero():
    assert amm(pset({0: [1.0, 2.0]})) == 0.0
    assert amm_literal(pset({0: [1.0, 2.0]})) == 0.0


def test_amm_symmetric_pair():
    assert amm(pset({0: [0.0, 0.0], 1: [3.0, 4.0]})) == pytest.approx(5.0)


def test_amm_matches_pairwise_oracle():
    gen = rand.rng(9, 70)
    for _ in range(50):
        classes = list(range(int(gen.integers(2, 7))))
        p = pset({c: gen.normal(size=5) for c in classes})
        per_class = []
        for c in classes:
            dists = [np.linalg.norm(p.protos[c] - p.protos[o]) for o in classes if o != c]
            per_class.append(np.mean(dists))
        assert amm(p) == pytest.approx(float(np.mean(per_class)), rel=1e-12)


def test_amm_translation_invariant_and_scales_linearly():
    gen = rand.rng(10, 70)
    p = pset({c: gen.normal(size=4) for c in range(4)})
    shift = gen.normal(size=4)
    shifted = pset({c: v + shift for c, v in p.protos.items()})
    scaled = pset({c: 3.0 * v for c, v in p.protos.items()})
    assert amm(shifted) == pytest.approx(amm(p), rel=1e-12)
    assert amm(scaled) == pytest.approx(3.0 * amm(p), rel=1e-12)


def test_amm_literal_saturates_at_one():
    gen = rand.rng(11, 70)
    p = pset({c: gen.normal(size=3) for c in range(5)})
    assert amm_literal(p) == 1.0


# --------------------------------------------------------------------- MMD

def test_mmd_biased_self_is_exactly_zero():
    gen = rand.rng(12, 70)
    p = gen.normal(size=(40, 4))
    assert mmd(p, p, estimator="biased") == 0.0


def test_mmd_two_sample_ordering():
    gen = rand.rng(13, 70)
    p = gen.normal(size=(80, 3))
    p2 = gen.normal(size=(80, 3))
    q = gen.normal(loc=2.5, size=(80, 3))
    assert mmd(p, q) > mmd(p, p2)


def test_mmd_undersized_sample_rejected():
    gen = rand.rng(14, 70)
    with pytest.raises(ValueError):
        mmd(gen.normal(size=(1, 3)), gen.normal(size=(10, 3)))
    with pytest.raises(ValueError):
        mmd(gen.normal(size=(10, 3)), gen.normal(size=(1, 3)))


def test_mmd_identical_distributions_near_zero():
    gen = rand.rng(15, 70)
    p = gen.normal(size=(150, 3))
    q = gen.normal(size=(150, 3))
    assert abs(mmd(p, q)) < 0.02


def test_federated_mmd_matches_plain_mmd_for_one_client():
    spec = ModelSpec(3, (4,), 3)
    gen = rand.rng(16, 70)
    x = gen.normal(size=(30, 3))
    y = gen.integers(0, 3, size=30)
    ds = make_dataset([(x[:20], y[:20], x[20:], y[20:])], 3, 3)
    global_params = init_params(spec, 1)
    central = train_centralized(ds, spec, epochs=1, lr=0.05, batch_size=8, seed=3)
    got = federated_mmd(global_params, central, spec, ds, [0], seed=9)
    from protofed.metrics import embeddings_of, reference_embeddings

    ref = reference_embeddings(central, spec, ds, seed=9)
    want = max(0.0, mmd(embeddings_of(global_params, spec, ds.clients[0].test_x), ref))
    assert got == pytest.approx(want, rel=1e-12)


def test_federated_mmd_zero_when_model_and_data_match():
    spec = ModelSpec(3, (4,), 3)
    gen = rand.rng(17, 70)
    x = gen.normal(size=(40, 3))
    y = gen.integers(0, 3, size=40)
    ds = make_dataset([(x[:8], y[:8], x[8:], y[8:])], 3, 3)
    params = init_params(spec, 2)
    # same model on both sides, client test data == pooled test data
    value = federated_mmd(params, params, spec, ds, [0], seed=5)
    assert value <= 1e-3


def test_federated_mmd_skips_clients_without_enough_test_points():
    spec = ModelSpec(2, (3,), 2)
    gen = rand.rng(18, 70)
    x = gen.normal(size=(10, 2))
    y = gen.integers(0, 2, size=10)
    ds = make_dataset(
        [(x[:4], y[:4], x[4:5], y[4:5]), (x[:4], y[:4], x[5:], y[5:])], 2, 2
    )
    params = init_params(spec, 3)
    assert federated_mmd(params, params, spec, ds, [0], seed=1) is None
    assert federated_mmd(params, params, spec, ds, [0, 1], seed=1) is not None


# --------------------------------------------------------------------- FFD

def test_ffd_values():
    assert ffd(0.1, 0.1) == 0.0
    assert ffd(0.1, 0.2) == pytest.approx(50.0)
    assert ffd(0.3, 0.2) == pytest.approx(-50.0)
    with pytest.raises(ValueError):
        ffd(0.1, 0.0)


# ---------------------------------------------------------- moving average

def test_moving_average_constant_series_unchanged():
    out = moving_average([2.5] * 17, 0.1)
    assert all(v == pytest.approx(2.5, abs=1e-12) for v in out)


def test_moving_average_zero_window_is_identity():
    series = [1.0, -2.0, 3.5]
    assert moving_average(series, 0.0) == series


def test_moving_average_matches_prefix_sum_oracle():
    from protofed.selftest import check_moving_average

    ok, detail = check_moving_average()
    assert ok, detail


def test_moving_average_empty_rejected():
    with pytest.raises(ValueError):
        moving_average([], 0.1)


# ------------------------------------------------------------- RoundRecord

def test_round_record_validation():
    RoundRecord(0, 0.5, 1.0, 0.1, 2.0, None, 0.3)
    RoundRecord(1, None, None, None, 0.0, None, 0.0)
    with pytest.raises(ValueError):
        RoundRecord(0, 1.5, 1.0, 0.1, 2.0, None, 0.3)
    with pytest.raises(ValueError):
        RoundRecord(0, 0.5, float("nan"), 0.1, 2.0, None, 0.3)
