import struct

import numpy as np
import pytest

from protofed import rand
from protofed.data import (
    IdxFormatError,
    PartitionSpec,
    build_dataset,
    dirichlet_partition,
    dirichlet_proportions,
    gen_blob_pool,
    gen_synthetic,
    label_shard_partition,
    load_dataset,
    load_idx,
    power_law_counts,
    save_dataset,
    split_80_20,
    write_idx,
)


# ---------------------------------------------------------------- synthetic

def test_synthetic_shapes_and_label_range():
    fd = gen_synthetic(5, 1.0, 1.0, [20, 30, 10, 40, 25], seed=3)
    assert fd.input_dim == 60
    assert fd.num_classes == 10
    assert fd.total_samples == 125
    for c in fd.clients:
        assert c.train_x.shape[1] == 60
        assert c.train_y.min() >= 0 and c.train_y.max() <= 9
        assert c.n_train + c.n_test in (20, 30, 10, 40, 25)


def test_synthetic_degenerate_hyperprior():
    # phi1 = phi2 = 0 pins u_k = 0 and B_k = 0 for every client; the
    # label models still differ through their unit-variance draws
    fd = gen_synthetic(3, 0.0, 0.0, [30, 30, 30], seed=1)
    label_sets = [tuple(np.bincount(c.train_y, minlength=10)) for c in fd.clients]
    assert len(set(label_sets)) > 1


def test_synthetic_per_coordinate_variance_follows_power_law():
    # x = v_k + noise with per-coordinate variance j^-1.2; over many draws
    # of one client the empirical variance must match for j in {1, 10, 60}
    fd = gen_synthetic(1, 1.0, 1.0, [20000], seed=9)
    x = np.concatenate([fd.clients[0].train_x, fd.clients[0].test_x])
    for j in (1, 10, 60):
        want = float(j) ** -1.2
        got = x[:, j - 1].var()
        assert abs(got - want) / want < 0.10


def test_synthetic_deterministic():
    a = gen_synthetic(4, 1.0, 1.0, [10, 10, 10, 10], seed=5)
    b = gen_synthetic(4, 1.0, 1.0, [10, 10, 10, 10], seed=5)
    for ca, cb in zip(a.clients, b.clients):
        np.testing.assert_array_equal(ca.train_x, cb.train_x)
        np.testing.assert_array_equal(ca.test_y, cb.test_y)


# ---------------------------------------------------------- power-law counts

def test_power_law_gamma_zero_is_uniform_within_one():
    counts = power_law_counts(7, 100, gamma=0.0, min_per_client=2, seed=0)
    assert sum(counts) == 100
    assert max(counts) - min(counts) <= 1


def test_power_law_single_client_takes_total():
    assert power_law_counts(1, 57, gamma=3.0, min_per_client=2, seed=0) == [57]


def test_power_law_sums_exact_over_random_configs():
    gen = rand.rng(0, 55)
    for _ in range(100):
        n = int(gen.integers(1, 40))
        min_per = int(gen.integers(1, 5))
        total = int(gen.integers(n * min_per, n * min_per + 5000))
        gamma = float(gen.uniform(0.0, 4.0))
        seed = int(gen.integers(0, 1000))
        counts = power_law_counts(n, total, gamma, min_per, seed)
        assert sum(counts) == total
        assert min(counts) >= min_per


def test_power_law_infeasible_total_rejected():
    with pytest.raises(ValueError):
        power_law_counts(10, 15, gamma=2.0, min_per_client=2, seed=0)


# ------------------------------------------------------------- label shards

def _blob_pool(total=2000, classes=10, seed=0):
    images, labels = gen_blob_pool(classes, total, side=4, noise=0.2, seed=seed)
    return images.reshape(total, -1) / 255.0, labels.astype(np.int64)


def test_label_shard_limits_distinct_labels():
    x, y = _blob_pool()
    counts = power_law_counts(20, 400, 1.0, 5, seed=1)
    fd = label_shard_partition(x, y, 20, shards_per_client=2, counts=counts, seed=1)
    for c in fd.clients:
        labels = set(np.concatenate([c.train_y, c.test_y]).tolist())
        assert len(labels) <= 2


def test_label_shard_all_classes_limit():
    x, y = _blob_pool()
    counts = [40] * 5
    fd = label_shard_partition(x, y, 5, shards_per_client=10, counts=counts, seed=2)
    union = set()
    for c in fd.clients:
        union |= set(np.concatenate([c.train_y, c.test_y]).tolist())
    assert union <= set(range(10))
    assert len(union) > 2


def test_label_shard_is_submultiset_of_pool():
    x, y = _blob_pool(total=4000)
    counts = power_law_counts(10, 300, 1.0, 5, seed=3)
    fd = label_shard_partition(x, y, 10, shards_per_client=2, counts=counts, seed=3)
    pool_rows = {}
    for row in x:
        key = row.tobytes()
        pool_rows[key] = pool_rows.get(key, 0) + 1
    for c in fd.clients:
        for row in np.concatenate([c.train_x, c.test_x]):
            key = row.tobytes()
            assert pool_rows.get(key, 0) > 0
            pool_rows[key] -= 1


def test_label_shard_exhaustion_falls_back_with_warning():
    x, y = _blob_pool(total=100, classes=2)
    with pytest.warns(UserWarning):
        fd = label_shard_partition(x, y, 4, shards_per_client=1, counts=[80, 80, 80, 80], seed=4)
    assert sum(c.n_train + c.n_test for c in fd.clients) == 320


def test_label_shard_empty_pool_rejected():
    with pytest.raises(ValueError):
        label_shard_partition(np.zeros((0, 3)), np.zeros(0, dtype=int), 2, 1, [1, 1], seed=0)


# ---------------------------------------------------------------- dirichlet

def _client_class_proportions(fd):
    out = []
    for c in fd.clients:
        y = np.concatenate([c.train_y, c.test_y])
        out.append(np.bincount(y, minlength=fd.num_classes) / len(y))
    return np.array(out)


def test_dirichlet_high_alpha_near_uniform():
    x, y = _blob_pool(total=20000)
    counts = [500] * 20
    fd = dirichlet_partition(x, y, 20, alpha=1000.0, counts=counts, seed=5)
    props = _client_class_proportions(fd)
    assert np.abs(props.mean(axis=0) - 0.1).max() < 0.005
    assert np.abs(props - 0.1).mean() < 0.05 * 0.1 + 0.02


def test_dirichlet_low_alpha_concentrates_classes():
    x, y = _blob_pool(total=20000)
    counts = [500] * 20

    def median_significant_classes(alpha):
        fd = dirichlet_partition(x, y, 20, alpha=alpha, counts=counts, seed=6)
        props = _client_class_proportions(fd)
        return float(np.median((props >= 0.01).sum(axis=1)))

    concentrated = median_significant_classes(0.01)
    spread = median_significant_classes(1000.0)
    assert concentrated <= 2
    assert concentrated < spread


def test_dirichlet_proportions_on_simplex():
    gen = rand.rng(0, 44)
    for _ in range(200):
        q = dirichlet_proportions(float(gen.uniform(0.01, 100)), 10, gen)
        assert abs(q.sum() - 1.0) < 1e-12
        assert (q >= 0).all()


def test_dirichlet_counts_exact():
    x, y = _blob_pool(total=5000)
    counts = power_law_counts(15, 900, 1.5, 4, seed=7)
    fd = dirichlet_partition(x, y, 15, alpha=0.5, counts=counts, seed=7)
    for c, want in zip(fd.clients, counts):
        assert c.n_train + c.n_test == want


# --------------------------------------------------------------------- IDX

def test_idx_round_trip_hand_fixture(tmp_path):
    images = np.array(
        [[[0, 51], [102, 255]], [[255, 0], [25, 76]]], dtype=np.uint8
    )
    labels = np.array([3, 7], dtype=np.uint8)
    write_idx(images, labels, tmp_path / "img.idx", tmp_path / "lab.idx")
    x, y = load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")
    np.testing.assert_allclose(
        x, np.array([[0, 51, 102, 255], [255, 0, 25, 76]]) / 255.0, atol=0
    )
    np.testing.assert_array_equal(y, np.array([3, 7]))


def test_idx_count_mismatch_is_format_error(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    write_idx(images, np.zeros(3, dtype=np.uint8), tmp_path / "img.idx", tmp_path / "lab.idx")
    # rewrite the label file with a different count
    (tmp_path / "lab.idx").write_bytes(struct.pack(">2I", 0x801, 2) + b"\x00\x00")
    with pytest.raises(IdxFormatError):
        load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")


def test_idx_empty_file_is_format_error(tmp_path):
    (tmp_path / "img.idx").write_bytes(b"")
    (tmp_path / "lab.idx").write_bytes(b"")
    with pytest.raises(IdxFormatError):
        load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")


def test_idx_bad_magic_reports_offset(tmp_path):
    (tmp_path / "img.idx").write_bytes(struct.pack(">4I", 0xDEAD, 0, 2, 2))
    (tmp_path / "lab.idx").write_bytes(struct.pack(">2I", 0x801, 0))
    with pytest.raises(IdxFormatError, match="byte 0"):
        load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")


def test_idx_truncated_payload(tmp_path):
    (tmp_path / "img.idx").write_bytes(struct.pack(">4I", 0x803, 2, 2, 2) + b"\x00" * 5)
    (tmp_path / "lab.idx").write_bytes(struct.pack(">2I", 0x801, 2) + b"\x00\x00")
    with pytest.raises(IdxFormatError, match="byte"):
        load_idx(tmp_path / "img.idx", tmp_path / "lab.idx")


# ------------------------------------------------------------------- splits

def test_split_10_gives_8_2():
    x = np.arange(20, dtype=np.float64).reshape(10, 2)
    y = np.arange(10)
    tx, ty, vx, vy = split_80_20(x, y, seed=0)
    assert len(ty) == 8 and len(vy) == 2


def test_split_5_gives_4_1():
    x = np.zeros((5, 2))
    y = np.arange(5)
    tx, ty, vx, vy = split_80_20(x, y, seed=0)
    assert len(ty) == 4 and len(vy) == 1


def test_split_2_keeps_test_non_empty():
    x = np.zeros((2, 2))
    tx, ty, vx, vy = split_80_20(x, np.arange(2), seed=0)
    assert len(ty) == 1 and len(vy) == 1


def test_split_below_two_rejected():
    with pytest.raises(ValueError):
        split_80_20(np.zeros((1, 2)), np.zeros(1, dtype=int), seed=0)


def test_split_union_and_disjointness_over_seeds():
    x = np.arange(26, dtype=np.float64).reshape(13, 2)
    y = np.arange(13)
    for seed in range(100):
        tx, ty, vx, vy = split_80_20(x, y, seed=seed)
        got = sorted(np.concatenate([ty, vy]).tolist())
        assert got == list(range(13))
        assert set(ty.tolist()).isdisjoint(vy.tolist())


# ----------------------------------------------------------- serialization

def test_dataset_jsonl_round_trip_exact(tmp_path):
    fd = gen_synthetic(3, 1.0, 1.0, [8, 12, 6], seed=13)
    save_dataset(fd, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.num_classes == fd.num_classes
    assert back.input_dim == fd.input_dim
    assert back.total_samples == fd.total_samples
    for a, b in zip(fd.clients, back.clients):
        np.testing.assert_array_equal(a.train_x, b.train_x)
        np.testing.assert_array_equal(a.train_y, b.train_y)
        np.testing.assert_array_equal(a.test_x, b.test_x)
        np.testing.assert_array_equal(a.test_y, b.test_y)


def test_partition_spec_field_validation():
    with pytest.raises(ValueError):
        PartitionSpec("synthetic", 5, 100)  # missing phi1/phi2
    with pytest.raises(ValueError):
        PartitionSpec("dirichlet", 5, 100, alpha=0.5, phi1=1.0)  # stray field
    with pytest.raises(ValueError):
        PartitionSpec("label_shard", 5, 100, shards_per_client=0)
    spec = PartitionSpec("dirichlet", 5, 100, alpha=0.5)
    assert spec.alpha == 0.5


def test_build_dataset_dispatch_and_determinism():
    spec = PartitionSpec("synthetic", 4, 200, phi1=1.0, phi2=1.0, seed=2, min_per_client=10)
    a = build_dataset(spec)
    b = build_dataset(spec)
    for ca, cb in zip(a.clients, b.clients):
        np.testing.assert_array_equal(ca.train_x, cb.train_x)
    with pytest.raises(ValueError):
        build_dataset(PartitionSpec("dirichlet", 4, 200, alpha=1.0, seed=2))  # no pool


def test_partition_spec_min_per_client_floor():
    with pytest.raises(ValueError, match="min_per_client"):
        PartitionSpec("synthetic", 5, 100, phi1=1.0, phi2=1.0, min_per_client=1)
