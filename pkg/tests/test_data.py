"""Dataset construction, CSV ingestion, splitting, and partitioning."""

import json

import numpy as np
import pytest

from fedbias import data
from fedbias.errors import (
    ConfigError,
    EmptyInputError,
    ParseError,
    ShapeError,
    SplitError,
)

MINI_SCHEMA = data.CsvSchema(
    columns=["age", "color", "grp", "label"],
    continuous=["age"],
    label_column="label",
    label_positive=("yes",),
    sensitive_column="grp",
    sensitive_positive="A",
    has_header=False,
)


def make_dataset(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return data.Dataset(
        rng.standard_normal((n, 3)),
        rng.integers(0, 2, n),
        (np.arange(n) % 2),
    )


def test_dataset_validation():
    with pytest.raises(EmptyInputError):
        data.Dataset(np.zeros((0, 2)), np.zeros(0), np.zeros(0))
    with pytest.raises(ShapeError):
        data.Dataset(np.zeros((3, 2)), np.zeros(2), np.zeros(3))
    with pytest.raises(ShapeError):
        data.Dataset(np.array([[np.nan, 0.0]]), np.zeros(1), np.zeros(1))
    with pytest.raises(ShapeError):
        data.Dataset(np.zeros(3), np.zeros(3), np.zeros(3))


def test_dataset_accessors():
    ds = make_dataset(10)
    assert len(ds) == 10
    assert ds.feature_dim == 3
    s = ds.sample(3)
    np.testing.assert_array_equal(s.features, ds.features[3])
    assert s.group == 1
    sub = ds.subset([1, 4, 5])
    assert len(sub) == 3
    np.testing.assert_array_equal(sub.labels, ds.labels[[1, 4, 5]])
    np.testing.assert_array_equal(ds.group_indices(1), np.arange(1, 10, 2))
    assert ds.has_both_groups()


def _write(tmp_path, text, name="mini.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_csv_loader_hand_oracle(tmp_path):
    path = _write(tmp_path, "10, red, A, yes\n20, blue, B, no\n30, red, B, yes\n")
    ds = data.load_adult_csv(path, MINI_SCHEMA)
    std = np.sqrt(200.0 / 3.0)
    expect = np.array([
        [(10 - 20) / std, 0, 1, 0],  # color one-hot: [blue, red, other]
        [0.0, 1, 0, 0],
        [(30 - 20) / std, 0, 1, 0],
    ])
    np.testing.assert_allclose(ds.features, expect, atol=1e-12)
    np.testing.assert_array_equal(ds.labels, [1, 0, 1])
    np.testing.assert_array_equal(ds.groups, [1, 0, 0])
    assert ds.provenance == "adult"


def test_csv_loader_drops_missing_and_validates(tmp_path):
    path = _write(tmp_path, "10, red, A, yes\n20, ?, B, no\n30, red, B, yes\n")
    ds = data.load_adult_csv(path, MINI_SCHEMA)
    assert len(ds) == 2

    bad = _write(tmp_path, "10, red, A\n", name="short.csv")
    with pytest.raises(ParseError):
        data.load_adult_csv(bad, MINI_SCHEMA)

    nonnum = _write(tmp_path, "ten, red, A, yes\n1, red, B, no\n", name="n.csv")
    with pytest.raises(ParseError):
        data.load_adult_csv(nonnum, MINI_SCHEMA)

    empty = _write(tmp_path, "\n", name="empty.csv")
    with pytest.raises(ParseError):
        data.load_adult_csv(empty, MINI_SCHEMA)


def test_csv_pinned_vocabulary_other_bucket(tmp_path):
    import dataclasses
    schema = dataclasses.replace(MINI_SCHEMA, categories={"color": ["red"]})
    path = _write(tmp_path, "10, red, A, yes\n20, blue, B, no\n")
    ds = data.load_adult_csv(path, schema)
    # blocks: age | [red, other]
    np.testing.assert_array_equal(ds.features[:, 1:], [[1, 0], [0, 1]])


def test_csv_split_fits_encoder_on_train_only(tmp_path):
    rows = "\n".join(f"{10 * i}, red, {'A' if i % 2 else 'B'}, yes" for i in
                     range(1, 41)) + "\n20, blue, B, no\n"
    path = _write(tmp_path, rows)
    train, test = data.load_adult_split(path, 0.3, seed=1, schema=MINI_SCHEMA)
    assert len(train) + len(test) == 41
    # z-scored train ages must average ~0 by construction; test ages need not
    assert abs(train.features[:, 0].mean()) < 1e-9
    assert train.has_both_groups() and test.has_both_groups()


def test_synth_generate_structure():
    ds = data.synth_generate(3, 4000, group_fraction=0.7, separation=3.0,
                             disadvantage=1.0, feature_dim=4)
    assert ds.feature_dim == 4
    frac1 = (ds.groups == 1).mean()
    assert 0.65 < frac1 < 0.75
    # labels drive the sign of axis 0
    pos = ds.features[ds.labels == 1, 0].mean()
    neg = ds.features[ds.labels == 0, 0].mean()
    assert pos > 0.5 and neg < -0.5
    # the disadvantaged group's centers sit closer to the boundary
    m1 = np.abs(ds.features[ds.groups == 1, 0]).mean()
    m0 = np.abs(ds.features[ds.groups == 0, 0]).mean()
    assert m1 > m0
    same = data.synth_generate(3, 4000, 0.7, 3.0, 1.0, feature_dim=4)
    np.testing.assert_array_equal(ds.features, same.features)


def test_synth_generate_validation():
    with pytest.raises(ConfigError):
        data.synth_generate(0, 2, 0.5, 1.0, 0.0)
    with pytest.raises(ConfigError):
        data.synth_generate(0, 10, 1.5, 1.0, 0.0)
    with pytest.raises(ConfigError):
        data.synth_generate(0, 10, 0.5, -1.0, 0.0)


def test_partition_disjoint_cover_and_power_law():
    ds = make_dataset(500, seed=5)
    plan = data.partition_noniid(ds, 8, alpha=1.0, seed=11)
    all_idx = sorted(i for lst in plan.client_index_lists for i in lst)
    assert all_idx == list(range(500))
    sizes = [len(lst) for lst in plan.client_index_lists]
    assert min(sizes) >= 1
    assert sizes == sorted(sizes, reverse=True)  # k^-1.2 ordering


def test_partition_group_mix_follows_alpha():
    ds = make_dataset(2000, seed=6)
    q = (ds.groups == 1).mean()

    def mix_spread(alpha):
        plan = data.partition_noniid(ds, 10, alpha=alpha, seed=13)
        fracs = [ds.groups[lst].mean() for lst in plan.client_index_lists]
        return np.std(fracs), fracs

    spread_hi, fracs_hi = mix_spread(1e6)
    spread_lo, _ = mix_spread(0.2)
    assert spread_hi < 0.05  # huge alpha: every client near the global mix
    assert all(abs(f - q) < 0.1 for f in fracs_hi)
    assert spread_lo > spread_hi  # small alpha: heterogeneous mixes


def test_partition_plan_json_round_trip():
    ds = make_dataset(60, seed=7)
    plan = data.partition_noniid(ds, 4, alpha=0.5, seed=3)
    clone = data.PartitionPlan.from_json(plan.to_json())
    assert clone.client_index_lists == plan.client_index_lists
    assert clone.alpha == plan.alpha and clone.seed == plan.seed
    # serialization is canonical
    assert clone.to_json() == plan.to_json()
    obj = json.loads(plan.to_json())
    assert set(obj) == {"alpha", "seed", "clients"}


def test_partition_validation():
    ds = make_dataset(10)
    with pytest.raises(ConfigError):
        data.partition_noniid(ds, 1, 1.0, 0)
    with pytest.raises(ConfigError):
        data.partition_noniid(ds, 11, 1.0, 0)
    with pytest.raises(ConfigError):
        data.partition_noniid(ds, 2, 0.0, 0)
    single = data.Dataset(np.zeros((4, 1)), [0, 1, 0, 1], [1, 1, 1, 1])
    with pytest.raises(ConfigError):
        data.partition_noniid(single, 2, 1.0, 0)


def test_train_test_split_properties():
    ds = make_dataset(100, seed=8)
    train, test = data.train_test_split(ds, 0.25, seed=2)
    assert len(test) == 25 and len(train) == 75
    again_train, again_test = data.train_test_split(ds, 0.25, seed=2)
    np.testing.assert_array_equal(test.features, again_test.features)
    merged = np.vstack([train.features, test.features])
    assert merged.shape[0] == 100
    assert len({tuple(r) for r in merged}) == 100  # disjoint split

    with pytest.raises(ConfigError):
        data.train_test_split(ds, 0.0, seed=0)


def test_train_test_split_group_loss_raises():
    feats = np.arange(20, dtype=float).reshape(10, 2)
    ds = data.Dataset(feats, np.ones(10, dtype=int),
                      np.array([1] + [0] * 9))
    with pytest.raises(SplitError):
        data.train_test_split(ds, 0.5, seed=0)


def test_synthetic_adult_csv_round_trip(tmp_path):
    path = tmp_path / "adult.csv"
    data.write_synthetic_adult_csv(path, 800, seed=4)
    ds = data.load_adult_csv(path)
    assert len(ds) > 700  # a little loss to missing-value rows
    assert ds.has_both_groups()
    priv = ds.labels[ds.groups == 1].mean()
    disadv = ds.labels[ds.groups == 0].mean()
    assert priv > disadv + 0.05  # built-in base-rate gap

    other = tmp_path / "again.csv"
    data.write_synthetic_adult_csv(other, 800, seed=4)
    assert other.read_bytes() == path.read_bytes()
