import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddbp.data import (
    LabeledDataset,
    dirichlet_partition,
    generate_synthetic,
    ingest_csv,
    label_entropy,
    largest_remainder,
    train_test_split,
)
from feddbp.errors import ConfigError, IngestionError

from conftest import FIXTURES, load_regression


def nearest_centroid(data):
    cent = np.stack([data.features[data.labels == c].mean(axis=0) for c in range(data.num_classes)])
    d = ((data.features[:, None, :] - cent[None]) ** 2).sum(-1)
    return float((d.argmin(axis=1) == data.labels).mean())


def test_synthetic_well_separated_limit():
    data = generate_synthetic(2, 10, 2, 100.0, 1)
    assert len(data) == 20 and data.num_classes == 2
    assert nearest_centroid(data) == 1.0


def test_synthetic_is_deterministic():
    a = generate_synthetic(3, 20, 5, 2.0, 9)
    b = generate_synthetic(3, 20, 5, 2.0, 9)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = generate_synthetic(3, 20, 5, 2.0, 10)
    assert a.features.tobytes() != c.features.tobytes()


def test_synthetic_regression_value():
    data = generate_synthetic(4, 50, 4, 3.0, 7)
    assert nearest_centroid(data) == load_regression()["nearest_centroid_C4_sep3_seed7_d4"]


@pytest.mark.parametrize("kwargs", [
    dict(num_classes=1, per_class=5, input_dim=2, class_separation=1.0, seed=0),
    dict(num_classes=2, per_class=0, input_dim=2, class_separation=1.0, seed=0),
    dict(num_classes=2, per_class=5, input_dim=2, class_separation=0.0, seed=0),
    dict(num_classes=9, per_class=5, input_dim=2, class_separation=1.0, seed=0),
])
def test_synthetic_rejects_invalid_arguments(kwargs):
    with pytest.raises(ConfigError):
        generate_synthetic(**kwargs)


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ConfigError):
        LabeledDataset(np.zeros((2, 1)), [0, 2], 2)


def test_csv_label_remap_first_appearance(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("1.0,2.0,a\n3.0,4.0,b\n5.0,6.0,a\n")
    data = ingest_csv(p, 2)
    assert data.num_classes == 2
    assert data.labels.tolist() == [0, 1, 0]
    assert data.class_names == ("a", "b")
    np.testing.assert_array_equal(data.features, [[1, 2], [3, 4], [5, 6]])


def test_csv_header_only_is_empty(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("f1,f2,label\n")
    with pytest.raises(IngestionError, match="empty dataset"):
        ingest_csv(p, "label")


def test_csv_row_count_matches_text_tool():
    # 150 data rows and 4 feature columns were counted with wc/awk on the file
    data = ingest_csv(FIXTURES / "rows150.csv", "species")
    assert len(data) == 150
    assert data.input_dim == 4
    assert data.num_classes == 3


def test_csv_errors_carry_position(tmp_path):
    with pytest.raises(IngestionError):
        ingest_csv(tmp_path / "missing.csv", 0)
    p = tmp_path / "bad.csv"
    p.write_text("1.0,2.0,a\n3.0,oops,b\n")
    with pytest.raises(IngestionError) as info:
        ingest_csv(p, 2)
    assert info.value.row == 2 and info.value.column == 1
    p.write_text("")
    with pytest.raises(IngestionError, match="empty dataset"):
        ingest_csv(p, 0)


def test_largest_remainder_sums_and_breaks_ties_low():
    assert largest_remainder(np.array([1.0, 1.0, 1.0]), 4).tolist() == [2, 1, 1]
    assert largest_remainder(np.array([0.5, 0.25, 0.25]), 10).tolist() == [5, 3, 2]
    assert largest_remainder(np.array([0.0, 0.0]), 3).sum() == 3


def test_partition_large_alpha_is_near_uniform():
    data = generate_synthetic(2, 100, 2, 1.0, 0)
    plan = dirichlet_partition(data, 4, 1e6, 3)
    hist = plan.histograms(data)
    assert np.all(np.abs(hist - 25) <= 1)


def _check_exact(plan, n):
    flat = np.sort(np.concatenate([np.asarray(ix, dtype=np.int64) for ix in plan.client_indices]))
    assert np.array_equal(flat, np.arange(n))
    assert min(plan.sizes()) >= 1


@settings(max_examples=60, deadline=None)
@given(C=st.integers(2, 6), per=st.integers(1, 15), K=st.integers(2, 12),
       alpha=st.sampled_from([0.01, 0.1, 1.0, 10.0]), seed=st.integers(0, 2**16))
def test_partition_is_exact_and_disjoint(C, per, K, alpha, seed):
    data = generate_synthetic(C, per, C, 1.0, seed)
    if K > len(data):
        with pytest.raises(ConfigError):
            dirichlet_partition(data, K, alpha, seed)
        return
    plan = dirichlet_partition(data, K, alpha, seed)
    assert plan.num_clients == K
    _check_exact(plan, len(data))


def test_partition_determinism_and_errors():
    data = generate_synthetic(3, 10, 3, 1.0, 0)
    assert dirichlet_partition(data, 5, 0.3, 1) == dirichlet_partition(data, 5, 0.3, 1)
    with pytest.raises(ConfigError):
        dirichlet_partition(data, 31, 0.3, 1)
    with pytest.raises(ConfigError):
        dirichlet_partition(data, 1, 0.3, 1)
    with pytest.raises(ConfigError):
        dirichlet_partition(data, 3, 0.0, 1)


def test_partition_regression_fixture():
    data = generate_synthetic(10, 50, 10, 1.0, 42)
    plan = dirichlet_partition(data, 20, 0.1, 42)
    want = np.array(load_regression()["dirichlet_alpha0.1_C10_K20_seed42"])
    assert np.array_equal(plan.histograms(data), want)
    _check_exact(plan, len(data))


def test_entropy_is_monotone_in_alpha():
    data = generate_synthetic(10, 50, 10, 1.0, 0)

    def mean_entropy(alpha):
        vals = []
        for seed in range(20):
            plan = dirichlet_partition(data, 10, alpha, seed)
            vals.extend(label_entropy(h) for h in plan.histograms(data))
        return np.mean(vals)

    assert mean_entropy(0.1) < mean_entropy(10.0)


def test_label_entropy_values():
    assert label_entropy([5, 0, 0]) == 0.0
    assert label_entropy([1, 1]) == pytest.approx(np.log(2))


def test_train_test_split():
    tr, te = train_test_split(np.arange(10), 0, 3)
    assert len(te) == 2 and len(tr) == 8
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(10))
    tr, te = train_test_split([4, 5], 0, 0)
    assert len(tr) == 1 and len(te) == 1
    tr, te = train_test_split([7], 0, 0)
    assert tr.tolist() == te.tolist() == [7]
