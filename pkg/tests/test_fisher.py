import numpy as np
import pytest

from feddbp.data import LabeledDataset
from feddbp.errors import DimensionError
from feddbp.fisher import channel_scores, feature_log_prob_grads
from feddbp.models import ArchitectureSpec, build_client_model, embed
from feddbp.verify import fisher_oracle


def make(C=3, d_z=4, d_in=3, seed=0):
    spec = ArchitectureSpec(((5,),), d_in, d_z, C)
    return build_client_model(spec, 0, seed)


def dataset(n, d_in, C, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % C
    return LabeledDataset(rng.normal(size=(n, d_in)), labels, C)


def test_dead_channel_scores_exactly_zero():
    model = make()
    model.params["head.weight"][:, 2] = 0.0
    s = channel_scores(model, dataset(12, 3, 3))
    assert np.all(s.scores[:, 2] == 0.0)
    assert np.all(s.scores >= 0.0)
    assert s.counts.tolist() == [4, 4, 4]


def test_two_class_closed_form():
    model = make(C=2)
    data = dataset(1, 3, 2, seed=3)
    z = embed(model, data.features)[0]
    W, b = model.params["head.weight"], model.params["head.bias"]
    logits = W @ z + b
    y = int(data.labels[0])
    p_true = np.exp(logits[y]) / np.exp(logits).sum()
    g = (1 - p_true) * (W[y] - W[1 - y])
    s = channel_scores(model, data)
    np.testing.assert_allclose(s.scores[y], g ** 2, rtol=1e-12)
    assert not s.present[1 - y]


def test_scale_covariance():
    model = make()
    data = dataset(15, 3, 3, seed=1)
    base = channel_scores(model, data).scores
    a, j = 3.0, 1
    # scale head column j by a and the branch output j by 1/a: logits unchanged
    model.params["head.weight"][:, j] *= a
    model.params["shared.weight"][j] /= a
    model.params["shared.bias"][j] /= a
    scaled = channel_scores(model, data).scores
    np.testing.assert_allclose(scaled[:, j], a * a * base[:, j], rtol=1e-10)
    others = [k for k in range(base.shape[1]) if k != j]
    np.testing.assert_allclose(scaled[:, others], base[:, others], rtol=1e-10)


def test_permutation_equivariance():
    model = make()
    data = dataset(15, 3, 3, seed=2)
    base = channel_scores(model, data).scores
    perm = np.array([2, 0, 3, 1])
    model.params["shared.weight"] = model.params["shared.weight"][perm]
    model.params["shared.bias"] = model.params["shared.bias"][perm]
    model.params["head.weight"] = model.params["head.weight"][:, perm]
    np.testing.assert_allclose(channel_scores(model, data).scores, base[:, perm], rtol=1e-12)


def test_batching_does_not_change_scores():
    model = make()
    data = dataset(20, 3, 3, seed=4)
    a = channel_scores(model, data, batch_size=256).scores
    b = channel_scores(model, data, batch_size=3).scores
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_per_sample_grads_match_single_sample_calls():
    model = make()
    data = dataset(6, 3, 3, seed=5)
    g = feature_log_prob_grads(model, data.features, data.labels)
    for i in range(6):
        one = feature_log_prob_grads(model, data.features[i:i + 1], data.labels[i:i + 1])
        np.testing.assert_allclose(g[i], one[0], rtol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        channel_scores(make(), dataset(4, 5, 3))


def test_finite_difference_oracle():
    passed, detail = fisher_oracle(20)
    assert passed, detail
