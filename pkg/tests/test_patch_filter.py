import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hmic.nn import Dense, DimensionError, Flatten
from hmic.nn.layers import Reshape
from hmic.optim import Adam
from hmic.patch_filter import (Autoencoder, AutoencoderSpec, ClusterModel, autoencoder_train, cluster_table,
                               default_autoencoder_spec, encode, fit_patch_filter, format_count, kmeans_assign,
                               kmeans_fit, reconstruction_mse, select_useful_cluster, apply_patch_filter)
from hmic.synthetic import generate_slides, tissue_fraction
from hmic.preprocess import PatchSpec, extract_patches

from oracles import best_two_partition


# ---------------------------------------------------------------- autoencoder

def identity_capable_spec():
    return AutoencoderSpec((2, 2, 3), (Flatten(), Dense(12, "linear")), (Dense(12, "sigmoid"), Reshape((2, 2, 3))))


def test_autoencoder_overfits_constant_images():
    x = np.stack([np.full((2, 2, 3), v, np.float32) for v in np.linspace(0.1, 0.9, 10)])
    ae = autoencoder_train(x, identity_capable_spec(), optimizer=Adam(lr=0.01), epochs=200, seed=0)
    assert ae.history[-1] < 1e-3
    assert reconstruction_mse(ae, x) == pytest.approx(ae.history[-1])


def test_zero_epochs_returns_initial_weights():
    spec = default_autoencoder_spec(8, latent_dim=4)
    x = np.random.default_rng(0).random((3, 8, 8, 3))
    a = autoencoder_train(x, spec, epochs=0, seed=5)
    b = autoencoder_train(x, spec, epochs=0, seed=5)
    assert a.history == []
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_training_is_deterministic():
    spec = default_autoencoder_spec(8, latent_dim=4)
    x = np.random.default_rng(0).random((10, 8, 8, 3))
    a = autoencoder_train(x, spec, epochs=2, seed=1)
    b = autoencoder_train(x, spec, epochs=2, seed=1)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_encode_zero_weights_and_determinism():
    spec = default_autoencoder_spec(8, latent_dim=5)
    ae = autoencoder_train(np.zeros((1, 8, 8, 3)), spec, epochs=0)
    zero = Autoencoder(spec, {k: np.zeros_like(v) for k, v in ae.params.items()})
    x = np.random.default_rng(0).random((8, 8, 3))
    np.testing.assert_array_equal(encode(zero, x), np.zeros(5))
    z = encode(ae, np.stack([x, x]))
    np.testing.assert_array_equal(z[0], z[1])
    assert encode(ae, x).shape == (5,)


def test_autoencoder_shape_errors():
    with pytest.raises(DimensionError):
        AutoencoderSpec((2, 2, 3), (Flatten(), Dense(4)), (Dense(5), Reshape((5,))))
    with pytest.raises(ValueError):
        default_autoencoder_spec(10)
    ae = autoencoder_train(np.zeros((1, 8, 8, 3)), default_autoencoder_spec(8), epochs=0)
    with pytest.raises(DimensionError):
        encode(ae, np.zeros((2, 4, 4, 3)))


# ---------------------------------------------------------------- k-means

def test_kmeans_one_dimensional_example():
    model = kmeans_fit([0.0, 0.1, 10.0, 10.1], 2, seed=0)
    np.testing.assert_allclose(sorted(model.centroids[:, 0]), [0.05, 10.05], atol=1e-12)
    assert model.inertia == pytest.approx(best_two_partition([[0], [0.1], [10], [10.1]]))


def test_kmeans_n_equals_k():
    pts = np.array([[0.0, 1.0], [3.0, -2.0], [5.0, 5.0]])
    model = kmeans_fit(pts, 3)
    assert model.inertia == 0.0
    assert sorted(map(tuple, model.centroids)) == sorted(map(tuple, pts))


def test_kmeans_identical_points():
    model = kmeans_fit(np.ones((6, 2)), 2, seed=3)
    assert model.inertia == 0.0
    assert len(np.unique(model.labels)) == 1


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((1, 2)), 2)
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((3, 2)), 0)


@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 3)), elements=st.floats(-50, 50)),
       st.integers(1, 4), st.integers(0, 100))
def test_kmeans_inertia_non_increasing_and_centroids_are_means(x, k, seed):
    k = min(k, len(x))
    model = kmeans_fit(x, k, seed=seed)
    assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(model.history, model.history[1:]))
    for j in range(k):
        members = x[model.labels == j]
        if len(members):
            np.testing.assert_allclose(model.centroids[j], members.mean(axis=0), atol=1e-9)


def test_assign_examples():
    model = ClusterModel(2, np.array([[0.0, 0.0], [2.0, 0.0]]), 0.0, np.zeros(0), [], 0)
    assert kmeans_assign(model, [2.0, 0.0]) == 1
    assert kmeans_assign(model, [0.0, 0.0]) == 0
    assert kmeans_assign(model, [1.0, 0.0]) == 0
    with pytest.raises(DimensionError):
        kmeans_assign(model, [1.0])


@given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10)), arrays(np.float64, 3, elements=st.floats(-10, 10)))
def test_assign_matches_linear_scan(centroids, point):
    model = ClusterModel(5, centroids, 0.0, np.zeros(0), [], 0)
    dists = [float(np.sum((c - point) ** 2)) for c in centroids]
    best = min(range(5), key=lambda j: (dists[j], j))
    assert kmeans_assign(model, point) == best


# ---------------------------------------------------------------- selection

def _blank_and_textured(seed=0, n=10):
    rng = np.random.default_rng(seed)
    blank = np.clip(rng.normal(246, 2, size=(n, 16, 16, 3)), 0, 255).astype(np.uint8)
    textured = rng.integers(60, 200, size=(n, 16, 16, 3)).astype(np.uint8)
    return blank, textured


@pytest.mark.parametrize("criterion", ["variance", "density"])
def test_textured_cluster_selected(criterion):
    blank, textured = _blank_and_textured()
    patches = np.concatenate([textured, blank])
    model = ClusterModel(2, np.zeros((2, 1)), 0.0, np.zeros(0), [], 0)
    assignments = np.array([1] * 10 + [0] * 10)
    assert select_useful_cluster(model, patches, assignments, criterion) == 1
    assert select_useful_cluster(model, patches, 1 - assignments, criterion) == 0


def test_selection_tie_and_errors():
    patches = np.full((4, 4, 4, 3), 100, np.uint8)
    model = ClusterModel(2, np.zeros((2, 1)), 0.0, np.zeros(0), [], 0)
    assert select_useful_cluster(model, patches, [0, 1, 0, 1]) == 0
    with pytest.raises(ValueError):
        select_useful_cluster(ClusterModel(3, np.zeros((3, 1)), 0.0, np.zeros(0), [], 0), patches, [0, 1, 2, 0])
    with pytest.raises(ValueError):
        select_useful_cluster(model, patches, [0, 1, 0, 1], "entropy")


def test_count_format():
    assert format_count(7742, 16830) == "7,742 (46%)"
    rows = cluster_table({"EE": [True, False, False, False], "CD": [True, True]})
    assert rows[0] == ["EE", "4", "1 (25%)", "3 (75%)"]
    assert rows[-1] == ["Total", "6", "3 (50%)", "3 (50%)"]


@pytest.mark.parametrize("seed", range(3))
def test_filter_keeps_tissue_and_drops_background_on_synthetic_slides(seed):
    _, images = generate_slides(seed=seed, n_slides_per_class=2, image_size=128)
    patches = [p.image for img in images for p in extract_patches(img, PatchSpec(32))]
    tissue = np.array([tissue_fraction(p) for p in patches])
    result = fit_patch_filter(patches, input_size=16, epochs=3, seed=seed)
    assert result.useful[tissue >= 0.95].all()
    assert not result.useful[tissue <= 0.3].any()
    np.testing.assert_array_equal(apply_patch_filter(result, patches), result.useful)
