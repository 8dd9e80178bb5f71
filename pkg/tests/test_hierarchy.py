import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hmic.hierarchy import (HierarchyConfig, HierarchyStateError, LabelError, LevelModel, TrainParams,
                            aggregate_slide, balance_augment, child_architecture, hmic_predict, hmic_predict_patch,
                            hmic_train, parent_architecture, patch_map_label)
from hmic.preprocess import IDENTITY_BALANCE, balance_level_params, color_balance, stain_stats
from hmic.synthetic import CHILD_LABELS, PARENT_LABELS, synthetic_patch_dataset


class Stub:
    """Always returns the same probability vector."""
    params = {}

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)

    def predict_proba(self, images):
        return np.tile(self.probs, (len(images), 1))


PATCHES = np.zeros((5, 4, 4, 3), np.uint8)


def test_always_cd_and_always_iiib():
    cfg = HierarchyConfig(parent=Stub([0.1, 0.2, 0.7]), child=Stub([0.1, 0.2, 0.6, 0.1]))
    preds = hmic_predict(cfg, PATCHES)
    assert [(p.parent_label, p.child_label) for p in preds] == [("CD", "IIIb")] * 5
    assert cfg.joint_label(preds[0].parent_label, preds[0].child_label) == "CD/IIIb"


def test_non_routed_parent_has_no_child():
    cfg = HierarchyConfig(parent=Stub([0.8, 0.1, 0.1]), child=None)
    p = hmic_predict_patch(cfg, PATCHES[0])
    assert p.parent_label == "Normal" and p.child_label is None and p.child_probs is None
    assert cfg.joint_label("Normal", None) == "Normal"


def test_untrained_models_raise_state_error():
    with pytest.raises(HierarchyStateError):
        hmic_predict(HierarchyConfig(), PATCHES)
    with pytest.raises(HierarchyStateError):
        hmic_predict(HierarchyConfig(parent=Stub([0, 0, 1.0])), PATCHES)
    spec = parent_architecture(4, filters=(2, 2, 2), pools=(1, 1, 1), dense=4)
    with pytest.raises(HierarchyStateError):
        LevelModel(spec, None, PARENT_LABELS).predict_proba(PATCHES)
    assert hmic_predict(HierarchyConfig(parent=Stub([0, 0, 1.0])), PATCHES[:0]) == []


def test_label_set_validation():
    with pytest.raises(LabelError):
        HierarchyConfig(routed_parent="XX")
    with pytest.raises(LabelError):
        HierarchyConfig(child_labels=("I", "CD"))
    with pytest.raises(LabelError):
        HierarchyConfig(parent_labels=("A", "A", "CD"))
    with pytest.raises(LabelError):
        HierarchyConfig(child_labels=())


# ---------------------------------------------------------------- MAP and aggregation

def test_map_label_examples():
    assert patch_map_label([0, 0, 1]) == 2
    assert patch_map_label([0.25] * 4) == 0
    with pytest.raises(ValueError):
        patch_map_label([0.5, 0.6])
    with pytest.raises(ValueError):
        patch_map_label([])


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(0.01, 1)))
def test_map_label_matches_scan(v):
    p = v / v.sum()
    best = 0
    for i in range(len(p)):
        if p[i] > p[best]:
            best = i
    assert patch_map_label(p) == best


def test_aggregation_examples():
    assert aggregate_slide([[0.2, 0.5, 0.3]]).label == 1
    s = aggregate_slide([[0.6, 0.4], [0.3, 0.7]], "s1")
    np.testing.assert_allclose(s.sums, [0.9, 1.1])
    assert s.label == 1 and s.n == 2 and s.slide_id == "s1"
    assert aggregate_slide([[0.5, 0.5], [0.25, 0.75], [0.75, 0.25]]).label == 0
    with pytest.raises(ValueError):
        aggregate_slide([])


@given(st.lists(st.lists(st.floats(0, 1), min_size=3, max_size=3), min_size=1, max_size=30),
       st.sampled_from([0.5, 2.0, 3.0, 1e-3]))
def test_aggregation_order_and_scale_invariant(rows, scale):
    rows = np.array(rows)
    base = aggregate_slide(rows).label
    assert aggregate_slide(rows[::-1]).label == base
    assert aggregate_slide(rows * scale).label == base


# ---------------------------------------------------------------- training

def test_balance_augment_stacks_levels():
    imgs = np.random.default_rng(0).integers(0, 256, (3, 4, 4, 3)).astype(np.uint8)
    out = balance_augment(imgs, (0.0, 100.0))
    assert out.shape == (6, 4, 4, 3)
    np.testing.assert_array_equal(out[:3], imgs)
    np.testing.assert_array_equal(out[3], color_balance(imgs[0], balance_level_params(100.0)))


def test_reference_architectures_scale_down():
    spec = parent_architecture(64, filters=(8, 8, 16), pools=(4, 4, 2), dense=32)
    assert spec.input_shape == (64, 64, 3) and spec.num_classes == 3
    assert child_architecture(64, filters=(16, 16, 32), pools=(4, 4, 2), dense=32).num_classes == 4


def _small_params(**kw):
    return TrainParams(parent_spec=parent_architecture(32, (4, 4, 8), (2, 2, 2), 16),
                       child_spec=child_architecture(32, (4, 4, 8), (2, 2, 2), 16),
                       parent_epochs=1, child_epochs=1, balance_levels=(0.0, 50.0), **kw)


def test_training_errors():
    cfg = HierarchyConfig()
    x = np.zeros((2, 32, 32, 3), np.uint8)
    with pytest.raises(ValueError):
        hmic_train(cfg, x, ["Normal", "EE"], x[:0], [], _small_params())
    with pytest.raises(LabelError):
        hmic_train(cfg, x, ["Normal", "Sick"], x, ["I", "I"], _small_params())
    with pytest.raises(LabelError):
        hmic_train(cfg, x, ["Normal", "EE"], x, ["I", "IV"], _small_params())


@pytest.fixture(scope="module")
def trained():
    px, py, psplit = synthetic_patch_dataset(0, 2, 128, 32, "parent", 0.9)
    cx, cy, csplit = synthetic_patch_dataset(0, 2, 128, 32, "child", 0.9)
    params = _small_params(seed=3, child_lr=1e-3)
    cfg = hmic_train(HierarchyConfig(), px, [PARENT_LABELS[i] for i in py], cx, [CHILD_LABELS[i] for i in cy],
                     params)
    return cfg, params, px, py


def test_trained_hierarchy_labels_every_patch(trained):
    cfg, params, px, py = trained
    preds = hmic_predict(cfg, px)
    assert len(preds) == len(px)
    for p in preds:
        assert p.parent_label in PARENT_LABELS
        assert (p.child_label is not None) == (p.parent_label == "CD")
        if p.child_label is not None:
            assert p.child_label in CHILD_LABELS
            assert abs(p.child_probs.sum() - 1) < 1e-5
    assert set(params.history) == {"parent", "child"}
    assert cfg.parent.balance == IDENTITY_BALANCE and cfg.child.stain is not None


def test_child_stain_target_comes_from_child_training_set(trained):
    cfg, *_ = trained
    cx, _, _ = synthetic_patch_dataset(0, 2, 128, 32, "child", 0.9)
    assert cfg.child.stain == stain_stats(cx)
