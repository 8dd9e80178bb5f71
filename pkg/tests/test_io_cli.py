import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hmic import io as hio
from hmic.cli import ConfigError, RunConfig, evaluate_predictions, main, resolve_config, build_parser
from hmic.hierarchy import parent_architecture
from hmic.nn import Dense, Flatten, NetworkSpec, SoftmaxOutput, init_params, predict_proba
from hmic.optim import Adam
from hmic.patch_filter import patch_intensity_variance
from hmic.preprocess import PatchSpec, extract_patches
from hmic.synthetic import (CHILD_LABELS, PARENT_LABELS, generate_slides, render_slide, synthetic_patch_dataset,
                            tissue_fraction)


# ---------------------------------------------------------------- manifest

def test_manifest_round_trip(tmp_path):
    recs = [hio.ManifestRecord("a", "slides/a.png", "Normal"), hio.ManifestRecord("b", "b.ppm", "CD", "IIIa")]
    path = tmp_path / "m.csv"
    hio.write_manifest(path, recs)
    assert hio.load_manifest(path) == recs
    assert path.read_text().splitlines()[0] == "slide_id,path,parent_label,child_label"


def test_manifest_with_only_header_is_empty(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("slide_id,path,parent_label,child_label\n")
    assert hio.load_manifest(path) == []


@pytest.mark.parametrize("body, line", [
    ("a,a.png,Normal,I\n", 2),
    ("a,a.png,CD,\n", 2),
    ("a,a.png,EE,\na,b.png,EE,\n", 3),
    ("a,a.png,EE,,extra\n", 2),
    ("a,,EE,\n", 2),
])
def test_manifest_errors_name_the_line(tmp_path, body, line):
    path = tmp_path / "m.csv"
    path.write_text("slide_id,path,parent_label,child_label\n" + body)
    with pytest.raises(hio.ManifestError, match=f"line {line}"):
        hio.load_manifest(path)


def test_manifest_bad_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("id,path\n")
    with pytest.raises(hio.ManifestError, match="line 1"):
        hio.load_manifest(path)


# ---------------------------------------------------------------- images

@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_image_round_trip(tmp_path, suffix):
    img = np.random.default_rng(0).integers(0, 256, (7, 5, 3)).astype(np.uint8)
    path = tmp_path / f"x{suffix}"
    hio.write_image(path, img)
    np.testing.assert_array_equal(hio.read_image(path), img)


def test_lossy_container_rejected(tmp_path):
    with pytest.raises(ValueError):
        hio.write_image(tmp_path / "x.jpg", np.zeros((2, 2, 3), np.uint8))


# ---------------------------------------------------------------- checkpoints

def _model():
    spec = NetworkSpec((4, 4, 3), (Flatten(), Dense(5, "tanh"), SoftmaxOutput(3)))
    return spec, init_params(spec.input_shape, spec.layers, seed=7)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    spec, params = _model()
    opt = Adam(lr=0.01)
    opt.step(params, {k: np.ones_like(v) for k, v in params.items()})
    path = tmp_path / "m.ckpt"
    hio.save_checkpoint(path, spec, params, {"labels": ["a", "b", "c"]}, opt)
    ck = hio.load_checkpoint(path)
    assert ck.spec == spec and ck.metadata == {"labels": ["a", "b", "c"]}
    assert list(ck.params) == list(params)
    for k in params:
        assert ck.params[k].tobytes() == params[k].tobytes()
    assert ck.optimizer.state_dict()["t"] == 1
    for name, store in opt.state_dict()["aux"].items():
        for k, v in store.items():
            np.testing.assert_array_equal(ck.optimizer.aux[name][k], v)
    x = np.random.default_rng(0).random((6, 4, 4, 3)).astype(np.float32)
    assert predict_proba(spec, params, x).tobytes() == predict_proba(ck.spec, ck.params, x).tobytes()
    assert path.read_bytes()[:5] == b"HMIC1"


def test_checkpoint_format_errors(tmp_path):
    spec, params = _model()
    path = tmp_path / "m.ckpt"
    hio.save_checkpoint(path, spec, params)
    data = path.read_bytes()
    for bad, msg in [(data[:-3], "truncated"), (b"XXXXX" + data[5:], "magic"),
                     (data[:5] + (2).to_bytes(2, "little") + data[7:], "version 2"), (data + b"\0", "trailing")]:
        path.write_bytes(bad)
        with pytest.raises(hio.FormatError, match=msg):
            hio.load_checkpoint(path)


def test_checkpoint_requires_float32(tmp_path):
    spec, params = _model()
    with pytest.raises(ValueError):
        hio.save_checkpoint(tmp_path / "m.ckpt", spec, {k: v.astype(np.float64) for k, v in params.items()})


# ---------------------------------------------------------------- synthetic data

def test_synthetic_generation_is_deterministic():
    ra, ia = generate_slides(seed=3, n_slides_per_class=2, image_size=64)
    rb, ib = generate_slides(seed=3, n_slides_per_class=2, image_size=64)
    assert ra == rb
    assert all(a.tobytes() == b.tobytes() for a, b in zip(ia, ib))
    _, ic = generate_slides(seed=4, n_slides_per_class=2, image_size=64)
    assert ia[0].tobytes() != ic[0].tobytes()


def test_synthetic_records_obey_child_invariant():
    recs, imgs = generate_slides(seed=0, n_slides_per_class=4, image_size=64)
    assert len(recs) == 6 * 4
    for r in recs:
        assert (r.child_label is not None) == (r.parent_label == "CD")
    assert sum(r.split == "test" for r in recs) == 6
    with pytest.raises(ValueError):
        render_slide(np.random.default_rng(0), "Normal", "I")


@pytest.fixture(scope="module")
def leaf_patches():
    recs, imgs = generate_slides(seed=0, n_slides_per_class=8, image_size=256)
    x, leaf, parent, child, split = [], [], [], [], []
    for r, img in zip(recs, imgs):
        for p in extract_patches(img, PatchSpec(64)):
            if tissue_fraction(p.image) >= 0.9:
                x.append(p.image)
                leaf.append(f"{r.parent_label}/{r.child_label}")
                parent.append(r.parent_label)
                child.append(r.child_label)
                split.append(r.split)
    return np.stack(x), np.array(leaf), np.array(parent), np.array(child, dtype=object), np.array(split)


def test_extreme_classes_differ_in_patch_variance(leaf_patches):
    x, leaf, *_ = leaf_patches
    var = patch_intensity_variance(x)
    means = [var[leaf == c].mean() for c in np.unique(leaf)]
    assert max(means) > 2 * min(means)


def _histograms(x, bins=8):
    return np.stack([np.concatenate([np.histogram(im[..., c], bins=bins, range=(0, 256))[0] for c in range(3)])
                     for im in x]) / (x.shape[1] * x.shape[2])


def _linear_accuracy(h, y, train):
    """Held-out accuracy of an L2-regularized softmax regression on standardized features."""
    classes = sorted(set(y))
    yi = np.array([classes.index(v) for v in y])
    mu, sd = h[train].mean(0), h[train].std(0) + 1e-9
    z = np.c_[(h - mu) / sd, np.ones(len(h))]
    w = np.zeros((z.shape[1], len(classes)))
    t = np.eye(len(classes))[yi]
    for _ in range(2000):
        s = z[train] @ w
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        w -= 0.5 * (z[train].T @ (p - t[train]) / train.sum() + 1e-3 * w)
    return float(np.mean((z[~train] @ w).argmax(1) == yi[~train]))


def test_histogram_linear_classifier_separates_each_level(leaf_patches):
    x, leaf, parent, child, split = leaf_patches
    h = _histograms(x)
    train = split == "train"
    cd = parent == "CD"
    assert _linear_accuracy(h, parent, train) > 0.9
    assert _linear_accuracy(h[cd], child[cd], train[cd]) > 0.9
    assert _linear_accuracy(h, leaf, train) > 0.9


def test_patch_dataset_levels():
    x, y, split = synthetic_patch_dataset(0, 2, 64, 32, "child", 0.5)
    assert x.dtype == np.uint8 and x.shape[1:] == (32, 32, 3)
    assert set(y) <= set(range(len(CHILD_LABELS)))
    assert set(split) == {"train", "test"}
    with pytest.raises(ValueError):
        synthetic_patch_dataset(level="leaf")


# ---------------------------------------------------------------- configuration

def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"patch_sz": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"patch_size": "64"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"overlap": 1.0})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"image_size": 32, "patch_size": 64})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"balance_levels": [-1]})
    assert RunConfig.from_dict({"parent_lr": 1}).parent_lr == 1.0


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5, "patch_size": 32, "parent_epochs": 3, "child_epochs": 7}))
    args = build_parser().parse_args(["train-parent", "--config", str(path), "--seed", "9", "--epochs", "2",
                                      "--balance-levels", "0,50", "--no-hierarchy"])
    cfg = resolve_config(args)
    assert (cfg.seed, cfg.patch_size, cfg.parent_epochs, cfg.child_epochs) == (9, 32, 2, 7)
    assert cfg.balance_levels == (0.0, 50.0) and cfg.hierarchy is False


def test_stage_seeds_are_distinct_and_stable():
    cfg = RunConfig(seed=1)
    seeds = [cfg.stage_seed(s) for s in ("synth", "patch", "filter", "train-parent")]
    assert len(set(seeds)) == 4 and seeds == [RunConfig(seed=1).stage_seed(s) for s in
                                              ("synth", "patch", "filter", "train-parent")]


def test_bad_config_file_exits_2(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text("[1, 2]")
    assert main(["synth", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "JSON object" in capsys.readouterr().err


@pytest.mark.parametrize("stage, needed", [("predict", "train-parent"), ("patch", "synth"), ("filter", "patch"),
                                           ("evaluate", "predict"), ("train-child", "patch"), ("train-parent", "balance")])
def test_missing_artifacts_name_the_stage_to_run(tmp_path, capsys, stage, needed):
    assert main([stage, "--out", str(tmp_path / "run")]) == 2
    assert f"hmic {needed}" in capsys.readouterr().err


# ---------------------------------------------------------------- evaluation

def _rows(parent_true, parent_pred, child_true=None, child_pred=None, slide="s0", split="test"):
    rows = []
    child_true = child_true or ["-"] * len(parent_true)
    child_pred = child_pred or ["-"] * len(parent_true)
    for i, (pt, pp, ct, cp) in enumerate(zip(parent_true, parent_pred, child_true, child_pred)):
        row = {"slide_id": slide if isinstance(slide, str) else slide[i], "x": str(i), "y": "0", "split": split,
               "parent_true": pt, "child_true": ct, "parent_pred": pp, "child_pred": cp,
               "routed": "1" if pp == "CD" else "0"}
        for l in PARENT_LABELS:
            row[f"p_{l}"] = "1.0" if l == pp else "0.0"
        for l in CHILD_LABELS:
            row[f"c_{l}"] = ("1.0" if l == cp else "0.0") if (pt == "CD" or pp == "CD") else ""
        if (pt == "CD" or pp == "CD") and cp == "-":
            for l in CHILD_LABELS:
                row[f"c_{l}"] = "0.25"
        rows.append(row)
    return rows


def _perfect_rows():
    rows = []
    for k, (p, c) in enumerate([("Normal", "-"), ("EE", "-")] + [("CD", c) for c in CHILD_LABELS]):
        rows += _rows([p] * 3, [p] * 3, [c] * 3, [c] * 3, slide=f"s{k}")
    return rows


def test_perfect_predictions_score_one_everywhere(tmp_path):
    rows = _perfect_rows()
    (tmp_path / "predictions").mkdir()
    with (tmp_path / "predictions" / "patches.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    assert main(["evaluate", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "reports" / "report.json").read_text())
    for level in ("parent", "child"):
        assert all(c["f1"] == 1.0 for c in report["per_class"][level].values())
        assert report["macro"][level]["f1"] == 1.0
        assert report["slide_summary"][level]["accuracy"] == 1.0
    assert report["hierarchical"]["joint_accuracy"] == 1.0
    assert {"per_class", "macro", "micro", "mcc", "auc", "slide_level"} <= set(report)
    table = list(csv.reader((tmp_path / "reports" / "table.csv").open()))
    assert table[0] == ["level", "class", "mode", "precision", "recall", "f1"]
    assert all(r[5] == "1.0000" for r in table[1:])
    assert {r[2] for r in table[1:]} == {"NWS", "WS"}
    roc = (tmp_path / "reports" / "roc_parent_EE.csv").read_text().splitlines()
    assert roc[0] == "threshold,fpr,tpr"


def test_unrouted_cd_slide_counts_as_child_error():
    rows = _rows(["CD"] * 2, ["EE"] * 2, ["I"] * 2, ["-"] * 2, slide="a")
    rows += _rows(["CD"] * 2, ["CD"] * 2, ["IIIa"] * 2, ["IIIa"] * 2, slide="b")
    report, _ = evaluate_predictions(rows, PARENT_LABELS, CHILD_LABELS, "CD")
    assert report["slide_summary"]["child"]["accuracy"] == 0.5
    assert report["slide_summary"]["child"]["unrouted_slides"] == 1


@given(st.lists(st.tuples(st.sampled_from(["Normal", "EE", "CD"]), st.sampled_from(["Normal", "EE", "CD"]),
                          st.sampled_from(CHILD_LABELS), st.sampled_from(CHILD_LABELS)), min_size=1, max_size=40))
def test_joint_accuracy_never_exceeds_parent_accuracy(cases):
    pt, pp, ct, cp = zip(*cases)
    ct = [c if p == "CD" else "-" for p, c in zip(pt, ct)]
    cp = [c if p == "CD" else "-" for p, c in zip(pp, cp)]
    rows = _rows(list(pt), list(pp), ct, cp, slide=[f"s{i % 3}" for i in range(len(pt))])
    report, _ = evaluate_predictions(rows, PARENT_LABELS, CHILD_LABELS, "CD")
    assert report["hierarchical"]["joint_accuracy"] <= report["hierarchical"]["parent_accuracy"] + 1e-12


# ---------------------------------------------------------------- stage chain at toy scale

TINY = {"n_slides_per_class": 2, "image_size": 128, "patch_size": 32, "filter_epochs": 1, "filter_restarts": 2,
        "balance_levels": [0.0, 50.0], "parent_filters": [4, 4, 8], "parent_pools": [2, 2, 2], "parent_dense": 8,
        "parent_epochs": 1, "child_filters": [4, 4, 8], "child_epochs": 1, "members": 3, "rmdl_input_size": 16,
        "rmdl_epochs": 1}


def test_every_stage_runs_from_persisted_inputs(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = tmp_path / "run"
    base = ["--config", str(cfg), "--out", str(out)]
    for stage in ("synth", "patch", "filter", "balance", "train-parent", "train-child", "train-rmdl", "predict",
                  "evaluate"):
        assert main([stage] + base) == 0, stage
    assert len(hio.load_manifest(out / "manifest.csv")) == 12
    index = list(csv.DictReader((out / "patches" / "index.csv").open()))
    assert len(index) == 12 * 16 and {r["useful"] for r in index} == {"0", "1"}
    assert (out / "patches" / index[0]["slide_id"] / f"{index[0]['x']}_{index[0]['y']}.png").exists()
    assert sorted(p.name for p in (out / "models" / "rmdl").iterdir())[:1] == ["member_00.ckpt"]
    assert (out / "reports" / "rmdl.json").exists() and (out / "reports" / "filter_table.csv").exists()
    first = (out / "reports" / "report.json").read_bytes()
    assert main(["evaluate"] + base) == 0
    assert (out / "reports" / "report.json").read_bytes() == first
    assert main(["predict", "--no-hierarchy"] + base) == 0
    assert main(["evaluate"] + base) == 0
    report = json.loads((out / "reports" / "report.json").read_text())
    assert "child" not in report["per_class"]


def test_level_checkpoint_keeps_preprocessing(tmp_path):
    from hmic.cli import load_level_model, save_level_model
    from hmic.hierarchy import LevelModel
    from hmic.preprocess import StainNormParams
    spec = parent_architecture(16, (2, 2, 2), (2, 2, 2), 4)
    model = LevelModel(spec, init_params(spec.input_shape, spec.layers), PARENT_LABELS,
                       stain=StainNormParams((0.1, 0.2, 0.3), (1.0, 2.0, 3.0)))
    save_level_model(tmp_path / "m.ckpt", model)
    back = load_level_model(tmp_path / "m.ckpt")
    assert back.stain == model.stain and back.labels == PARENT_LABELS and back.balance is None
    x = np.random.default_rng(0).integers(0, 256, (3, 16, 16, 3)).astype(np.uint8)
    assert back.predict_proba(x).tobytes() == model.predict_proba(x).tobytes()
