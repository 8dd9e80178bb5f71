"""Batch front-end. Every stage reads the previous stage's files from the working
directory, so any stage can be rerun on its own.

Layout under ``--out``::

    manifest.csv                      slide list (synth writes it; bring your own otherwise)
    slides/<slide_id>.png
    patches/<slide_id>/<x>_<y>.png
    patches/index.csv                 one row per patch, with split and filter decision
    balanced/<level>/<slide_id>/<x>_<y>.png, balanced/index.csv
    models/parent.ckpt, models/child.ckpt, models/rmdl/member_XX.ckpt
    predictions/patches.csv
    reports/report.json, reports/table.csv, reports/roc_*.csv, reports/rmdl.json
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as hio
from . import metrics as M
from .hierarchy import (HierarchyConfig, LevelModel, PatchPrediction, aggregate_slide, child_architecture,
                        hmic_predict, parent_architecture)
from .nn.layers import init_params
from .nn.train import fit
from .optim import Adam, RmsProp
from .patch_filter import USEFUL_CRITERIA, apply_patch_filter, cluster_table, fit_patch_filter
from .preprocess import (DEFAULT_BALANCE_LEVELS, IDENTITY_BALANCE, ColorBalanceParams, PatchSpec,
                         StainNormParams, balance_level_params, color_balance, extract_patches,
                         resize_bilinear, stain_stats, to_float)
from .rmdl import (Ensemble, EnsembleSpec, RandomModelSpec, TrainedMember, ensemble_predict_batch,
                   sample_ensemble, train_ensemble, write_curve_csv)
from .synthetic import CHILD_LABELS, PARENT_LABELS, ROUTED_PARENT, generate_slides

log = logging.getLogger("hmic")

STAGES = ("synth", "patch", "filter", "balance", "train-parent", "train-child", "train-rmdl", "predict",
          "evaluate")
INDEX_FIELDS = ("slide_id", "x", "y", "path", "parent_label", "child_label", "split", "useful")


class StageError(RuntimeError):
    """A stage cannot run; the message names what to do about it."""


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    out: str = "hmic_run"
    seed: int = 0
    # synthetic data
    n_slides_per_class: int = 8
    image_size: int = 256
    # patching
    patch_size: int = 64
    overlap: float = 0.0
    test_fraction: float = 0.25
    # filter
    filter_input_size: int = 16
    filter_latent_dim: int = 32
    filter_epochs: int = 5
    filter_restarts: int = 5
    filter_criterion: str = "density"
    # balancing
    balance_levels: tuple = DEFAULT_BALANCE_LEVELS
    # hierarchy
    hierarchy: bool = True
    parent_filters: tuple = (8, 8, 16)
    parent_pools: tuple = (4, 4, 2)
    parent_dense: int = 32
    parent_lr: float = 0.001
    parent_epochs: int = 10
    child_filters: tuple = (16, 16, 32)
    child_dropout: float = 0.5
    child_lr: float = 0.001
    child_epochs: int = 40
    batch_size: int = 32
    # ensemble
    members: int = 9
    rmdl_input_size: int = 32
    rmdl_epochs: int = 10
    rmdl_adam_lr: float = 0.001
    rmdl_rmsprop_lr: float = 0.001

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(f.default, tuple):
                setattr(self, f.name, tuple(v))
        positive = ("n_slides_per_class", "image_size", "patch_size", "filter_input_size", "filter_latent_dim",
                    "filter_epochs", "filter_restarts", "parent_dense", "parent_epochs", "child_epochs",
                    "batch_size", "members", "rmdl_input_size", "rmdl_epochs")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("parent_lr", "child_lr", "rmdl_adam_lr", "rmdl_rmsprop_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError("overlap must lie in [0, 1)")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.image_size < self.patch_size:
            raise ConfigError("image_size must be >= patch_size")
        if any(p < 0 for p in self.balance_levels) or not self.balance_levels:
            raise ConfigError("balance_levels must be a non-empty list of percentages >= 0")
        if len(self.parent_filters) != len(self.parent_pools) or len(self.child_filters) != len(self.parent_pools):
            raise ConfigError("filter and pool lists must have the same length")
        if self.filter_criterion not in USEFUL_CRITERIA:
            raise ConfigError(f"filter_criterion must be one of {sorted(USEFUL_CRITERIA)}")
        if not 0.0 <= self.child_dropout < 1.0:
            raise ConfigError("child_dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        clean = {}
        for k, v in d.items():
            default = known[k].default
            if isinstance(default, bool):
                ok = isinstance(v, bool)
            elif isinstance(default, int):
                ok = isinstance(v, int) and not isinstance(v, bool)
            elif isinstance(default, float):
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
                v = float(v) if ok else v
            elif isinstance(default, tuple):
                ok = isinstance(v, (list, tuple)) and all(isinstance(x, (int, float)) for x in v)
            else:
                ok = isinstance(v, str)
            if not ok:
                raise ConfigError(f"config key {k!r} has the wrong type ({type(v).__name__})")
            clean[k] = v
        return cls(**clean)

    def stage_seed(self, stage: str) -> int:
        """Independent seed per stage expanded from the root seed."""
        return int(np.random.SeedSequence([self.seed, STAGES.index(stage)]).generate_state(1)[0])


# ---------------------------------------------------------------- helpers

def _path(cfg, *parts) -> Path:
    return Path(cfg.out).joinpath(*parts)


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {path}; run `hmic {stage}` first")
    return path


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path) -> list:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _fmt(v) -> str:
    return repr(float(v))


def _read_index(cfg, require_filter=True) -> list:
    rows = _read_csv(_need(_path(cfg, "patches", "index.csv"), "patch"))
    if require_filter and any(r["useful"] == "" for r in rows):
        raise StageError("patch index has no filter decisions; run `hmic filter` first")
    return rows


def _load_images(cfg, rows) -> np.ndarray:
    if not rows:
        return np.zeros((0, 0, 0, 3), dtype=np.uint8)
    return np.stack([hio.read_image(_path(cfg, r["path"])) for r in rows])


def _assign_splits(records, test_fraction) -> dict:
    """Per leaf class (parent, child), the last slides by id form the test split."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.parent_label, r.child_label)].append(r.slide_id)
    split = {}
    for ids in groups.values():
        ids = sorted(ids)
        n_test = max(1, int(math.floor(len(ids) * test_fraction + 0.5))) if len(ids) > 1 else 0
        for i, sid in enumerate(ids):
            split[sid] = "test" if i >= len(ids) - n_test else "train"
    return split


def save_level_model(path, model: LevelModel, history=None) -> None:
    meta = {"labels": list(model.labels), "history": [dataclasses.asdict(h) for h in history or []]}
    if model.balance is not None:
        meta["balance"] = {"alpha": model.balance.alpha, "matrix": [list(r) for r in model.balance.matrix],
                           "gains": list(model.balance.gains), "gamma": model.balance.gamma}
    if model.stain is not None:
        meta["stain"] = {"mean": list(model.stain.mean), "std": list(model.stain.std)}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    hio.save_checkpoint(path, model.spec, model.params, meta)


def load_level_model(path) -> LevelModel:
    ck = hio.load_checkpoint(path)
    meta = ck.metadata
    balance = ColorBalanceParams(**meta["balance"]) if "balance" in meta else None
    stain = StainNormParams(**meta["stain"]) if "stain" in meta else None
    return LevelModel(ck.spec, ck.params, tuple(meta["labels"]), balance=balance, stain=stain)


# ---------------------------------------------------------------- stages

def stage_synth(cfg: RunConfig) -> None:
    records, images = generate_slides(cfg.stage_seed("synth"), cfg.n_slides_per_class, cfg.image_size,
                                      cfg.test_fraction)
    (_path(cfg, "slides")).mkdir(parents=True, exist_ok=True)
    manifest = []
    for rec, img in zip(records, images):
        rel = f"slides/{rec.slide_id}.png"
        hio.write_image(_path(cfg, rel), img)
        manifest.append(hio.ManifestRecord(rec.slide_id, rel, rec.parent_label, rec.child_label))
    hio.write_manifest(_path(cfg, "manifest.csv"), manifest)
    log.info("wrote %d slides", len(records))


def stage_patch(cfg: RunConfig) -> None:
    records = hio.load_manifest(_need(_path(cfg, "manifest.csv"), "synth"), ROUTED_PARENT)
    spec = PatchSpec(cfg.patch_size, cfg.overlap)
    split = _assign_splits(records, cfg.test_fraction)
    rows = []
    for rec in sorted(records, key=lambda r: r.slide_id):
        img_path = Path(rec.image_path)
        img = hio.read_image(img_path if img_path.is_absolute() else _path(cfg, img_path))
        d = _path(cfg, "patches", rec.slide_id)
        d.mkdir(parents=True, exist_ok=True)
        for p in extract_patches(img, spec, rec.slide_id):
            rel = f"patches/{rec.slide_id}/{p.origin_x}_{p.origin_y}.png"
            hio.write_image(_path(cfg, rel), p.image)
            rows.append([rec.slide_id, p.origin_x, p.origin_y, rel, rec.parent_label, rec.child_label or "",
                         split[rec.slide_id], ""])
    _write_csv(_path(cfg, "patches", "index.csv"), INDEX_FIELDS, rows)
    log.info("extracted %d patches", len(rows))


def stage_filter(cfg: RunConfig) -> None:
    rows = _read_index(cfg, require_filter=False)
    train = [r for r in rows if r["split"] == "train"]
    if not train:
        raise StageError("no training patches to fit the filter on")
    result = fit_patch_filter(_load_images(cfg, train), cfg.filter_input_size, cfg.filter_latent_dim,
                              cfg.filter_epochs, cfg.stage_seed("filter"), cfg.filter_restarts,
                              cfg.filter_criterion)
    useful = apply_patch_filter(result, _load_images(cfg, rows))
    for r, u in zip(rows, useful):
        r["useful"] = "1" if u else "0"
    _write_csv(_path(cfg, "patches", "index.csv"), INDEX_FIELDS, [[r[k] for k in INDEX_FIELDS] for r in rows])
    groups = {}
    for label in sorted({r["parent_label"] for r in rows}):
        groups[label] = [r["useful"] == "1" for r in rows if r["parent_label"] == label]
    _write_csv(_path(cfg, "reports", "filter_table.csv"), ["class", "total", "useful", "not_useful"],
               cluster_table(groups))
    log.info("filter kept %d of %d patches", int(useful.sum()), len(rows))


def stage_balance(cfg: RunConfig) -> None:
    rows = [r for r in _read_index(cfg) if r["split"] == "train" and r["useful"] == "1"]
    if not rows:
        raise StageError("no useful training patches; check the filter stage output")
    out_rows = []
    for level in cfg.balance_levels:
        params = balance_level_params(level)
        tag = f"{level:g}"
        for r in rows:
            img = color_balance(hio.read_image(_path(cfg, r["path"])), params)
            rel = f"balanced/{tag}/{r['slide_id']}/{r['x']}_{r['y']}.png"
            _path(cfg, rel).parent.mkdir(parents=True, exist_ok=True)
            hio.write_image(_path(cfg, rel), img)
            out_rows.append([tag, r["slide_id"], r["x"], r["y"], rel, r["parent_label"]])
    _write_csv(_path(cfg, "balanced", "index.csv"), ["level", "slide_id", "x", "y", "path", "parent_label"],
               out_rows)


def _hist_rows(hist):
    return [[h.epoch, _fmt(h.loss), _fmt(h.accuracy)] for h in hist]


def stage_train_parent(cfg: RunConfig) -> None:
    rows = _read_csv(_need(_path(cfg, "balanced", "index.csv"), "balance"))
    if not rows:
        raise StageError("balanced index is empty; run `hmic balance` first")
    x = _load_images(cfg, rows)
    y = np.array([PARENT_LABELS.index(r["parent_label"]) for r in rows])
    spec = parent_architecture(x.shape[1], cfg.parent_filters, cfg.parent_pools, cfg.parent_dense,
                               len(PARENT_LABELS))
    seeds = np.random.SeedSequence(cfg.stage_seed("train-parent")).generate_state(2)
    params = init_params(spec.input_shape, spec.layers, seed=int(seeds[0]))
    hist = fit(spec, params, to_float(x), y, Adam(lr=cfg.parent_lr), epochs=cfg.parent_epochs,
               batch_size=cfg.batch_size, seed=int(seeds[1]))
    model = LevelModel(spec, params, PARENT_LABELS, balance=IDENTITY_BALANCE)
    save_level_model(_path(cfg, "models", "parent.ckpt"), model, hist)
    _write_csv(_path(cfg, "reports", "curve_parent.csv"), ["epoch", "loss", "accuracy"], _hist_rows(hist))


def stage_train_child(cfg: RunConfig) -> None:
    rows = [r for r in _read_index(cfg)
            if r["split"] == "train" and r["useful"] == "1" and r["parent_label"] == ROUTED_PARENT]
    if not rows:
        raise StageError("child dataset is empty: no useful CD training patches")
    x = _load_images(cfg, rows)
    y = np.array([CHILD_LABELS.index(r["child_label"]) for r in rows])
    spec = child_architecture(x.shape[1], cfg.child_filters, cfg.parent_pools, cfg.parent_dense,
                              len(CHILD_LABELS), cfg.child_dropout or None)
    seeds = np.random.SeedSequence(cfg.stage_seed("train-child")).generate_state(2)
    params = init_params(spec.input_shape, spec.layers, seed=int(seeds[0]))
    model = LevelModel(spec, params, CHILD_LABELS, stain=stain_stats(x))
    hist = fit(spec, params, model.prepare(x), y, RmsProp(lr=cfg.child_lr), epochs=cfg.child_epochs,
               batch_size=cfg.batch_size, seed=int(seeds[1]))
    save_level_model(_path(cfg, "models", "child.ckpt"), model, hist)
    _write_csv(_path(cfg, "reports", "curve_child.csv"), ["epoch", "loss", "accuracy"], _hist_rows(hist))


def default_mix(n: int) -> tuple:
    base, extra = divmod(n, 3)
    return tuple(base + (1 if i < extra else 0) for i in range(3))


def stage_train_rmdl(cfg: RunConfig) -> None:
    rows = [r for r in _read_index(cfg) if r["useful"] == "1"]
    data = {}
    for part in ("train", "test"):
        sel = [r for r in rows if r["split"] == part]
        imgs = [resize_bilinear(im, cfg.rmdl_input_size, cfg.rmdl_input_size) for im in _load_images(cfg, sel)]
        data[part] = (to_float(imgs), np.array([PARENT_LABELS.index(r["parent_label"]) for r in sel], dtype=int))
    if len(data["train"][1]) == 0:
        raise StageError("no useful training patches for the ensemble")
    spec = EnsembleSpec(cfg.members, default_mix(cfg.members), cfg.stage_seed("train-rmdl"), len(PARENT_LABELS),
                        cfg.rmdl_input_size)
    members = sample_ensemble(spec)
    ens = train_ensemble(members, *data["train"], epochs=cfg.rmdl_epochs, batch_size=cfg.batch_size,
                         adam_lr=cfg.rmdl_adam_lr, rmsprop_lr=cfg.rmdl_rmsprop_lr)
    mdir = _path(cfg, "models", "rmdl")
    mdir.mkdir(parents=True, exist_ok=True)
    summary = {"members": []}
    xt, yt = data["test"]
    for i, m in enumerate(ens.members):
        hio.save_checkpoint(mdir / f"member_{i:02d}.ckpt", m.spec.network, m.params,
                            {"family": m.spec.family, "optimizer": m.spec.optimizer, "seed": m.spec.seed})
        write_curve_csv(m, _path(cfg, "reports", f"curve_rmdl_{i:02d}.csv"))
        acc = float(np.mean(np.argmax(m.predict_proba(xt), axis=1) == yt)) if len(yt) else None
        summary["members"].append({"family": m.spec.family, "optimizer": m.spec.optimizer,
                                   "reinitialized": m.reinitialized, "test_accuracy": acc})
    if len(yt):
        accs = [m["test_accuracy"] for m in summary["members"]]
        summary["ensemble_test_accuracy"] = float(np.mean(ensemble_predict_batch(ens, xt) == yt))
        summary["median_member_accuracy"] = float(np.median(accs))
    _write_json(_path(cfg, "reports", "rmdl.json"), summary)


def load_ensemble(cfg) -> Ensemble:
    mdir = _need(_path(cfg, "models", "rmdl"), "train-rmdl")
    members = []
    for p in sorted(mdir.glob("member_*.ckpt")):
        ck = hio.load_checkpoint(p)
        spec = RandomModelSpec(ck.metadata["family"], ck.spec, ck.metadata["optimizer"], ck.metadata["seed"])
        members.append(TrainedMember(spec, ck.params))
    if not members:
        raise StageError("no ensemble members found; run `hmic train-rmdl` first")
    return Ensemble(members, members[0].spec.network.num_classes)


def stage_predict(cfg: RunConfig) -> None:
    parent = load_level_model(_need(_path(cfg, "models", "parent.ckpt"), "train-parent"))
    child = None
    if cfg.hierarchy:
        child = load_level_model(_need(_path(cfg, "models", "child.ckpt"), "train-child"))
    hc = HierarchyConfig(PARENT_LABELS, ROUTED_PARENT, CHILD_LABELS, parent, child)
    rows = [r for r in _read_index(cfg) if r["split"] == "test" and r["useful"] == "1"]
    rows.sort(key=lambda r: (r["slide_id"], int(r["y"]), int(r["x"])))
    x = _load_images(cfg, rows)
    if cfg.hierarchy:
        preds = hmic_predict(hc, x)
    else:
        probs = parent.predict_proba(x) if len(x) else np.zeros((0, len(PARENT_LABELS)))
        preds = [PatchPrediction(PARENT_LABELS[int(np.argmax(p))], p) for p in probs]
    # Level-wise child scoring needs child probabilities on every true-CD patch, routed or not.
    child_probs = {}
    if child is not None:
        idx = [i for i, r in enumerate(rows) if r["parent_label"] == ROUTED_PARENT or preds[i].child_probs is not None]
        if idx:
            for i, p in zip(idx, child.predict_proba(x[idx])):
                child_probs[i] = p
    header = ["slide_id", "x", "y", "split", "parent_true", "child_true", "parent_pred", "child_pred", "routed"]
    header += [f"p_{l}" for l in PARENT_LABELS] + [f"c_{l}" for l in CHILD_LABELS]
    out = []
    for i, (r, pr) in enumerate(zip(rows, preds)):
        cp = child_probs.get(i)
        routed = pr.parent_label == ROUTED_PARENT and cfg.hierarchy
        out.append([r["slide_id"], r["x"], r["y"], r["split"], r["parent_label"], r["child_label"] or "-",
                    pr.parent_label, pr.child_label or "-", int(routed)]
                   + [_fmt(v) for v in pr.parent_probs]
                   + ([_fmt(v) for v in cp] if cp is not None else [""] * len(CHILD_LABELS)))
    _write_csv(_path(cfg, "predictions", "patches.csv"), header, out)


def _level_block(true, probs, labels):
    """Patch-level scores for one level; ``true`` holds label indices."""
    k = len(labels)
    pred = np.argmax(probs, axis=1) if len(probs) else np.zeros(0, dtype=int)
    s = M.classification_summary(true, pred, k, probs if len(probs) else None)
    per_class = {l: {"precision": c["precision"], "recall": c["recall"], "f1": c["f1"], "support": c["support"]}
                 for l, c in zip(labels, s["per_class"])}
    auc = None
    if "auc" in s:
        auc = {"per_class": dict(zip(labels, s["auc"]["per_class"]))}
        for key in ("hand_till_literal", "mean"):
            if key in s["auc"]:
                auc[key] = s["auc"][key]
    return s, per_class, auc


def _slide_scores(true, pred, labels):
    """Slide-level scores; a prediction of ``len(labels)`` means "no label" and is always wrong."""
    k = len(labels)
    cm = M.confusion(true, pred, k + 1)
    counts = M.per_class_counts(cm)[:k]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        macro = {name: M.macro_average(counts, fn) for name, fn in
                 (("precision", M.precision), ("recall", M.recall), ("f1", M.f1))}
    return {"accuracy": float(np.trace(cm)) / len(true), "macro": macro, "confusion": cm[:k].tolist(),
            "per_class": {l: {"precision": M.precision(c), "recall": M.recall(c), "f1": M.f1(c)}
                          for l, c in zip(labels, counts)}}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n", encoding="utf-8")


def evaluate_predictions(rows, parent_labels, child_labels, routed_parent) -> tuple:
    """Build the report dict and ROC curves from prediction rows (dicts as in patches.csv)."""
    rows = [r for r in rows if r.get("split", "test") == "test"]
    if not rows:
        raise StageError("no test predictions to evaluate; run `hmic predict` first")
    rows.sort(key=lambda r: (r["slide_id"], int(r["y"]), int(r["x"])))
    p_true = np.array([parent_labels.index(r["parent_true"]) for r in rows], dtype=int)
    p_probs = np.array([[float(r[f"p_{l}"]) for l in parent_labels] for r in rows])
    report = {"per_class": {}, "macro": {}, "micro": {}, "mcc": {}, "auc": {}, "accuracy": {}}
    rocs = {}
    levels = {"parent": (p_true, p_probs, parent_labels)}
    cd_rows = [i for i, r in enumerate(rows) if r["parent_true"] == routed_parent and r[f"c_{child_labels[0]}"] != ""]
    if cd_rows:
        c_true = np.array([child_labels.index(rows[i]["child_true"]) for i in cd_rows], dtype=int)
        c_probs = np.array([[float(rows[i][f"c_{l}"]) for l in child_labels] for i in cd_rows])
        levels["child"] = (c_true, c_probs, child_labels)
    for level, (true, probs, labels) in levels.items():
        s, per_class, auc = _level_block(true, probs, labels)
        report["per_class"][level] = per_class
        report["macro"][level] = s["macro"]
        report["micro"][level] = s["micro"]
        report["mcc"][level] = s["mcc"]
        report["auc"][level] = auc
        report["accuracy"][level] = s["accuracy"]
        for c, l in enumerate(labels):
            pos = true == c
            if 0 < pos.sum() < len(pos):
                rocs[f"roc_{level}_{l}.csv"] = M.roc_csv(M.roc_curve(probs[:, c], pos))

    joint_true = [r["parent_true"] if r["child_true"] in ("-", "") else f"{r['parent_true']}/{r['child_true']}"
                  for r in rows]
    joint_pred = [r["parent_pred"] if r["child_pred"] in ("-", "") else f"{r['parent_pred']}/{r['child_pred']}"
                  for r in rows]
    report["hierarchical"] = {
        "joint_accuracy": float(np.mean([a == b for a, b in zip(joint_true, joint_pred)])),
        "parent_accuracy": report["accuracy"]["parent"],
    }

    slides = defaultdict(list)
    for i, r in enumerate(rows):
        slides[r["slide_id"]].append(i)
    slide_rows = []
    s_true, s_pred, c_s_true, c_s_pred = [], [], [], []
    for sid in sorted(slides):
        idx = slides[sid]
        ps = aggregate_slide(p_probs[idx], sid)
        first = rows[idx[0]]
        routed = [i for i in idx if rows[i].get("routed") == "1" and rows[i][f"c_{child_labels[0]}"] != ""]
        child_label, child_sum = "-", None
        if routed:
            cs = aggregate_slide([[float(rows[i][f"c_{l}"]) for l in child_labels] for i in routed], sid)
            child_label, child_sum = child_labels[cs.label], cs.sums.tolist()
        slide_rows.append({"slide_id": sid, "n": ps.n, "parent_true": first["parent_true"],
                           "parent_label": parent_labels[ps.label], "parent_sum": ps.sums.tolist(),
                           "child_true": first["child_true"] or "-", "child_label": child_label,
                           "child_sum": child_sum})
        s_true.append(parent_labels.index(first["parent_true"]))
        s_pred.append(ps.label)
        if first["parent_true"] == routed_parent and first["child_true"] not in ("", "-"):
            c_s_true.append(child_labels.index(first["child_true"]))
            # an unrouted CD slide has no child label and counts as an error
            c_s_pred.append(child_labels.index(child_label) if child_label != "-" else -1)
    report["slide_level"] = slide_rows
    summary = {"parent": _slide_scores(s_true, s_pred, parent_labels)}
    if c_s_true:
        k = len(child_labels)
        summary["child"] = _slide_scores(c_s_true, [p if p >= 0 else k for p in c_s_pred], child_labels)
        summary["child"]["unrouted_slides"] = sum(p < 0 for p in c_s_pred)
    report["slide_summary"] = summary
    return report, rocs


def table_rows(report) -> list:
    """Per-class precision/recall/F1 rows for patch-level (NWS) and slide-level (WS) scoring."""
    out = []
    for level in ("parent", "child"):
        if level not in report["per_class"]:
            continue
        for mode, block in (("NWS", report["per_class"][level]),
                            ("WS", report["slide_summary"].get(level, {}).get("per_class", {}))):
            for label, c in block.items():
                out.append([level, label, mode] + ["" if c[k] is None else f"{c[k]:.4f}"
                                                   for k in ("precision", "recall", "f1")])
    return out


def stage_evaluate(cfg: RunConfig) -> None:
    rows = _read_csv(_need(_path(cfg, "predictions", "patches.csv"), "predict"))
    report, rocs = evaluate_predictions(rows, PARENT_LABELS, CHILD_LABELS, ROUTED_PARENT)
    _write_json(_path(cfg, "reports", "report.json"), report)
    for name, text in rocs.items():
        _path(cfg, "reports", name).write_text(text, encoding="utf-8")
    _write_csv(_path(cfg, "reports", "table.csv"), ["level", "class", "mode", "precision", "recall", "f1"],
               table_rows(report))


STAGE_FUNCS = {"synth": stage_synth, "patch": stage_patch, "filter": stage_filter, "balance": stage_balance,
               "train-parent": stage_train_parent, "train-child": stage_train_child,
               "train-rmdl": stage_train_rmdl, "predict": stage_predict, "evaluate": stage_evaluate}
EPOCH_FIELD = {"filter": "filter_epochs", "train-parent": "parent_epochs", "train-child": "child_epochs",
               "train-rmdl": "rmdl_epochs"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hmic", description="Hierarchical histology classification pipeline.")
    ap.add_argument("stage", choices=STAGES + ("all",), help="stage to run ('all' runs the full chain)")
    ap.add_argument("--config", help="JSON run configuration; flags override it")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="working directory")
    ap.add_argument("--patch-size", type=int)
    ap.add_argument("--overlap", type=float)
    ap.add_argument("--balance-levels", help="comma-separated balancing percentages")
    ap.add_argument("--members", type=int)
    ap.add_argument("--epochs", type=int, help="training epochs for the stage being run")
    ap.add_argument("--hierarchy", action=argparse.BooleanOptionalAction, default=None,
                    help="route CD patches to the child model at prediction time")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    overrides = {"seed": args.seed, "out": args.out, "patch_size": args.patch_size, "overlap": args.overlap,
                 "members": args.members, "hierarchy": args.hierarchy}
    if args.balance_levels is not None:
        try:
            overrides["balance_levels"] = [float(v) for v in args.balance_levels.split(",") if v.strip()]
        except ValueError:
            raise ConfigError("--balance-levels must be comma-separated numbers") from None
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.epochs is not None:
        stages = EPOCH_FIELD if args.stage == "all" else {args.stage: EPOCH_FIELD.get(args.stage)}
        for f in stages.values():
            if f:
                data[f] = args.epochs
    return RunConfig.from_dict(data)


def run_stages(cfg: RunConfig, stages) -> None:
    for name in stages:
        log.info("stage %s", name)
        STAGE_FUNCS[name](cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.stage == "all":
            stages = [s for s in STAGES if s != "train-rmdl" and (cfg.hierarchy or s != "train-child")]
        else:
            stages = [args.stage]
        run_stages(cfg, stages)
    except (StageError, ConfigError, hio.FormatError, hio.ManifestError) as e:
        print(f"hmic: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
