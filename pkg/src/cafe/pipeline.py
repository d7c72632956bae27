"""End-to-end workbench: every step reads its inputs from and writes its outputs to one directory.

Layout under ``cfg.out``::

    config.json
    data/manifest.json, data/scenes/*.json
    features/objects.fmx, features/unions.fmx, features/boundaries.fmx
    grouping/confusion.csv, grouping/grouping.json, grouping/sampling_plan.json
    model/checkpoint.cafe, model/train_log.jsonl
    eval/report.json, eval/report_per_predicate.csv
    provenance.json
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .evaluation import EvalReport, emit_report, evaluate, load_report
from .experiment import (
    Prepared,
    Setting,
    baseline_setting,
    bootstrap_confusion,
    curriculum_layout,
    image_results,
    prepare,
    run_setting,
    tier_mean_recall,
    train_config,
)
from .features import DESCRIPTOR_DIM, GEOM_DIM, VISUAL_DIM, SceneFeatures, extract_scene_features
from .formats import FeatureMatrix, read_checkpoint, read_matrix, write_checkpoint
from .grouping import group_predicates, load_confusion_csv, load_grouping, save_confusion_csv, save_grouping
from .mask_ops import load_scene
from .model import FEATURE_KINDS, FusionConfig, StackSpec
from .sampling import build_plan, load_plan, save_plan
from .synthetic import GeneratorConfig, generate, write_dataset
from .trainer import train

STEPS = ("gen-data", "extract-features", "confusion", "group", "plan-sampling", "train", "eval", "report")
OBJECT_COLS = VISUAL_DIM + GEOM_DIM + DESCRIPTOR_DIM


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def setting_of(cfg: PipelineConfig) -> Setting:
    return Setting(
        features=tuple(cfg.features),
        fusion=cfg.fusion,
        key_set=cfg.key_set,
        grouping=cfg.grouping,
        sampling=cfg.sampling,
        lam=cfg.lam,
        transfer=cfg.transfer,
        alpha=cfg.alpha,
        mu=cfg.mu,
        epochs=cfg.epochs,
        bootstrap_epochs=cfg.bootstrap_epochs,
        lr=cfg.lr,
        seed=cfg.seed,
        stop_teacher_grad=cfg.stop_teacher_grad,
    )


# --- small I/O helpers -----------------------------------------------------------


def _atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _write_with(path: Path, writer) -> None:
    """Run ``writer(tmp_path)`` and move the result into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _require(stage: str, *paths: Path) -> None:
    for p in paths:
        if not p.exists():
            raise StageError(stage, f"missing input {p}; run the earlier steps first")


def sha256_of(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Workdir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    data = property(lambda self: self.root / "data")
    manifest = property(lambda self: self.root / "data" / "manifest.json")
    scenes = property(lambda self: self.root / "data" / "scenes")
    objects = property(lambda self: self.root / "features" / "objects.fmx")
    unions = property(lambda self: self.root / "features" / "unions.fmx")
    boundaries = property(lambda self: self.root / "features" / "boundaries.fmx")
    confusion = property(lambda self: self.root / "grouping" / "confusion.csv")
    grouping = property(lambda self: self.root / "grouping" / "grouping.json")
    plan = property(lambda self: self.root / "grouping" / "sampling_plan.json")
    checkpoint = property(lambda self: self.root / "model" / "checkpoint.cafe")
    train_log = property(lambda self: self.root / "model" / "train_log.jsonl")
    report = property(lambda self: self.root / "eval" / "report.json")
    provenance = property(lambda self: self.root / "provenance.json")

    def artifacts(self) -> list[Path]:
        skip = {self.provenance}
        return sorted(p for p in self.root.rglob("*") if p.is_file() and p not in skip and p.parent.name != "ablations")


# --- dataset and features --------------------------------------------------------


def load_dataset(wd: Workdir):
    """(manifest, train scenes, test scenes) from the data directory."""
    manifest = json.loads(wd.manifest.read_text())

    def read(ids):
        return [load_scene(wd.scenes / f"{sid}.json") for sid in ids]

    return manifest, read(manifest["train"]), read(manifest["test"])


def feature_matrices(features: list[SceneFeatures]) -> tuple[FeatureMatrix, FeatureMatrix, FeatureMatrix]:
    obj_ids, obj_rows, pair_ids, unions, bounds = [], [], [], [], []
    for sf in features:
        for i, oid in enumerate(sf.object_ids):
            obj_ids.append(f"{sf.scene_id}/{oid}")
            obj_rows.append(np.concatenate([sf.visual[i], sf.geom[i], sf.mask_desc[i]]))
        for r, (i, j) in enumerate(sf.pair_keys):
            pair_ids.append(f"{sf.scene_id}/{sf.object_ids[i]}/{sf.object_ids[j]}")
            unions.append(sf.union_visual[r])
            bounds.append(sf.boundary_desc[r])
    as_matrix = lambda rows, cols: np.array(rows).reshape(len(rows), cols)  # noqa: E731
    return (
        FeatureMatrix(obj_ids, as_matrix(obj_rows, OBJECT_COLS)),
        FeatureMatrix(pair_ids, as_matrix(unions, VISUAL_DIM)),
        FeatureMatrix(pair_ids, as_matrix(bounds, DESCRIPTOR_DIM)),
    )


def scene_features_from(scenes, objects: FeatureMatrix, unions: FeatureMatrix, bounds: FeatureMatrix) -> list[SceneFeatures]:
    """Rebuild per-scene feature records for ``scenes`` from the persisted matrices."""
    obj_row = {rid: r for r, rid in enumerate(objects.ids)}
    pair_row = {rid: r for r, rid in enumerate(unions.ids)}
    if unions.ids != bounds.ids:
        raise ValueError("union and boundary matrices disagree on row ids")
    out = []
    for scene in scenes:
        objs = sorted(scene.objects, key=lambda o: o.id)
        rows = [obj_row[f"{scene.scene_id}/{o.id}"] for o in objs]
        block = objects.values[rows].astype(np.float64)
        n = len(objs)
        keys = [(i, j) for i in range(n) for j in range(i + 1, n)]
        prow = [pair_row[f"{scene.scene_id}/{objs[i].id}/{objs[j].id}"] for i, j in keys]
        out.append(
            SceneFeatures(
                scene.scene_id,
                [o.id for o in objs],
                [o.label for o in objs],
                block[:, :VISUAL_DIM],
                block[:, VISUAL_DIM : VISUAL_DIM + GEOM_DIM],
                block[:, VISUAL_DIM + GEOM_DIM :],
                keys,
                unions.values[prow].astype(np.float64).reshape(len(keys), VISUAL_DIM),
                bounds.values[prow].astype(np.float64).reshape(len(keys), DESCRIPTOR_DIM),
            )
        )
    return out


def load_prepared(wd: Workdir) -> Prepared:
    manifest, train_scenes, test_scenes = load_dataset(wd)
    mats = read_matrix(wd.objects), read_matrix(wd.unions), read_matrix(wd.boundaries)
    tiers = {p["name"]: p["tier"] for p in manifest["predicates"]}
    return prepare(
        train_scenes,
        test_scenes,
        manifest["classes"],
        tiers,
        train_features=scene_features_from(train_scenes, *mats),
        test_features=scene_features_from(test_scenes, *mats),
    )


# --- steps -----------------------------------------------------------------------


def step_gen_data(cfg: PipelineConfig, wd: Workdir) -> None:
    gen = GeneratorConfig(num_scenes=cfg.num_scenes, zipf_exponent=cfg.zipf_exponent, seed=cfg.data_seed)
    ds = generate(gen)
    if wd.data.exists():
        shutil.rmtree(wd.data)
    staging = wd.root / "data.tmp"
    if staging.exists():
        shutil.rmtree(staging)
    write_dataset(ds, staging)
    os.replace(staging, wd.data)


def step_extract_features(cfg: PipelineConfig, wd: Workdir) -> None:
    _require("extract-features", wd.manifest)
    manifest, train_scenes, test_scenes = load_dataset(wd)
    features = [extract_scene_features(s) for s in train_scenes + test_scenes]
    for matrix, path in zip(feature_matrices(features), (wd.objects, wd.unions, wd.boundaries)):
        _atomic_write(path, matrix.to_bytes())


def _prepared_for(stage: str, wd: Workdir) -> Prepared:
    _require(stage, wd.manifest, wd.objects, wd.unions, wd.boundaries)
    return load_prepared(wd)


def step_confusion(cfg: PipelineConfig, wd: Workdir, prep: Prepared | None = None) -> None:
    prep = prep or _prepared_for("confusion", wd)
    confusion = bootstrap_confusion(prep, setting_of(cfg))
    _write_with(wd.confusion, lambda tmp: save_confusion_csv(confusion, tmp))


def step_group(cfg: PipelineConfig, wd: Workdir, prep: Prepared | None = None) -> None:
    prep = prep or _prepared_for("group", wd)
    confusion = None
    if cfg.grouping == "cognition":
        _require("group", wd.confusion)
        confusion = load_confusion_csv(wd.confusion)
    assignment = group_predicates(prep.stats(), confusion, cfg.mu, cfg.k, cfg.grouping, cfg.seed)
    _write_with(wd.grouping, lambda tmp: save_grouping(assignment, tmp))


def step_plan_sampling(cfg: PipelineConfig, wd: Workdir, prep: Prepared | None = None) -> None:
    prep = prep or _prepared_for("plan-sampling", wd)
    _require("plan-sampling", wd.grouping)
    _, spaces, group_of = curriculum_layout(prep.stats(), load_grouping(wd.grouping))
    plan = build_plan(prep.train_instances, spaces, group_of, cfg.lam, cfg.seed, cfg.sampling, cfg.t2, cfg.t3)
    _write_with(wd.plan, lambda tmp: save_plan(plan, tmp))


def step_train(cfg: PipelineConfig, wd: Workdir, prep: Prepared | None = None) -> None:
    prep = prep or _prepared_for("train", wd)
    _require("train", wd.grouping, wd.plan)
    order, spaces, _ = curriculum_layout(prep.stats(), load_grouping(wd.grouping))
    plan = load_plan(wd.plan)
    spec = StackSpec(FusionConfig(cfg.fusion, seed=cfg.seed, key_set=cfg.key_set), (1, 2, 3), tuple(len(s) for s in spaces))
    log = io.StringIO()
    ckpt = train(prep.train_bank, prep.class_table, prep.train_instances, plan, spec, order, train_config(setting_of(cfg)), log)
    ckpt.config["pipeline"] = cfg.echo()
    _write_with(wd.checkpoint, lambda tmp: write_checkpoint(ckpt, tmp))
    _atomic_write(wd.train_log, log.getvalue())


def step_eval(cfg: PipelineConfig, wd: Workdir, prep: Prepared | None = None, checkpoint: Path | None = None) -> EvalReport:
    prep = prep or _prepared_for("eval", wd)
    checkpoint = Path(checkpoint or wd.checkpoint)
    _require("eval", checkpoint)
    ckpt = read_checkpoint(checkpoint)
    images = image_results(ckpt, prep.test_bank, prep.class_table, prep.test_scenes)
    report = evaluate(images, prep.train_counts(), prep.train_triples(), prep.vocabulary)
    wd.report.parent.mkdir(parents=True, exist_ok=True)
    emit_report(report, wd.report)
    return report


def step_report(cfg: PipelineConfig, wd: Workdir) -> dict:
    """Hash every artifact and write the provenance record."""
    _require("report", wd.report)
    hashes = {p.relative_to(wd.root).as_posix(): sha256_of(p) for p in wd.artifacts()}
    report = load_report(wd.report)
    manifest = json.loads(wd.manifest.read_text())
    tiers = {p["name"]: p["tier"] for p in manifest["predicates"]}
    summary = {
        "mean": report.mean,
        "recall": {str(k): v for k, v in report.recall.items()},
        "mean_recall": {str(k): v for k, v in report.mean_recall.items()},
        "tier_mean_recall@100": {t: tier_mean_recall(report, tiers, t) for t in sorted(set(tiers.values()))},
    }
    record = {"config": cfg.echo(), "artifacts": hashes, "summary": summary}
    _atomic_write(wd.provenance, _json_text(record))
    return record


_STEP_FUNCS = {
    "gen-data": step_gen_data,
    "extract-features": step_extract_features,
    "confusion": step_confusion,
    "group": step_group,
    "plan-sampling": step_plan_sampling,
    "train": step_train,
    "eval": step_eval,
    "report": step_report,
}
_NEEDS_PREP = {"confusion", "group", "plan-sampling", "train", "eval"}


def run_step(name: str, cfg: PipelineConfig, prep: Prepared | None = None, **kwargs):
    if name not in _STEP_FUNCS:
        raise StageError(name, f"unknown step; expected one of {STEPS}")
    wd = Workdir(cfg.out)
    wd.root.mkdir(parents=True, exist_ok=True)
    _atomic_write(wd.root / "config.json", _json_text(cfg.echo()))
    try:
        if name in _NEEDS_PREP:
            return _STEP_FUNCS[name](cfg, wd, prep, **kwargs)
        return _STEP_FUNCS[name](cfg, wd, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # every failure surfaces as the stage that raised it
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def run_pipeline(cfg: PipelineConfig, start: str = "gen-data") -> Path:
    """Run ``start`` and every later step. Returns the artifacts directory."""
    if start not in STEPS:
        raise StageError(start, f"unknown step; expected one of {STEPS}")
    prep = None
    for name in STEPS[STEPS.index(start) :]:
        if name in _NEEDS_PREP and prep is None:
            try:
                prep = _prepared_for(name, Workdir(cfg.out))
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        run_step(name, cfg, prep)
    return Path(cfg.out)


# --- ablations -------------------------------------------------------------------

AXES = ("features", "fusion", "grouping", "sampling", "lambda", "transfer", "curriculum")
LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def feature_subsets() -> list[tuple[str, ...]]:
    """Non-empty subsets of the feature kinds, smallest first."""
    out = []
    for size in range(1, len(FEATURE_KINDS) + 1):
        for mask in range(1, 2 ** len(FEATURE_KINDS)):
            picked = tuple(f for b, f in enumerate(FEATURE_KINDS) if mask >> b & 1)
            if len(picked) == size:
                out.append(picked)
    return out


def axis_rows(axis: str, full: Setting) -> list[tuple[str, Setting]]:
    if axis == "features":
        return [("+".join(fs), replace(full, features=fs)) for fs in feature_subsets()]
    if axis == "fusion":
        return [(f, replace(full, fusion=f)) for f in ("concat", "joint", "divided", "entangled")]
    if axis == "grouping":
        return [(g, replace(full, grouping=g)) for g in ("random", "average", "cognition")]
    if axis == "sampling":
        return [(m, replace(full, sampling=m)) for m in ("none", "over", "median", "both")]
    if axis == "lambda":
        return [(f"{v:g}", replace(full, lam=v)) for v in LAMBDAS]
    if axis == "transfer":
        return [(t, replace(full, transfer=t)) for t in ("neighbor", "topdown", "bidir")]
    if axis == "curriculum":
        return [
            ("baseline (bbox, single stage)", baseline_setting(full)),
            ("single stage, all features", replace(full, curriculum=False, sampling="none", alpha=0.0)),
            ("curriculum, no transfer", replace(full, alpha=0.0)),
            ("full", full),
        ]
    raise StageError("ablate", f"unknown axis {axis!r}; expected one of {AXES}")


ABLATION_COLUMNS = ("setting", "R@20", "R@50", "R@100", "mR@20", "mR@50", "mR@100", "Mean", "zR@20", "zR@50", "zR@100", "boundary_mR@100")


def result_row(label: str, report: EvalReport, tiers: dict[str, str]) -> dict:
    row = {"setting": label}
    for k in (20, 50, 100):
        row[f"R@{k}"] = report.recall[k]
        row[f"mR@{k}"] = report.mean_recall[k]
        z = report.zero_shot_recall.get(k) if report.zero_shot_recall else None
        row[f"zR@{k}"] = "" if z is None else z
    row["Mean"] = report.mean
    row["boundary_mR@100"] = tier_mean_recall(report, tiers, "boundary")
    return row


class AblationRunner:
    """Runs settings on one prepared dataset, caching reports and bootstrap confusions."""

    def __init__(self, prep: Prepared, cache_path: Path | None = None):
        self.prep = prep
        self.cache_path = cache_path
        self.reports: dict[str, dict] = {}
        if cache_path is not None and cache_path.exists():
            self.reports = json.loads(cache_path.read_text())
        self._confusions = {}

    @staticmethod
    def key(setting: Setting) -> str:
        d = asdict(setting)
        d["features"] = list(setting.features)
        return json.dumps(d, sort_keys=True)

    def confusion_for(self, s: Setting):
        k = (s.fusion, s.key_set, s.lr, s.seed, s.bootstrap_epochs)
        if k not in self._confusions:
            self._confusions[k] = bootstrap_confusion(self.prep, s)
        return self._confusions[k]

    def report(self, setting: Setting) -> EvalReport:
        key = self.key(setting)
        if key not in self.reports:
            needs = setting.curriculum and setting.grouping == "cognition"
            result = run_setting(self.prep, setting, self.confusion_for(setting) if needs else None)
            self.reports[key] = result.report.to_dict()
            if self.cache_path is not None:
                _atomic_write(self.cache_path, _json_text(self.reports))
        return EvalReport.from_dict(self.reports[key])

    def table(self, axis: str, full: Setting) -> list[dict]:
        return [result_row(label, self.report(s), self.prep.tiers) for label, s in axis_rows(axis, full)]


def write_table(rows: list[dict], path: Path) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    _atomic_write(path, buf.getvalue())


def ablate(cfg: PipelineConfig, axes=AXES, prep: Prepared | None = None) -> dict[str, list[dict]]:
    """Emit ``ablations/<axis>.csv`` for each axis; data and features are produced if absent."""
    for axis in axes:
        if axis not in AXES:
            raise StageError("ablate", f"unknown axis {axis!r}; expected one of {AXES}")
    wd = Workdir(cfg.out)
    if prep is None:
        if not wd.manifest.exists():
            run_step("gen-data", cfg)
        if not wd.objects.exists():
            run_step("extract-features", cfg)
        prep = load_prepared(wd)
    runner = AblationRunner(prep, wd.root / "ablations" / "cache.json")
    full = setting_of(cfg)
    tables = {}
    try:
        for axis in axes:
            tables[axis] = runner.table(axis, full)
            write_table(tables[axis], wd.root / "ablations" / f"{axis}.csv")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("ablate", f"{type(exc).__name__}: {exc}") from exc
    return tables
