"""Staged, cached experiment runs driven by one YAML config.

A run writes a *bundle* directory: one sub-directory per stage, each with a
``stage.json`` recording the stage fingerprint and its artifacts, plus a
top-level ``index.json`` that lists every file in the bundle.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import shutil
import string
from dataclasses import dataclass, field, fields
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml

from istr import __version__
from istr.corpus import (STR_METHODS, Step, apply_external_str, import_external, load_corpus, save_corpus,
                         synthesize_corpus)
from istr.metrics import union_mask
from istr.plotting import heatmap_overlay, learning_curves, region_overlay
from istr.presence import TrainConfig, evaluate_presence, explain, load_presence_model, train_presence
from istr.protocols import (DEFAULT_TRAIN_FRACTION, POSITIVE, DatasetManifest, build_protocol, load_manifest,
                            save_manifest, split_manifest, verify_manifest)
from istr.recovery import (DEFAULT_TRAIN_FRACTION as RECOVERY_TRAIN_FRACTION, RecoveryTrainConfig,
                           SubprocessReader, build_recovery_set, evaluate_recovery, load_recognizer,
                           load_recovery_set, save_recovery_set, train_recovery)
from istr.region import RegionTrainConfig, evaluate_region, load_region_model, train_region
from istr.report import MetricsReport, emit_report
from istr.training import CheckpointStore, TrainLog, select_checkpoint

log = logging.getLogger(__name__)

CACHE_ENV = "ISTR_CACHE"
DEFAULT_OUT = "istr-out"

STAGES = ("corpus", "datasets", "presence_train", "presence_eval", "explain", "region_train", "region_eval",
          "recovery_build", "recovery_train", "recovery_eval", "report")
DEPENDS = {
    "corpus": (), "datasets": ("corpus",),
    "presence_train": ("datasets",), "presence_eval": ("presence_train",), "explain": ("presence_train",),
    "region_train": ("datasets",), "region_eval": ("region_train",),
    "recovery_build": ("datasets",), "recovery_train": ("recovery_build",), "recovery_eval": ("recovery_train",),
    "report": (),
}
GROUPS = {
    "all": STAGES,
    "level1": ("presence_train", "presence_eval", "explain"),
    "level2": ("region_train", "region_eval"),
    "level3": ("recovery_build", "recovery_train", "recovery_eval"),
}
# config sections that feed each stage's cache key (besides the global seed)
_SECTIONS = {
    "corpus": ("corpus",), "datasets": ("removal", "datasets"),
    "presence_train": ("presence", "deterministic"), "presence_eval": ("presence",), "explain": ("explain",),
    "region_train": ("region", "deterministic"), "region_eval": ("region",),
    "recovery_build": ("recovery",), "recovery_train": ("recovery", "deterministic"), "recovery_eval": (),
    "report": ("report",),
}
# keys that do not influence a training or build stage's outputs
_EVAL_ONLY = {
    ("presence_train", "presence"): ("threshold",),
    ("region_train", "region"): ("k",),
    ("recovery_build", "recovery"): tuple(f.name for f in fields(RecoveryTrainConfig) if f.name != "alphabet"),
    ("recovery_train", "recovery"): ("padding", "target_height", "train_fraction", "reader_command"),
}

DEFAULTS: dict = {
    "seed": 0,
    "deterministic": True,
    "workers": 1,
    "out": None,
    "stages": ["all"],
    "corpus": {
        "source": "synthetic",  # or "external"
        "n_train": 2749, "n_test": 813, "n_text_free": None,
        "canvas": [512, 512], "words_per_image": [1, 4], "word_length": [3, 6],
        "alphabet": string.ascii_uppercase, "noise_sigma": 6.0,
        "root": None, "layout": "scut_enstext_pairs",
    },
    "removal": {"method": "mean_fill", "mask_dilation": 2, "command": None, "timeout": 600},
    "datasets": {"protocols": [1, 2, 3], "train_fraction": DEFAULT_TRAIN_FRACTION},
    "presence": {**{f.name: f.default for f in fields(TrainConfig) if f.name not in ("seed", "deterministic")}, "threshold": 0.5},
    "explain": {"protocol": None, "n_images": 50, "n_figures": 8},
    "region": {**{f.name: f.default for f in fields(RegionTrainConfig) if f.name not in ("seed", "deterministic")},
               "protocol": None, "k": 3},
    "recovery": {**{f.name: f.default for f in fields(RecoveryTrainConfig) if f.name not in ("seed", "deterministic")},
                 "padding": 2, "target_height": 32, "train_fraction": RECOVERY_TRAIN_FRACTION,
                 "reader_command": None},
    "report": {"format": "markdown"},
}


class ConfigError(ValueError):
    """Every violation found while validating a config."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid config:\n" + "\n".join(f"  - {v}" for v in violations))


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")


def _merge(base: dict, update: dict, path: str, unknown: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            unknown.append(f"unknown key {path}{key}")
        elif isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}{key}.", unknown)
        else:
            out[key] = value
    return out


def _set_path(data: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = data
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_pair(errors, name, v, minimum=1):
    if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(_is_int(x) and x >= minimum for x in v)
            and v[0] <= v[1]):
        errors.append(f"{name} must be [low, high] integers >= {minimum} with low <= high, got {v!r}")


def _check_training(errors, name, sec):
    if not _is_num(sec["learning_rate"]) or not sec["learning_rate"] > 0:
        errors.append(f"{name}.learning_rate must be > 0, got {sec['learning_rate']!r}")
    for key in ("batch_size", "epochs"):
        if not _is_int(sec[key]) or sec[key] < 1:
            errors.append(f"{name}.{key} must be an integer >= 1, got {sec[key]!r}")
    if sec["optimizer"] not in ("adam", "adamw"):
        errors.append(f"{name}.optimizer must be adam or adamw, got {sec['optimizer']!r}")
    if sec["keep"] not in ("best_last", "all"):
        errors.append(f"{name}.keep must be best_last or all, got {sec['keep']!r}")


def validate(data: dict) -> list[str]:
    """Return every problem with a merged config (empty when valid)."""
    errors: list[str] = []
    if not _is_int(data["seed"]) or data["seed"] < 0:
        errors.append(f"seed must be a non-negative integer, got {data['seed']!r}")
    if not _is_int(data["workers"]) or data["workers"] < 1:
        errors.append(f"workers must be an integer >= 1, got {data['workers']!r}")
    stages = data["stages"] if isinstance(data["stages"], list) else [data["stages"]]
    for s in stages:
        if s not in STAGES and s not in GROUPS:
            errors.append(f"unknown stage {s!r}")

    c = data["corpus"]
    if c["source"] == "synthetic":
        for key in ("n_train", "n_test"):
            if not _is_int(c[key]) or c[key] < 1:
                errors.append(f"corpus.{key} must be an integer >= 1, got {c[key]!r}")
        if c["n_text_free"] is not None and (not _is_int(c["n_text_free"]) or c["n_text_free"] < 0):
            errors.append(f"corpus.n_text_free must be a non-negative integer, got {c['n_text_free']!r}")
        _check_pair(errors, "corpus.words_per_image", c["words_per_image"])
        _check_pair(errors, "corpus.word_length", c["word_length"])
        if not isinstance(c["alphabet"], str) or not c["alphabet"]:
            errors.append("corpus.alphabet must be a non-empty string")
        if not _is_num(c["noise_sigma"]) or c["noise_sigma"] < 0:
            errors.append(f"corpus.noise_sigma must be >= 0, got {c['noise_sigma']!r}")
    elif c["source"] == "external":
        if not c["root"] or not Path(c["root"]).is_dir():
            errors.append(f"corpus.root {c['root']!r} is not a directory")
    else:
        errors.append(f"corpus.source must be synthetic or external, got {c['source']!r}")
    if c["canvas"] is not None:
        _check_pair(errors, "corpus.canvas", c["canvas"], minimum=16)

    r = data["removal"]
    if r["method"] == "external":
        if not r["command"]:
            errors.append("removal.command is required when removal.method is external")
    elif r["method"] not in STR_METHODS:
        errors.append(f"removal.method must be one of {STR_METHODS + ('external',)}, got {r['method']!r}")
    if not _is_int(r["mask_dilation"]) or r["mask_dilation"] < 0:
        errors.append(f"removal.mask_dilation must be a non-negative integer, got {r['mask_dilation']!r}")

    d = data["datasets"]
    protocols = d["protocols"] if isinstance(d["protocols"], list) else [d["protocols"]]
    if not protocols or any(p not in (1, 2, 3) for p in protocols) or len(set(protocols)) != len(protocols):
        errors.append(f"datasets.protocols must be distinct values from 1, 2, 3, got {d['protocols']!r}")
    for name, frac in (("datasets.train_fraction", d["train_fraction"]),
                       ("recovery.train_fraction", data["recovery"]["train_fraction"])):
        if not _is_num(frac) or not 0 < frac < 1:
            errors.append(f"{name} must be in (0, 1), got {frac!r}")

    _check_training(errors, "presence", data["presence"])
    if data["presence"]["backbone"] not in ("small_resnet", "resnet50"):
        errors.append(f"presence.backbone must be small_resnet or resnet50, got {data['presence']['backbone']!r}")
    if not _is_num(data["presence"]["threshold"]) or not 0 <= data["presence"]["threshold"] <= 1:
        errors.append(f"presence.threshold must be in [0, 1], got {data['presence']['threshold']!r}")

    _check_training(errors, "region", data["region"])
    if not _is_num(data["region"]["mask_threshold"]) or not 0 < data["region"]["mask_threshold"] < 1:
        errors.append(f"region.mask_threshold must be in (0, 1), got {data['region']['mask_threshold']!r}")
    if not _is_int(data["region"]["min_area"]) or data["region"]["min_area"] < 0:
        errors.append(f"region.min_area must be a non-negative integer, got {data['region']['min_area']!r}")

    rc = data["recovery"]
    _check_training(errors, "recovery", rc)
    if not isinstance(rc["alphabet"], str) or not rc["alphabet"] or len(set(rc["alphabet"])) != len(rc["alphabet"]):
        errors.append("recovery.alphabet must be a non-empty string without repeated characters")
    for key in ("padding", "max_len"):
        if not _is_int(rc[key]) or rc[key] < (0 if key == "padding" else 1):
            errors.append(f"recovery.{key} has invalid value {rc[key]!r}")

    for name, key in (("explain", "protocol"), ("region", "protocol")):
        p = data[name][key]
        if p is not None and p not in protocols:
            errors.append(f"{name}.{key} {p!r} is not among datasets.protocols")
    if data["report"]["format"] not in ("markdown", "structured"):
        errors.append(f"report.format must be markdown or structured, got {data['report']['format']!r}")
    return errors


def _fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PipelineConfig:
    data: dict
    source: Path | None = None

    @classmethod
    def from_dict(cls, raw: dict | None = None, overrides: dict | None = None,
                  source: Path | None = None) -> "PipelineConfig":
        unknown: list[str] = []
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError([f"config must be a mapping, got {type(raw).__name__}"])
        data = _merge(DEFAULTS, raw, "", unknown)
        for dotted, value in (overrides or {}).items():
            if dotted.split(".")[0] not in DEFAULTS:
                unknown.append(f"unknown key {dotted}")
                continue
            _set_path(data, dotted, value)
        errors = unknown + validate(data)
        if errors:
            raise ConfigError(errors)
        return cls(data, source)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file {path} does not exist"])
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError([f"cannot parse {path}: {e}"]) from e
        return cls.from_dict(raw, overrides, path)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out"] or os.environ.get(CACHE_ENV) or DEFAULT_OUT)

    @property
    def fingerprint(self) -> str:
        """Hash of everything that affects results (not output location, stage list or workers)."""
        return _fingerprint({k: v for k, v in self.data.items() if k not in ("out", "stages", "workers")})

    def requested_stages(self) -> list[str]:
        stages = self.data["stages"] if isinstance(self.data["stages"], list) else [self.data["stages"]]
        wanted: set[str] = set()
        for s in stages:
            wanted.update(GROUPS.get(s, (s,)))
        return [s for s in STAGES if s in wanted]

    def protocols(self) -> list[int]:
        p = self.data["datasets"]["protocols"]
        return list(p) if isinstance(p, list) else [p]

    def presence_config(self) -> TrainConfig:
        sec = {k: v for k, v in self["presence"].items() if k != "threshold"}
        return TrainConfig(**sec, seed=self["seed"], deterministic=self["deterministic"])

    def region_config(self) -> RegionTrainConfig:
        sec = {k: v for k, v in self["region"].items() if k not in ("protocol", "k")}
        return RegionTrainConfig(**sec, seed=self["seed"], deterministic=self["deterministic"])

    def recovery_config(self) -> RecoveryTrainConfig:
        skip = ("padding", "target_height", "train_fraction", "reader_command")
        sec = {k: v for k, v in self["recovery"].items() if k not in skip}
        return RecoveryTrainConfig(**sec, seed=self["seed"], deterministic=self["deterministic"])

    def stage_key(self, stage: str) -> dict:
        key = {"stage": stage, "seed": self["seed"], "version": __version__}
        for section in _SECTIONS[stage]:
            value = self.data[section]
            if isinstance(value, dict):
                skip = _EVAL_ONLY.get((stage, section), ())
                value = {k: v for k, v in value.items() if k not in skip}
            key[section] = value
        return key

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)


@dataclass
class StageOutcome:
    stage: str
    fingerprint: str
    cached: bool
    artifacts: list[str] = field(default_factory=list)
    reports: list[str] = field(default_factory=list)


class Bundle:
    """Output directory of a run; loads upstream artifacts lazily and memoizes them."""

    def __init__(self, root: Path, config: PipelineConfig):
        self.root = Path(root)
        self.config = config
        self._memo: dict = {}

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def stage_info(self, stage: str) -> dict | None:
        path = self.stage_dir(stage) / "stage.json"
        return json.loads(path.read_text()) if path.exists() else None

    def rel(self, path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    # --- upstream loaders ------------------------------------------------------------
    def corpus(self):
        if "corpus" not in self._memo:
            self._memo["corpus"] = load_corpus(self.stage_dir("corpus") / "records")
        return self._memo["corpus"]

    def manifest(self, protocol: int) -> DatasetManifest:
        key = ("manifest", protocol)
        if key not in self._memo:
            d = self.stage_dir("datasets") / f"p{protocol}"
            records = {r.id: r for r in load_corpus(d / "records")}
            self._memo[key] = load_manifest(d / "manifest.tsv", records)
        return self._memo[key]

    def presence_model(self, protocol: int, which: str = "best"):
        d = self.stage_dir("presence_train") / f"p{protocol}"
        sel = json.loads((d / "selection.json").read_text())
        return load_presence_model(CheckpointStore(d / "checkpoints").get(sel[f"{which}_id"]))

    def data_protocol(self, section: str) -> int:
        return self.config[section]["protocol"] or self.config.protocols()[0]


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _save_log(d: Path, log_: TrainLog, best_id: str, last_id: str, title: str) -> None:
    _write_json(d / "train_log.json", log_.to_dict())
    _write_json(d / "selection.json", {"best_id": best_id, "last_id": last_id})
    learning_curves(log_, d / "learning_curves.png", title)


# --- stages ----------------------------------------------------------------------------

def stage_corpus(b: Bundle, d: Path) -> list[Path]:
    c = b.config["corpus"]
    canvas = tuple(c["canvas"]) if c["canvas"] else None
    tally: dict = {}
    if c["source"] == "synthetic":
        records = synthesize_corpus(c["n_train"], c["n_test"], n_text_free=c["n_text_free"], canvas=canvas,
                                    seed=b.config["seed"], words_per_image=tuple(c["words_per_image"]),
                                    alphabet=c["alphabet"], word_length=tuple(c["word_length"]),
                                    noise_sigma=c["noise_sigma"])
    else:
        root = Path(c["root"])
        parts = [(root / "train", False), (root / "test", True)] if (root / "train").is_dir() else [(root, False)]
        records = []
        for path, pool in parts:
            records += import_external(path, c["layout"], canvas, tally, test_pool=pool)
        if not records:
            raise ValueError(f"no images found under {root}")
    save_corpus(records, d / "records")
    with_text = [r for r in records if r.regions]
    _write_json(d / "summary.json", {
        "with_text": {"train_pool": sum(not r.test_pool for r in with_text),
                      "test_pool": sum(r.test_pool for r in with_text)},
        "text_free": {"train_pool": sum(not r.test_pool and not r.regions for r in records),
                      "test_pool": sum(r.test_pool and not r.regions for r in records)},
        "regions": sum(len(r.regions) for r in with_text), "skipped_annotation_lines": tally,
    })
    b._memo["corpus"] = load_corpus(d / "records")
    return []


def stage_datasets(b: Bundle, d: Path) -> list[Path]:
    r, ds = b.config["removal"], b.config["datasets"]
    remover = None
    if r["method"] == "external":
        remover = partial(apply_external_str, command=r["command"], mask_dilation=r["mask_dilation"],
                          timeout=r["timeout"])
    summary = {}
    for p in b.config.protocols():
        m = build_protocol(b.corpus(), p, r["method"], b.config["seed"], r["mask_dilation"], remover=remover)
        m = split_manifest(m, ds["train_fraction"], b.config["seed"])
        violations = verify_manifest(m)
        if violations:
            raise ValueError(f"protocol {p} manifest violates invariants: {violations[:5]}")
        save_corpus(list(m.records.values()), d / f"p{p}" / "records")
        save_manifest(m, d / f"p{p}" / "manifest.tsv")
        summary[f"p{p}"] = {f"{lab}/{split}": n for (lab, split), n in sorted(m.counts.items())}
    _write_json(d / "summary.json", summary)
    return []


def stage_presence_train(b: Bundle, d: Path) -> list[Path]:
    cfg = b.config.presence_config()
    for p in b.config.protocols():
        sub = d / f"p{p}"
        log_, store = train_presence(b.manifest(p), cfg, CheckpointStore(sub / "checkpoints", cfg.keep))
        _save_log(sub, log_, select_checkpoint(log_), log_.records[-1].checkpoint_id, f"presence, protocol {p}")
    return []


def stage_presence_eval(b: Bundle, d: Path) -> list[Path]:
    reports = []
    for p in b.config.protocols():
        report = evaluate_presence(b.manifest(p), b.presence_model(p), "test", b.config["presence"]["threshold"],
                                   b.config.fingerprint)
        reports.append(report.save(d / f"level1_p{p}.json"))
    return reports


def stage_explain(b: Bundle, d: Path) -> list[Path]:
    ex = b.config["explain"]
    p = b.data_protocol("explain")
    m, model = b.manifest(p), b.presence_model(p)
    positives = [m.record(e) for e in m.split("test") if e.label == POSITIVE][:ex["n_images"]]
    items = []
    for i, rec in enumerate(positives):
        heat = explain(rec.pixels, model)
        inside = union_mask(rec.polygons(), rec.canvas) if rec.regions else np.zeros(rec.canvas, bool)
        mean_in = float(heat[inside].mean()) if inside.any() else float("nan")
        mean_out = float(heat[~inside].mean()) if (~inside).any() else float("nan")
        items.append({"image_id": rec.id, "mean_inside": mean_in, "mean_outside": mean_out,
                      "inside_higher": bool(mean_in > mean_out)})
        if i < ex["n_figures"]:
            heatmap_overlay(rec.pixels, heat, d / "figures" / f"{rec.id}.png", rec.polygons())
    rate = 100.0 * float(np.mean([it["inside_higher"] for it in items])) if items else float("nan")
    report = MetricsReport("explain", {"localization_rate": rate, "n": len(items)}, items, b.config.fingerprint,
                           extra={"protocol": p, "epoch": model.epoch})
    return [report.save(d / "explain.json")]


def _positives(b: Bundle, protocol: int) -> dict[str, list]:
    """Removed-text images per split; identical across protocols for a fixed seed."""
    m = b.manifest(protocol)
    return {split: [m.record(e) for e in m.split(split) if e.label == POSITIVE] for split in ("train", "val", "test")}


def stage_region_train(b: Bundle, d: Path) -> list[Path]:
    cfg = b.config.region_config()
    pos = _positives(b, b.data_protocol("region"))
    log_, store = train_region(pos["train"], pos["val"], cfg, CheckpointStore(d / "checkpoints", cfg.keep))
    _save_log(d, log_, select_checkpoint(log_), log_.records[-1].checkpoint_id, "region detector")
    return []


def stage_region_eval(b: Bundle, d: Path) -> list[Path]:
    src = b.stage_dir("region_train")
    sel = json.loads((src / "selection.json").read_text())
    model = load_region_model(CheckpointStore(src / "checkpoints").get(sel["best_id"]))
    test = _positives(b, b.data_protocol("region"))["test"]
    report, results = evaluate_region(test, model, k=b.config["region"]["k"], fingerprint=b.config.fingerprint,
                                      predictions_path=d / "predictions.txt")
    by_id = {r.id: r for r in test}
    iou = {it["image_id"]: it["iou"] for it in report.items}
    for tag in ("best", "worst"):
        for image_id in report.extra[tag]:
            det = next(r for r in results if r.image_id == image_id)
            rec = by_id[image_id]
            region_overlay(rec.pixels, rec.polygons(), det.polygons, d / "overlays" / f"{tag}_{image_id}.png",
                           f"{image_id}  IoU {iou[image_id]:.3f}")
    return [report.save(d / "level2.json")]


def stage_recovery_build(b: Bundle, d: Path) -> list[Path]:
    rc = b.config["recovery"]
    with_text = [r for r in b.corpus() if r.steps == [Step.RENDERED_WITH_TEXT]]
    str_ed = [rec for split in _positives(b, b.config.protocols()[0]).values() for rec in split]
    reader = SubprocessReader(rc["reader_command"]) if rc["reader_command"] else None
    tally: dict = {}
    instances = build_recovery_set(with_text, str_ed, reader, rc["alphabet"], padding=rc["padding"],
                                   target_height=rc["target_height"], train_fraction=rc["train_fraction"],
                                   seed=b.config["seed"], tally=tally)
    save_recovery_set(instances, d / "set")
    counts = {s: sum(i.split == s for i in instances) for s in ("train", "val", "test")}
    _write_json(d / "summary.json", {"instances": counts, "excluded": tally})
    return []


def stage_recovery_train(b: Bundle, d: Path) -> list[Path]:
    cfg = b.config.recovery_config()
    instances = load_recovery_set(b.stage_dir("recovery_build") / "set")
    res = train_recovery(instances, cfg, CheckpointStore(d / "checkpoints", cfg.keep))
    _save_log(d, res.log, res.best_id, res.last_id, "recovery (Text-Acc)")
    _write_json(d / "char_accuracy.json", res.char_accuracy)
    return []


def stage_recovery_eval(b: Bundle, d: Path) -> list[Path]:
    src = b.stage_dir("recovery_train")
    sel = json.loads((src / "selection.json").read_text())
    store = CheckpointStore(src / "checkpoints")
    instances = load_recovery_set(b.stage_dir("recovery_build") / "set")
    report = evaluate_recovery(instances, load_recognizer(store.get(sel["best_id"])),
                               load_recognizer(store.get(sel["last_id"])), b.config.fingerprint,
                               str_method=b.config["removal"]["method"])
    report.extra.update(sel)
    return [report.save(d / "level3.json")]


def stage_report(b: Bundle, d: Path) -> list[Path]:
    paths = []
    for stage in STAGES:
        info = b.stage_info(stage)
        if stage != "report" and info and info.get("status") == "ok":
            paths += info.get("reports", [])
    if not paths:
        raise ValueError("no stage reports in the bundle to summarize")
    reports = [MetricsReport.load(b.root / p) for p in paths]
    emit_report(reports, d, b.config["report"]["format"])
    return []


STAGE_FUNCS: dict[str, Callable[[Bundle, Path], list[Path]]] = {
    "corpus": stage_corpus, "datasets": stage_datasets,
    "presence_train": stage_presence_train, "presence_eval": stage_presence_eval, "explain": stage_explain,
    "region_train": stage_region_train, "region_eval": stage_region_eval,
    "recovery_build": stage_recovery_build, "recovery_train": stage_recovery_train,
    "recovery_eval": stage_recovery_eval, "report": stage_report,
}


def _with_dependencies(stages: list[str]) -> list[str]:
    needed = set(stages)
    frontier = list(stages)
    while frontier:
        for dep in DEPENDS[frontier.pop()]:
            if dep not in needed:
                needed.add(dep)
                frontier.append(dep)
    return [s for s in STAGES if s in needed]


def _stage_fingerprint(bundle: Bundle, stage: str, fps: dict[str, str]) -> str:
    key = bundle.config.stage_key(stage)
    if stage == "report":
        upstream = {s: (bundle.stage_info(s) or {}).get("fingerprint") for s in STAGES[:-1]}
        key["upstream"] = {s: fp for s, fp in upstream.items() if fp}
    else:
        key["upstream"] = {dep: fps[dep] for dep in DEPENDS[stage]}
    return _fingerprint(key)


def _is_fresh(bundle: Bundle, stage: str, fp: str) -> bool:
    info = bundle.stage_info(stage)
    return bool(info and info.get("status") == "ok" and info.get("fingerprint") == fp
                and all((bundle.root / a).exists() for a in info.get("artifacts", [])))


def _list_files(d: Path, root: Path) -> list[str]:
    return sorted(p.relative_to(root).as_posix() for p in d.rglob("*") if p.is_file() and p.name != "stage.json")


def run_stage(bundle: Bundle, stage: str, fp: str, force: bool = False) -> StageOutcome:
    if not force and _is_fresh(bundle, stage, fp):
        log.info("stage %s: up to date (%s)", stage, fp)
        info = bundle.stage_info(stage)
        return StageOutcome(stage, fp, True, info["artifacts"], info.get("reports", []))
    d = bundle.stage_dir(stage)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    (d / "config.yaml").write_text(bundle.config.dump())
    log.info("stage %s: running (%s)", stage, fp)
    try:
        reports = STAGE_FUNCS[stage](bundle, d)
    except Exception as e:
        _write_json(d / "stage.json", {"stage": stage, "fingerprint": fp, "status": "failed",
                                       "error": f"{type(e).__name__}: {e}", "artifacts": _list_files(d, bundle.root)})
        raise StageError(stage, e) from e
    outcome = StageOutcome(stage, fp, False, _list_files(d, bundle.root), sorted(bundle.rel(p) for p in reports))
    _write_json(d / "stage.json", {"stage": stage, "fingerprint": fp, "status": "ok",
                                   "artifacts": outcome.artifacts, "reports": outcome.reports,
                                   "config_fingerprint": bundle.config.fingerprint, "version": __version__})
    return outcome


def write_index(bundle: Bundle) -> Path:
    """Top-level index listing every stage directory's files."""
    stages = {}
    for stage in STAGES:
        info = bundle.stage_info(stage)
        if info:
            stages[stage] = {k: info.get(k) for k in ("fingerprint", "status", "artifacts", "reports")}
            stages[stage]["artifacts"] = [f"{stage}/stage.json"] + (info.get("artifacts") or [])
    return _write_json(bundle.root / "index.json", {
        "version": __version__, "config_fingerprint": bundle.config.fingerprint,
        "files": ["config.yaml"], "stages": stages,
    })


def orphans(root) -> list[str]:
    """Files under a bundle that its index does not reference."""
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    listed = {"index.json", *index["files"]}
    for info in index["stages"].values():
        listed.update(info["artifacts"])
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*")
                  if p.is_file() and p.relative_to(root).as_posix() not in listed)


def run_pipeline(config: PipelineConfig | str | os.PathLike, stages: list[str] | None = None,
                 force: bool = False) -> Path:
    """Run the requested stages (and any missing upstream ones); return the bundle path.

    Stages whose fingerprint matches the bundle's record are skipped. Raises
    ``StageError`` on the first failing stage.
    """
    if not isinstance(config, PipelineConfig):
        config = PipelineConfig.load(config)
    if stages is not None:
        config = PipelineConfig.from_dict({**config.data, "stages": list(stages)}, source=config.source)
    root = config.out_dir
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(config.dump())
    torch.set_num_threads(config["workers"])
    bundle = Bundle(root, config)
    requested = config.requested_stages()
    fps: dict[str, str] = {}
    try:
        for stage in _with_dependencies(requested):
            fps[stage] = _stage_fingerprint(bundle, stage, fps)
            run_stage(bundle, stage, fps[stage], force=force and stage in requested)
    finally:
        write_index(bundle)
    return root
