"""Experiment runner: simulator -> adapted block -> head -> alignment -> controller."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from functools import partial
from pathlib import Path

import numpy as np
import yaml

from .ctastats import ReferenceStats, read_container, write_container
from .estimator import ContinualAdapter
from .numerics import make_rng
from .scenarios import build_schedule, preset
from .simulator import (DomainTransform, SourceModel, evaluate_accuracy, generate_source_model,
                        head_probs, sample_batch, scene_stream)
from .stats import DEFAULT_REFERENCE_SAMPLES

log = logging.getLogger(__name__)

SUMMARY_HEADER = ["method", "seed", "segment", "accuracy", "backward_steps", "forward_steps",
                  "steps_per_sec"]
SWEEP_PARAMS = ("tau1", "tau2", "evenly-n", "r")
TRACE_VERSION = "ctatrace-v1"


# ------------------------------------------------------------------ config

@dataclass
class ModelConfig:
    d: int = 2048
    n_classes: int = 8
    separation: float = 6.0
    class_var: float = 1.0
    offset_level: float = 12.0
    imbalance: float = 4.0
    head_temperature: float = 1.0
    rank_ratio: int = 32


@dataclass
class AdaptConfig:
    lr: float = 0.001
    alpha: float = 0.01
    tau1: float = 1.1
    tau2: float = 1.05
    bg_threshold: float = 0.5
    batch_size: int = 4
    n_pairs: int = 10


@dataclass
class ScenarioConfig:
    preset: str | None = "shift-discrete-like"
    mode: str | None = None
    segment_steps: int | None = None
    segments: list | None = None  # inline segment specs; replace the preset's list
    n_obj_range: list = field(default_factory=lambda: [2, 8])
    max_steps: int | None = None  # truncate the schedule (quick runs)


@dataclass
class ReferenceConfig:
    samples: int = DEFAULT_REFERENCE_SAMPLES
    path: str | None = None  # precomputed ctastats file; computed in memory when absent


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    log: str = "steps.jsonl"
    summary: str = "summary.csv"
    weights: str = "weights.ctastats"


@dataclass
class ExperimentConfig:
    seed: int = 0
    method: str = "ours"
    model: ModelConfig = field(default_factory=ModelConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self):
        parse_method(self.method)
        a, m = self.adapt, self.model
        if not a.lr >= 0:
            raise ValueError("adapt.lr must be >= 0")
        if not 0 < a.alpha <= 1:
            raise ValueError("adapt.alpha must lie in (0, 1]")
        for name in ("tau1", "tau2"):
            tau = getattr(a, name)
            if not (tau >= 1 or tau == -math.inf):
                raise ValueError(f"adapt.{name} must be >= 1, inf or -inf")
        if not 0 < a.bg_threshold < 1:
            raise ValueError("adapt.bg_threshold must lie in (0, 1)")
        if a.batch_size < 1 or a.n_pairs < 1:
            raise ValueError("adapt.batch_size and adapt.n_pairs must be positive")
        if m.rank_ratio < 1 or m.d % m.rank_ratio:
            raise ValueError(f"model.rank_ratio={m.rank_ratio} must divide model.d={m.d}")
        if self.reference.samples < 4:
            raise ValueError("reference.samples must be at least 4")
        lo, hi = self.scenario.n_obj_range
        if not 1 <= lo <= hi <= 32:
            raise ValueError("scenario.n_obj_range must lie within [1, 32]")
        return self


def parse_method(method: str) -> tuple[str, int | None]:
    if method in ("direct", "full", "ours", "ours-skip"):
        return method, None
    if method.startswith("evenly-skip-"):
        n = method.rsplit("-", 1)[1]
        if n.isdigit() and int(n) >= 1:
            return "evenly-skip", int(n)
    raise ValueError(f"unknown method {method!r}; expected direct, full, ours, ours-skip "
                     "or evenly-skip-N")


def _coerce(value, target):
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "-inf", "infinity"):
        return -math.inf if value.strip().startswith("-") else math.inf
    if isinstance(target, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _fill(obj, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where or 'config'} must be a mapping")
    names = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ValueError(f"unknown config key {where + key!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            _fill(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, _coerce(value, current))


def config_from_dict(data: dict | None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    _fill(cfg, data or {}, "")
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def set_override(cfg: ExperimentConfig, assignment: str) -> ExperimentConfig:
    """Apply ``section.key=value`` (value parsed as YAML) to a copy of ``cfg``."""
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ValueError(f"override {assignment!r} must look like key=value")
    nested: dict = {}
    node = nested
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = yaml.safe_load(raw)
    out = copy.deepcopy(cfg)
    _fill(out, nested, "")
    return out.validate()


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


# ------------------------------------------------------------------ records

@dataclass
class StepRecord:
    t: int
    segment_id: int
    l_img: float
    l_obj: float
    l_total: float
    ratio1: float
    ratio2: float
    updated: bool
    accuracy: float
    cumulative_backward: int


@dataclass
class RunSummary:
    method: str
    seed: int
    segment_accuracy: list[float]
    segment_backward: list[int]
    segment_forward: list[int]
    overall_accuracy: float
    final_segment_accuracy: float
    total_backward: int
    total_forward: int
    steps_per_sec: float

    @property
    def backward_fraction(self) -> float:
        return self.total_backward / self.total_forward if self.total_forward else 0.0

    def csv_rows(self) -> list[list]:
        rows = [[self.method, self.seed, i, acc, b, f, self.steps_per_sec]
                for i, (acc, b, f) in enumerate(zip(self.segment_accuracy, self.segment_backward,
                                                    self.segment_forward))]
        rows.append([self.method, self.seed, "all", self.overall_accuracy, self.total_backward,
                     self.total_forward, self.steps_per_sec])
        return rows


# ------------------------------------------------------------------ pipeline

def build_source(cfg: ExperimentConfig) -> SourceModel:
    m = cfg.model
    return generate_source_model(make_rng(cfg.seed, "source"), n_classes=m.n_classes, d=m.d,
                                 separation=m.separation, class_var=m.class_var,
                                 offset_level=m.offset_level, imbalance=m.imbalance,
                                 head_temperature=m.head_temperature)


def scenario_spec(cfg: ExperimentConfig) -> dict:
    sc = cfg.scenario
    spec = preset(sc.preset) if sc.preset else {"mode": "discrete", "segments": []}
    if sc.mode is not None:
        spec["mode"] = sc.mode
    if sc.segment_steps is not None:
        spec["segment_steps"] = sc.segment_steps
    if sc.segments is not None:
        spec["segments"] = copy.deepcopy(sc.segments)
    if not spec["segments"]:
        raise ValueError("scenario has no segments: give a preset or inline segments")
    return spec


def make_estimator(cfg: ExperimentConfig, source: SourceModel) -> ContinualAdapter:
    method, n = parse_method(cfg.method)
    a = cfg.adapt
    return ContinualAdapter(head=partial(head_probs, source=source), method=method,
                            rank_ratio=cfg.model.rank_ratio, lr=a.lr, alpha=a.alpha, tau1=a.tau1,
                            tau2=a.tau2, bg_threshold=a.bg_threshold, evenly_n=n or 1,
                            n_pairs=a.n_pairs, random_state=cfg.seed)


def compute_references(cfg: ExperimentConfig, source: SourceModel | None = None) -> ReferenceStats:
    """Reference statistics from clean source scenes (ground-truth classes for objects)."""
    source = source or build_source(cfg)
    batch = sample_batch(source, DomainTransform.identity(source.dim),
                         make_rng(cfg.seed, "reference"), cfg.reference.samples,
                         tuple(cfg.scenario.n_obj_range))
    present = np.unique(batch.object_classes)
    if len(present) != source.n_classes:
        raise ValueError("reference scenes do not cover every class; raise reference.samples")
    est = make_estimator(cfg, source).fit(batch.image_features, batch.object_features,
                                          batch.object_classes)
    return est.reference_


def precompute_references(cfg: ExperimentConfig, path=None) -> Path:
    path = Path(path or cfg.reference.path or Path(cfg.output.dir) / "reference.ctastats")
    compute_references(cfg).save(path)
    return path


def run_experiment(cfg: ExperimentConfig, reference: ReferenceStats | None = None,
                   log_path=None, trace_path=None) -> tuple[list[StepRecord], RunSummary]:
    """Predict-then-adapt over the whole schedule.

    When ``log_path`` is given, records are streamed there as JSON lines; on a
    diverged loss the partial log is flushed before the error propagates.
    """
    cfg.validate()
    source = build_source(cfg)
    if reference is None:
        if cfg.reference.path and Path(cfg.reference.path).exists():
            reference = ReferenceStats.load(cfg.reference.path)
        else:
            reference = compute_references(cfg, source)
    if reference.dim != source.dim or len(reference.classes) != source.n_classes:
        raise ValueError("reference statistics do not match the configured model")
    schedule = build_schedule(scenario_spec(cfg), source, cfg.seed)
    steps = schedule.total_steps
    if cfg.scenario.max_steps is not None:
        steps = min(steps, cfg.scenario.max_steps)
    est = make_estimator(cfg, source).fit_reference(reference)

    records: list[StepRecord] = []
    trace: list = []
    sink = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(log_path, "w")
    elapsed = 0.0
    try:
        stream = scene_stream(cfg.seed, source, schedule, cfg.adapt.batch_size,
                              tuple(cfg.scenario.n_obj_range), steps=steps)
        for t, batch in stream:
            if trace_path is not None:
                trace.append(batch)
            start = time.perf_counter()
            out = est.step(batch.image_features, batch.object_features)
            elapsed += time.perf_counter() - start
            rec = StepRecord(t=t, segment_id=schedule.segment_of(t), l_img=out.l_img,
                             l_obj=out.l_obj, l_total=out.l_total,
                             ratio1=out.decision.ratio1, ratio2=out.decision.ratio2,
                             updated=out.updated,
                             accuracy=evaluate_accuracy(out.probs, batch.object_classes,
                                                        cfg.adapt.bg_threshold),
                             cumulative_backward=est.n_backward_)
            records.append(rec)
            if sink is not None:
                sink.write(json.dumps(asdict(rec)) + "\n")
    finally:
        if sink is not None:
            sink.close()
        if trace_path is not None and trace:
            dump_trace(trace_path, trace)

    summary = summarize(records, cfg.method, cfg.seed, len(schedule.segments), elapsed)
    if cfg.method in ("ours", "ours-skip") or cfg.method.startswith("evenly-skip"):
        assert np.array_equal(est.backbone_.weight, np.eye(source.dim)), "backbone changed"
    return records, summary


def summarize(records: list[StepRecord], method: str, seed: int, n_segments: int,
              elapsed: float = 0.0) -> RunSummary:
    acc = np.array([r.accuracy for r in records])
    seg = np.array([r.segment_id for r in records])
    upd = np.array([r.updated for r in records])
    seg_acc, seg_b, seg_f = [], [], []
    for i in range(n_segments):
        rows = seg == i
        seg_acc.append(float(acc[rows].mean()) if rows.any() else float("nan"))
        seg_b.append(int(upd[rows].sum()))
        seg_f.append(int(rows.sum()))
    last = next((i for i in reversed(range(n_segments)) if seg_f[i]), 0)
    return RunSummary(method=method, seed=seed, segment_accuracy=seg_acc, segment_backward=seg_b,
                      segment_forward=seg_f, overall_accuracy=float(acc.mean()) if len(acc) else 0.0,
                      final_segment_accuracy=seg_acc[last],
                      total_backward=records[-1].cumulative_backward if records else 0,
                      total_forward=len(records),
                      steps_per_sec=len(records) / elapsed if elapsed > 0 else 0.0)


# ------------------------------------------------------------------ sweeps

def sweep_config(base: ExperimentConfig, param: str, value) -> ExperimentConfig:
    cfg = copy.deepcopy(base)
    if param == "tau1":
        cfg.adapt.tau1 = float(value)
    elif param == "tau2":
        cfg.adapt.tau2 = float(value)
    elif param == "evenly-n":
        cfg.method = f"evenly-skip-{int(value)}"
    elif param == "r":
        cfg.model.rank_ratio = int(value)
    else:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")
    return cfg.validate()


def parse_values(text: str) -> list[float]:
    return [_coerce(v.strip(), 0.0) if v.strip().lower().lstrip("+-") in ("inf", "infinity")
            else float(v) for v in text.split(",") if v.strip()]


def run_sweep(base: ExperimentConfig, param: str, values, reference: ReferenceStats | None = None
              ) -> list[tuple[float, RunSummary]]:
    """One run per value with the seed held fixed; the reference is shared across runs
    (except for an r sweep, where it is still valid because it does not depend on r)."""
    if reference is None:
        reference = compute_references(base)
    results = []
    for v in values:
        cfg = sweep_config(base, param, v)
        log.info("sweep %s=%s (%s)", param, v, cfg.method)
        _, summary = run_experiment(cfg, reference)
        results.append((v, summary))
    return results


# ------------------------------------------------------------------ outputs

def write_summary_csv(path, summaries: list[RunSummary]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for s in summaries:
            w.writerows(s.csv_rows())


def write_sweep_outputs(out_dir, param: str, results: list[tuple[float, RunSummary]]):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "value"] + SUMMARY_HEADER)
        for v, s in results:
            for row in s.csv_rows():
                w.writerow([param, v] + row)
    with open(out_dir / "frontier.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "value", "method", "backward_fraction", "accuracy"])
        for v, s in results:
            w.writerow([param, v, s.method, s.backward_fraction, s.overall_accuracy])


def save_weights(path, est: ContinualAdapter):
    a, b = est.adaptor_, est.backbone_
    write_container(path, a.dim, 0, [("r", a.r), ("w_down", a.w_down), ("w_up", a.w_up),
                                     ("backbone.weight", b.weight), ("backbone.bias", b.bias)])


def load_weights(path, est: ContinualAdapter) -> ContinualAdapter:
    from .adaptor import FrozenBackbone, LowRankAdaptor
    _, _, e = read_container(path)
    est.adaptor_ = LowRankAdaptor(w_down=e["w_down"], w_up=e["w_up"], r=int(e["r"][0]))
    est.backbone_ = FrozenBackbone(e["backbone.weight"], e["backbone.bias"])
    return est


def dump_trace(path, batches):
    """Binary scene trace for replay: concatenated arrays plus per-step offsets."""
    img = np.concatenate([b.image_features for b in batches])
    obj = np.concatenate([b.object_features for b in batches])
    cls = np.concatenate([b.object_classes for b in batches])
    scene = np.concatenate([b.scene_index for b in batches])
    n_img = np.array([len(b.image_features) for b in batches])
    n_obj = np.array([len(b.object_classes) for b in batches])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, version=np.array(TRACE_VERSION), image_features=img, object_features=obj,
                 object_classes=cls, scene_index=scene, n_images=n_img, n_objects=n_obj)


def load_trace(path):
    from .simulator import SceneBatch
    with np.load(path) as z:
        if str(z["version"]) != TRACE_VERSION:
            raise ValueError(f"{path}: unsupported trace version {z['version']}")
        img_end = np.cumsum(z["n_images"])
        obj_end = np.cumsum(z["n_objects"])
        out = []
        for i in range(len(img_end)):
            i0 = img_end[i - 1] if i else 0
            o0 = obj_end[i - 1] if i else 0
            out.append(SceneBatch(z["image_features"][i0:img_end[i]],
                                  z["object_features"][o0:obj_end[i]],
                                  z["object_classes"][o0:obj_end[i]],
                                  z["scene_index"][o0:obj_end[i]]))
        return out


def run_and_write(cfg: ExperimentConfig, trace_path=None) -> RunSummary:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    records, summary = run_experiment(cfg, log_path=out / cfg.output.log, trace_path=trace_path)
    write_summary_csv(out / cfg.output.summary, [summary])
    return summary
