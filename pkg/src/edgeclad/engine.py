"""Continual-learning runs: strategies, training on task streams, evaluation."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec, count_resources, desk_spec
from .data import Task, load_mvtec_stream, synth_task_stream
from .export import export_anomaly_map
from .metrics import METRIC_NAMES, ResultMatrix, evaluate_task, forgetting
from .models import StudentTeacherDetector
from .replay import FEATURE_CODECS, FootprintReport, PQParams, ReplayMemory, memory_footprint

log = logging.getLogger(__name__)

STRATEGIES = ("JT", "FT", "Replay", "FeatureReplay", "FQReplay", "FPQReplay")
STRATEGY_CODEC = {
    "Replay": "raw_image",
    "FeatureReplay": "raw_feature",
    "FQReplay": "fq_feature",
    "FPQReplay": "pq_feature",
}


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    method: str = "sgd"
    lr: float = 0.4
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class StrategyConfig:
    kind: str = "Replay"
    memory_capacity: int = 100
    pq_params: PQParams | None = None
    epochs_per_task: int = 100
    batch_size: int = 8
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    @property
    def codec(self) -> str | None:
        return STRATEGY_CODEC.get(self.kind)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run.

    ``data`` is ``{"kind": "synthetic", "num_tasks", "image_size", "seed"}`` or
    ``{"kind": "mvtec", "root", "categories", "image_size"}``.  ``backbone``
    is a spec dict, or ``None`` for the desk backbone sized to the data.
    """

    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    variant: str = "paste"
    backbone: dict | None = None
    data: dict = field(default_factory=lambda: {"kind": "synthetic", "num_tasks": 5, "image_size": 64})
    seed: int = 0
    combine: str = "mean"
    dump_maps: bool = False

    def validate(self) -> "ExperimentConfig":
        s = self.strategy
        if s.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s.kind!r}; expected one of {STRATEGIES}")
        if self.variant not in ("stfpm", "paste"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if s.codec in FEATURE_CODECS and self.variant != "paste":
            raise ConfigError(f"{s.kind} stores split-stage features and requires variant 'paste'")
        if (s.kind == "FPQReplay") != (s.pq_params is not None):
            raise ConfigError("pq_params must be given for FPQReplay and only for FPQReplay")
        if s.memory_capacity < 0 or s.epochs_per_task < 0 or s.batch_size < 1:
            raise ConfigError("memory_capacity and epochs_per_task must be >= 0, batch_size >= 1")
        if s.optimizer.method.lower() != "sgd":
            raise ConfigError(f"unsupported optimizer {s.optimizer.method!r}")
        if self.combine not in ("mean", "product"):
            raise ConfigError(f"unknown combine {self.combine!r}")
        kind = self.data.get("kind")
        if kind not in ("synthetic", "mvtec"):
            raise ConfigError(f"unknown data kind {kind!r}")
        if s.kind == "FPQReplay" and self.backbone_spec().split_shape[0] % s.pq_params.m:
            raise ConfigError("pq m must divide the split-stage channel count")
        return self

    def image_size(self) -> int:
        return int(self.data.get("image_size", 64 if self.data.get("kind") == "synthetic" else 256))

    def backbone_spec(self) -> BackboneSpec:
        if self.backbone is None:
            return desk_spec(self.image_size(), seed=self.seed)
        try:
            return BackboneSpec.from_dict({"seed": self.seed, **self.backbone})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        try:
            sd = d.pop("strategy", {})
            opt = OptimizerConfig(**sd.pop("optimizer", {}))
            pq = sd.pop("pq_params", None)
            strategy = StrategyConfig(**sd, optimizer=opt, pq_params=PQParams(**pq) if pq else None)
            known = {f for f in cls.__dataclass_fields__}
            unknown = set(d) - known
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            return cls(strategy=strategy, **d)
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


def desk_config(kind: str, seed: int = 0, num_tasks: int = 5, **strategy) -> ExperimentConfig:
    """Small preset: synthetic 64x64 stream, desk backbone, 20 epochs per task.

    Memory holds 20 samples in total (10% of a 5-task stream of 40 images each).
    Keyword arguments override :class:`StrategyConfig` fields.
    """
    opts = dict(memory_capacity=20, epochs_per_task=20, batch_size=4)
    if kind == "FPQReplay":
        opts["pq_params"] = PQParams()
    opts.update(strategy)
    return ExperimentConfig(
        strategy=StrategyConfig(kind=kind, **opts),
        data={"kind": "synthetic", "num_tasks": num_tasks, "image_size": 64, "seed": seed},
        seed=seed,
    )


def load_tasks(cfg: ExperimentConfig) -> list[Task]:
    d = cfg.data
    if d["kind"] == "synthetic":
        return synth_task_stream(int(d.get("seed", cfg.seed)), int(d.get("num_tasks", 5)), cfg.image_size())
    return load_mvtec_stream(d.get("root"), tuple(d.get("categories", ())) or None, cfg.image_size())


def make_detector(cfg: ExperimentConfig) -> StudentTeacherDetector:
    s = cfg.strategy
    return StudentTeacherDetector(
        backbone=cfg.backbone_spec(),
        variant=cfg.variant,
        epochs=s.epochs_per_task,
        batch_size=s.batch_size,
        lr=s.optimizer.lr,
        momentum=s.optimizer.momentum,
        weight_decay=s.optimizer.weight_decay,
        combine=cfg.combine,
        random_state=cfg.seed,
    )


def make_memory(cfg: ExperimentConfig) -> ReplayMemory | None:
    s = cfg.strategy
    if s.codec is None:
        return None
    return ReplayMemory(s.memory_capacity, s.codec, s.pq_params, seed=cfg.seed)


def train_on_task(model: StudentTeacherDetector, task: Task, memory: ReplayMemory | None, epochs: int | None = None):
    """Train the student on one task, mixing in replay batches when a memory is given."""
    if not hasattr(model, "bundle_"):
        model._initialize()
    return model.partial_fit(task.train_images, memory=memory, epochs=epochs)


def store_task(model: StudentTeacherDetector, memory: ReplayMemory, task: Task) -> None:
    if memory.codec in FEATURE_CODECS:
        memory.update(task.task_id, model.split_features(task.train_images))
    else:
        memory.update(task.task_id, task.train_images)


def evaluate_all(model: StudentTeacherDetector, tasks_seen: list[Task], dump_dir: Path | None = None) -> dict[str, list[float]]:
    """One value per seen task for each metric."""
    rows: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
    for task in tasks_seen:
        maps = model.anomaly_maps(task.test_images)
        if dump_dir is not None:
            for i, amap in enumerate(maps):
                export_anomaly_map(amap, dump_dir / f"task_{task.task_id:02d}" / f"{i:03d}")
        scores = maps.reshape(len(maps), -1).max(axis=1)
        values = evaluate_task(maps, task.test_labels, task.test_masks, scores)
        for m in METRIC_NAMES:
            rows[m].append(values[m])
    return rows


@dataclass
class RunResult:
    matrices: dict[str, ResultMatrix]
    footprint: FootprintReport
    measured_footprint: FootprintReport
    resources: dict
    wall_clock: list[float]
    config: dict
    task_names: list[str]

    def final(self, metric: str) -> float:
        return self.matrices[metric].final_mean()

    def forgetting(self, metric: str = "pixel_f1", absolute: bool = False) -> float | None:
        m = self.matrices[metric]
        if m.T < 2 or not np.isfinite(m.row(m.T - 2)).all():
            return None
        return forgetting(m, absolute=absolute)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "task_names": self.task_names,
            "matrices": {k: v.to_list() for k, v in self.matrices.items()},
            "final": {k: self.final(k) for k in self.matrices},
            "forgetting": {"pixel_f1": self.forgetting("pixel_f1")},
            "footprint": self.footprint.to_dict(),
            "measured_footprint": self.measured_footprint.to_dict(),
            "resources": self.resources,
            "wall_clock": self.wall_clock,
        }

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task", "eval_task", "metric", "value"])
        for name in METRIC_NAMES:
            m = self.matrices[name]
            for t in range(m.T):
                for j in range(t + 1):
                    v = m.values[t, j]
                    if np.isfinite(v):
                        w.writerow([t, j, name, repr(float(v))])
        return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, tasks: list[Task] | None = None, out_dir: Path | None = None) -> RunResult:
    """Train and evaluate one strategy over a task stream.

    Sequential strategies train, then store the task in memory, then evaluate
    all seen tasks.  JT trains once on the union and fills only the last row.
    """
    cfg.validate()
    tasks = load_tasks(cfg) if tasks is None else tasks
    if not tasks:
        raise ConfigError("empty task stream")
    T = len(tasks)
    s = cfg.strategy
    model = make_detector(cfg)
    model._initialize()
    memory = make_memory(cfg)
    matrices = {m: ResultMatrix(m, T) for m in METRIC_NAMES}
    clock = []
    dump = (out_dir / "maps") if (cfg.dump_maps and out_dir is not None) else None

    def fill(t: int, rows: dict) -> None:
        for m, vals in rows.items():
            for j, v in enumerate(vals):
                matrices[m].set(t, j, v)

    if s.kind == "JT":
        start = time.perf_counter()
        union = np.concatenate([task.train_images for task in tasks])
        model.partial_fit(union, epochs=s.epochs_per_task)
        clock.append(time.perf_counter() - start)
        fill(T - 1, evaluate_all(model, tasks, dump / f"after_{T - 1:02d}" if dump else None))
    else:
        for t, task in enumerate(tasks):
            start = time.perf_counter()
            train_on_task(model, task, memory)
            if memory is not None:
                store_task(model, memory, task)
            clock.append(time.perf_counter() - start)
            fill(t, evaluate_all(model, tasks[: t + 1], dump / f"after_{t:02d}" if dump else None))
            log.info("%s task %d/%d pixel_f1=%.4f", s.kind, t + 1, T, np.mean(matrices["pixel_f1"].row(t)))

    spec = model.spec_
    if memory is None:
        footprint = FootprintReport(0, 0, 0, 0, 0)
        measured = footprint
    else:
        footprint = memory_footprint(
            s.codec, s.memory_capacity, spec.input_shape, spec.split_shape, s.pq_params, num_codebooks=T
        )
        measured = memory.footprint()
    resources = count_resources(spec, cfg.variant).to_dict()
    return RunResult(matrices, footprint, measured, resources, clock, cfg.to_dict(), [t.name for t in tasks])
