#!/usr/bin/env python3
"""
Experiment harness for MAMLCon

Runs meta-training and held-out evaluation over seeds, measures per-group
retention (accuracy right after a group is learned versus after the whole
episode), writes results CSVs with a run-metadata sidecar, and renders the
retention/accuracy table.

CSV layout (see docs/FORMATS.md):
    algorithm,dataset,scenario,k,seed,episodes,overall_accuracy,
    group_labels,group_start,group_end,group_delta
"""

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import SyntheticSpec, read_archive, synth_generate
from .episodes import (
    DEFAULT_K_TEST,
    Episode,
    LabeledDataset,
    ScenarioSpec,
    check_dataset,
    group_labels,
    parse_scenario,
    sample_episode,
)
from .error_handling import ConfigurationError, ValidationError, validate_fields
from .metalearn import (
    META_TRAINERS,
    DeployedModel,
    GroupSnapshot,
    InnerLoopConfig,
    MetaTrainConfig,
    continual_deploy,
    finetune_baseline,
    load_checkpoint,
    oml_deploy,
    save_checkpoint,
)
from .models import ModelConfig, classify
from .nncore import ParameterSet

logger = logging.getLogger(__name__)

ALGORITHMS = ("mamlcon", "oml", "none")
DISPLAY_NAMES = {"mamlcon": "MAMLCon", "oml": "OML", "none": "No Pre-Training"}

CSV_HEADER = ["algorithm", "dataset", "scenario", "k", "seed", "episodes", "overall_accuracy",
              "group_labels", "group_start", "group_end", "group_delta"]
SWEEP_HEADER = ["k", "algorithm", "dataset", "scenario", "seeds", "mean_accuracy", "std_accuracy"]
LIST_SEPARATOR = ";"
DECIMALS = 4

Classifier = Callable[[ParameterSet, np.ndarray, np.ndarray], np.ndarray]
PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

def _build_section(cls, values: Dict[str, Any], section: str, fixed: Optional[Dict[str, Any]] = None):
    fixed = fixed or {}
    validate_fields(values, [], section=section)
    allowed = set(cls.__dataclass_fields__) - set(fixed)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigurationError(f"Unknown fields in '{section}': {unknown}", {"section": section, "unknown": unknown})
    try:
        return cls(**values, **fixed)
    except TypeError as e:
        raise ConfigurationError(f"Invalid '{section}' section: {e}", {"section": section}) from e


@dataclass(frozen=True)
class DataConfig:
    """Exactly one source: one archive (split by class), a train/test archive pair, or synthetic clusters."""
    archive: Optional[str] = None
    train_archive: Optional[str] = None
    test_archive: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    heldout_classes: int = 10
    split_seed: int = 0
    target_frames: Optional[int] = None

    def __post_init__(self):
        if (self.train_archive is None) != (self.test_archive is None):
            raise ConfigurationError("data.train_archive and data.test_archive must be given together")
        sources = [self.archive is not None, self.train_archive is not None, self.synthetic is not None]
        if sum(sources) != 1:
            raise ConfigurationError("data needs exactly one of: archive, train_archive + test_archive, synthetic")
        if self.target_frames is not None and self.target_frames < 1:
            raise ConfigurationError(f"data.target_frames must be positive, got {self.target_frames}")

    @property
    def name(self) -> str:
        if self.synthetic is not None:
            return "synthetic"
        return Path(self.archive or self.test_archive).name.split(".")[0]

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "DataConfig":
        values = dict(validate_fields(values, [], {"heldout_classes": int, "split_seed": int,
                                                   "synthetic": dict, "archive": str,
                                                   "train_archive": str, "test_archive": str,
                                                   "target_frames": int}, section="data"))
        if "synthetic" in values:
            values["synthetic"] = _build_section(SyntheticSpec, values["synthetic"], "data.synthetic")
        return _build_section(cls, values, "data")

    def to_dict(self) -> Dict[str, Any]:
        return {key: value for key, value in asdict(self).items() if value is not None}


@dataclass(frozen=True)
class RunConfig:
    algorithm: str
    scenario: ScenarioSpec
    data: DataConfig
    meta: MetaTrainConfig
    inner: InnerLoopConfig = InnerLoopConfig()
    model: Dict[str, Any] = field(default_factory=dict)
    k_test: int = DEFAULT_K_TEST
    episodes_per_eval: int = 20
    seeds: Tuple[int, ...] = (0,)
    csv: Optional[str] = None
    checkpoint: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}, got '{self.algorithm}'")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.episodes_per_eval < 1 or self.workers < 1 or self.k_test < 1:
            raise ConfigurationError("episodes_per_eval, workers and k_test must be positive")
        unknown = sorted(set(self.model) - set(ModelConfig.__dataclass_fields__))
        if unknown:
            raise ConfigurationError(f"Unknown fields in 'model': {unknown}", {"section": "model", "unknown": unknown})

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        """Build from the JSON schema in docs/CONFIGURATION.md."""
        validate_fields(raw, ["algorithm", "scenario", "k", "data"], {
            "algorithm": str, "scenario": str, "k": int, "k_test": int, "episodes_per_eval": int,
            "seeds": list, "data": dict, "model": dict, "inner": dict, "meta": dict, "output": dict,
            "workers": int, "description": str,
        })
        known = {"algorithm", "scenario", "k", "k_test", "episodes_per_eval", "seeds", "data", "model",
                 "inner", "meta", "output", "workers", "description"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"Unknown top-level config keys: {unknown}", {"unknown": unknown})

        seeds = raw.get("seeds", [0])
        if not all(isinstance(seed, int) and not isinstance(seed, bool) for seed in seeds):
            raise ConfigurationError(f"seeds must be a list of integers, got {seeds}")
        output = validate_fields(raw.get("output", {}), [], {"csv": str, "checkpoint": str}, section="output")

        scenario = parse_scenario(raw["scenario"], raw["k"])
        k_test = raw.get("k_test", DEFAULT_K_TEST)
        meta = _build_section(MetaTrainConfig, raw.get("meta", {}), "meta",
                              fixed={"scenario": scenario, "k_test": k_test, "seed": seeds[0] if seeds else 0})
        return cls(
            algorithm=raw["algorithm"],
            scenario=scenario,
            data=DataConfig.from_dict(raw["data"]),
            meta=meta,
            inner=_build_section(InnerLoopConfig, raw.get("inner", {}), "inner"),
            model=dict(raw.get("model", {})),
            k_test=k_test,
            episodes_per_eval=raw.get("episodes_per_eval", 20),
            seeds=tuple(seeds),
            csv=output.get("csv"),
            checkpoint=output.get("checkpoint"),
            workers=raw.get("workers", 1),
        )

    def to_dict(self) -> Dict[str, Any]:
        meta = {key: value for key, value in asdict(self.meta).items() if key not in ("scenario", "k_test", "seed")}
        output = {key: value for key, value in (("csv", self.csv), ("checkpoint", self.checkpoint)) if value}
        return {
            "algorithm": self.algorithm,
            "scenario": self.scenario.notation,
            "k": self.scenario.k,
            "k_test": self.k_test,
            "episodes_per_eval": self.episodes_per_eval,
            "seeds": list(self.seeds),
            "data": self.data.to_dict(),
            "model": dict(self.model),
            "inner": self.inner.to_dict(),
            "meta": meta,
            "output": output,
            "workers": self.workers,
        }

    def with_k(self, k: int) -> "RunConfig":
        scenario = replace(self.scenario, k=k)
        return replace(self, scenario=scenario, meta=replace(self.meta, scenario=scenario))

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form; output paths are excluded."""
        canonical = {key: value for key, value in self.to_dict().items() if key != "output"}
        return hashlib.sha256(json.dumps(canonical, sort_keys=True).encode("utf-8")).hexdigest()


def resolve_model(cfg: RunConfig, data: LabeledDataset) -> ModelConfig:
    """Model config with input_shape taken from the data and head_classes defaulting to N."""
    values = dict(cfg.model)
    values.setdefault("input_shape", [1, data.frames, data.coeffs])
    values.setdefault("head_classes", cfg.scenario.n_final)
    return ModelConfig.from_dict(values)


def load_datasets(data_cfg: DataConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    """(meta-train, held-out) datasets with disjoint classes."""
    if data_cfg.train_archive is not None:
        train_archive = read_archive(data_cfg.train_archive)
        frames = data_cfg.target_frames or train_archive.target_frames or None
        train = LabeledDataset.from_archive(train_archive, frames)
        test = LabeledDataset.from_archive(read_archive(data_cfg.test_archive), train.frames)
        logger.info(f"Loaded {len(train.class_ids)} meta-train and {len(test.class_ids)} held-out classes")
        return train, test

    if data_cfg.synthetic is not None:
        full = LabeledDataset.from_archive(synth_generate(data_cfg.synthetic))
    else:
        full = LabeledDataset.from_archive(read_archive(data_cfg.archive), data_cfg.target_frames)
    train, test = full.split_classes(data_cfg.heldout_classes, np.random.default_rng(data_cfg.split_seed))
    logger.info(f"Split {len(full.class_ids)} classes into {len(train.class_ids)} meta-train "
                f"and {len(test.class_ids)} held-out")
    return train, test


# ---------------------------------------------------------------------------
# Retention
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupRetention:
    label: str
    start: float
    end: float
    n_test: int
    is_last: bool

    @property
    def delta(self) -> Optional[float]:
        return None if self.is_last else self.end - self.start


@dataclass(frozen=True)
class RetentionReport:
    groups: Tuple[GroupRetention, ...]
    overall: float
    n_test: int


def model_classifier(model: ModelConfig) -> Classifier:
    return lambda params, x, mask: classify(params, x, mask, model)


def evaluate_retention(trajectory: Sequence[GroupSnapshot], final: DeployedModel, episode: Episode,
                       classifier: Classifier) -> RetentionReport:
    """
    Per-group start accuracy (snapshot taken right after that group, masked to
    the classes seen by then) and end accuracy (final model, full mask).

    Raises:
        ValidationError: trajectory does not match the episode's groups
    """
    if len(trajectory) != len(episode.groups):
        raise ValidationError(f"trajectory has {len(trajectory)} snapshots but the episode has "
                              f"{len(episode.groups)} groups")
    labels = group_labels(episode.group_sizes)
    groups = []
    hits_total = 0
    n_total = 0
    for index, snapshot in enumerate(trajectory):
        expected = tuple(slot.class_id for slot in episode.groups[index])
        if tuple(snapshot.class_ids) != expected:
            raise ValidationError(f"snapshot {index} covers classes {snapshot.class_ids}, episode group has {expected}")
        x, y = episode.test_batch([index])
        start_hits = int(np.sum(classifier(snapshot.params, x, snapshot.mask) == y))
        end_hits = int(np.sum(classifier(final.params, x, final.mask) == y))
        groups.append(GroupRetention(labels[index], 100.0 * start_hits / len(y), 100.0 * end_hits / len(y),
                                     len(y), index == len(trajectory) - 1))
        hits_total += end_hits
        n_total += len(y)
    return RetentionReport(tuple(groups), 100.0 * hits_total / n_total, n_total)


# ---------------------------------------------------------------------------
# Result rows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    """One (configuration, seed) result; accuracies are percentages rounded to four decimals."""
    algorithm: str
    dataset: str
    scenario: str
    k: int
    seed: int
    episodes: int
    overall_accuracy: float
    group_labels: Tuple[str, ...]
    group_start: Tuple[float, ...]
    group_end: Tuple[float, ...]

    @property
    def group_delta(self) -> Tuple[Optional[float], ...]:
        last = len(self.group_labels) - 1
        return tuple(None if index == last else end - start
                     for index, (start, end) in enumerate(zip(self.group_start, self.group_end)))


def summarise_reports(reports: Sequence[RetentionReport], algorithm: str, dataset: str, scenario: ScenarioSpec,
                      seed: int) -> ResultRow:
    """Mean over episodes of the per-group and overall accuracies."""
    starts = np.mean([[g.start for g in report.groups] for report in reports], axis=0)
    ends = np.mean([[g.end for g in report.groups] for report in reports], axis=0)
    return ResultRow(
        algorithm=algorithm,
        dataset=dataset,
        scenario=scenario.notation,
        k=scenario.k,
        seed=seed,
        episodes=len(reports),
        overall_accuracy=round(float(np.mean([report.overall for report in reports])), DECIMALS),
        group_labels=tuple(g.label for g in reports[0].groups),
        group_start=tuple(round(float(value), DECIMALS) for value in starts),
        group_end=tuple(round(float(value), DECIMALS) for value in ends),
    )


def _fmt(value: float) -> str:
    return f"{value:.{DECIMALS}f}"


def _row_to_fields(row: ResultRow) -> List[str]:
    return [
        row.algorithm, row.dataset, row.scenario, str(row.k), str(row.seed), str(row.episodes),
        _fmt(row.overall_accuracy),
        LIST_SEPARATOR.join(row.group_labels),
        LIST_SEPARATOR.join(_fmt(v) for v in row.group_start),
        LIST_SEPARATOR.join(_fmt(v) for v in row.group_end),
        LIST_SEPARATOR.join("-" if d is None else _fmt(d) for d in row.group_delta),
    ]


def format_results_csv(rows: Sequence[ResultRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(_row_to_fields(row))
    return buffer.getvalue()


def write_results_csv(rows: Sequence[ResultRow], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(format_results_csv(rows))
    logger.info(f"Wrote {len(rows)} result rows to {path}")
    return path


def read_results_csv(path: PathLike) -> List[ResultRow]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValidationError(f"{path}: unexpected CSV header {header}", {"expected": CSV_HEADER})
        rows = []
        for line_number, fields in enumerate(reader, start=2):
            if len(fields) != len(CSV_HEADER):
                raise ValidationError(f"{path}:{line_number}: expected {len(CSV_HEADER)} columns, got {len(fields)}")
            try:
                labels = tuple(fields[7].split(LIST_SEPARATOR))
                starts = tuple(float(v) for v in fields[8].split(LIST_SEPARATOR))
                ends = tuple(float(v) for v in fields[9].split(LIST_SEPARATOR))
                rows.append(ResultRow(fields[0], fields[1], fields[2], int(fields[3]), int(fields[4]),
                                      int(fields[5]), float(fields[6]), labels, starts, ends))
            except ValueError as e:
                raise ValidationError(f"{path}:{line_number}: {e}") from e
            if not len(labels) == len(starts) == len(ends):
                raise ValidationError(f"{path}:{line_number}: group columns have different lengths")
    return rows


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

DEPLOYERS = {"mamlcon": continual_deploy, "oml": oml_deploy}


def _run_seed(cfg: RunConfig, model: ModelConfig, meta_train: LabeledDataset, heldout: LabeledDataset,
              seed: int, initial_params: Optional[ParameterSet]) -> ResultRow:
    started = time.perf_counter()
    theta_star = None
    if cfg.algorithm != "none":
        if initial_params is not None:
            theta_star = initial_params
        else:
            trainer = META_TRAINERS[cfg.algorithm]
            theta_star = trainer(meta_train, replace(cfg.meta, seed=seed), cfg.inner, model)

    eval_rng = np.random.default_rng([seed, 1])
    episode_seeds = eval_rng.integers(0, 2 ** 63 - 1, size=cfg.episodes_per_eval)
    classifier = model_classifier(model)
    reports = []
    for episode_seed in episode_seeds:
        rng = np.random.default_rng(int(episode_seed))
        episode = sample_episode(heldout, cfg.scenario, model.head_classes, rng, cfg.k_test)
        if theta_star is None:
            deployed, trajectory = finetune_baseline(model, episode, cfg.inner, rng)
        else:
            deployed, trajectory = DEPLOYERS[cfg.algorithm](theta_star, episode, cfg.inner, model, rng)
        reports.append(evaluate_retention(trajectory, deployed, episode, classifier))

    row = summarise_reports(reports, cfg.algorithm, cfg.data.name, cfg.scenario, seed)
    logger.info(f"{DISPLAY_NAMES[cfg.algorithm]} seed {seed}: {row.overall_accuracy:.2f}% over "
                f"{row.episodes} episodes ({time.perf_counter() - started:.1f}s)")
    return row


def _write_sidecar(cfg: RunConfig, csv_path: Path, wall_time: float) -> Path:
    sidecar = csv_path.with_name(csv_path.name + ".meta.json")
    meta = {"config_hash": cfg.config_hash(), "config": cfg.to_dict(), "seeds": list(cfg.seeds),
            "wall_time_seconds": round(wall_time, 3)}
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar


def run_experiment(cfg: RunConfig, initial_params: Optional[ParameterSet] = None,
                   model: Optional[ModelConfig] = None, csv_path: Optional[PathLike] = None,
                   datasets: Optional[Tuple[LabeledDataset, LabeledDataset]] = None) -> List[ResultRow]:
    """
    For each seed: meta-train (unless algorithm is 'none' or initial_params is
    given), deploy on episodes_per_eval held-out episodes and average the
    retention reports. Rows come back in seed order.

    Raises:
        SamplingError: a dataset cannot supply the scenario (before any training)
    """
    started = time.perf_counter()
    meta_train, heldout = datasets or load_datasets(cfg.data)
    model = model or resolve_model(cfg, heldout)
    if model.head_classes < cfg.scenario.n_final:
        raise ConfigurationError(f"model.head_classes {model.head_classes} < N={cfg.scenario.n_final}")
    check_dataset(heldout, cfg.scenario, cfg.k_test)
    if cfg.algorithm != "none" and initial_params is None:
        check_dataset(meta_train, cfg.scenario, cfg.k_test)

    logger.info(f"🚀 {DISPLAY_NAMES[cfg.algorithm]} on {cfg.data.name}, {cfg.scenario}, seeds {list(cfg.seeds)}")
    run = lambda seed: _run_seed(cfg, model, meta_train, heldout, seed, initial_params)
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            rows = list(executor.map(run, cfg.seeds))
    else:
        rows = [run(seed) for seed in cfg.seeds]

    target = csv_path or cfg.csv
    if target:
        path = write_results_csv(rows, target)
        _write_sidecar(cfg, path, time.perf_counter() - started)
    return rows


def train_checkpoint(cfg: RunConfig, out: Optional[PathLike] = None) -> Path:
    """Meta-train with the first seed and store θ* with its model config."""
    if cfg.algorithm == "none":
        raise ConfigurationError("algorithm 'none' has nothing to meta-train")
    target = out or cfg.checkpoint
    if not target:
        raise ConfigurationError("no checkpoint path given (output.checkpoint or --out)")
    meta_train, heldout = load_datasets(cfg.data)
    model = resolve_model(cfg, meta_train)
    seed = cfg.seeds[0]
    theta_star = META_TRAINERS[cfg.algorithm](meta_train, replace(cfg.meta, seed=seed), cfg.inner, model)
    extra = {"algorithm": cfg.algorithm, "scenario": cfg.scenario.notation, "k": cfg.scenario.k,
             "seed": seed, "config_hash": cfg.config_hash()}
    path = save_checkpoint(theta_star, model, target, extra)
    logger.info(f"✅ Saved {DISPLAY_NAMES[cfg.algorithm]} checkpoint to {path}")
    return path


def evaluate_checkpoint(cfg: RunConfig, checkpoint: PathLike, csv_path: Optional[PathLike] = None) -> List[ResultRow]:
    """Deploy a stored θ* on held-out episodes; no meta-training."""
    params, model, extra = load_checkpoint(checkpoint)
    algorithm = extra.get("algorithm", cfg.algorithm)
    if algorithm not in DEPLOYERS:
        raise ConfigurationError(f"checkpoint algorithm '{algorithm}' cannot be deployed")
    logger.info(f"Evaluating {checkpoint} ({algorithm}, trained on {extra.get('scenario', '?')})")
    return run_experiment(replace(cfg, algorithm=algorithm), initial_params=params, model=model, csv_path=csv_path)


# ---------------------------------------------------------------------------
# Aggregation, K sweeps and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AggregateRow:
    algorithm: str
    dataset: str
    scenario: str
    k: int
    seeds: Tuple[int, ...]
    overall_mean: float
    overall_std: float
    group_labels: Tuple[str, ...]
    group_start: Tuple[float, ...]
    group_end: Tuple[float, ...]


def aggregate_rows(rows: Sequence[ResultRow]) -> List[AggregateRow]:
    """Seed means per (algorithm, dataset, scenario, k), in first-appearance order."""
    grouped: Dict[Tuple[str, str, str, int], List[ResultRow]] = {}
    for row in rows:
        grouped.setdefault((row.algorithm, row.dataset, row.scenario, row.k), []).append(row)

    aggregates = []
    for (algorithm, dataset, scenario, k), members in grouped.items():
        labels = members[0].group_labels
        if any(member.group_labels != labels for member in members):
            raise ValidationError(f"rows for {algorithm} {scenario} K={k} have different label groups")
        overall = np.array([member.overall_accuracy for member in members])
        aggregates.append(AggregateRow(
            algorithm=algorithm,
            dataset=dataset,
            scenario=scenario,
            k=k,
            seeds=tuple(member.seed for member in members),
            overall_mean=float(overall.mean()),
            overall_std=float(overall.std()),
            group_labels=labels,
            group_start=tuple(float(v) for v in np.mean([m.group_start for m in members], axis=0)),
            group_end=tuple(float(v) for v in np.mean([m.group_end for m in members], axis=0)),
        ))
    return aggregates


@dataclass(frozen=True)
class KSweepRow:
    k: int
    algorithm: str
    dataset: str
    scenario: str
    seeds: Tuple[int, ...]
    mean_accuracy: float
    std_accuracy: float


def sweep_k(cfg: RunConfig, ks: Sequence[int], csv_path: Optional[PathLike] = None,
            initial_params: Optional[ParameterSet] = None, model: Optional[ModelConfig] = None) -> List[KSweepRow]:
    """One summary row per shot count K; each K gets its own meta-training unless θ* is supplied."""
    if not ks:
        raise ValidationError("sweep needs at least one K")
    datasets = load_datasets(cfg.data)
    sweep = []
    for k in ks:
        rows = run_experiment(cfg.with_k(k), initial_params=initial_params, model=model, datasets=datasets)
        for aggregate in aggregate_rows(rows):
            sweep.append(KSweepRow(k, aggregate.algorithm, aggregate.dataset, aggregate.scenario,
                                   aggregate.seeds, aggregate.overall_mean, aggregate.overall_std))
        logger.info(f"K={k}: {sweep[-1].mean_accuracy:.2f}% ± {sweep[-1].std_accuracy:.2f}")

    target = csv_path or cfg.csv
    if target:
        path = Path(target)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(SWEEP_HEADER)
            for row in sweep:
                writer.writerow([row.k, row.algorithm, row.dataset, row.scenario,
                                 LIST_SEPARATOR.join(str(s) for s in row.seeds),
                                 _fmt(row.mean_accuracy), _fmt(row.std_accuracy)])
        logger.info(f"Wrote K sweep to {path}")
    return sweep


def _align(table: List[List[str]]) -> List[str]:
    widths = [max(len(line[col]) for line in table) for col in range(len(table[0]))]
    return ["  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip() for line in table]


def _render_table(aggregates: Sequence[AggregateRow]) -> List[str]:
    labels = aggregates[0].group_labels
    last = len(labels) - 1
    table = [["Labels"] + [cell for a in aggregates for cell in (f"{DISPLAY_NAMES.get(a.algorithm, a.algorithm)} S/E", "Δ")]]
    for index, label in enumerate(labels):
        line = [label]
        for a in aggregates:
            start, end = f"{a.group_start[index]:.0f}", f"{a.group_end[index]:.0f}"
            if index == last:
                line += [f"-/{end}", "-"]
            else:
                line += [f"{start}/{end}", str(int(end) - int(start))]
        table.append(line)
    table.append(["Accuracy"] + [cell for a in aggregates for cell in (f"{a.overall_mean:.1f}", "")])
    return _align(table)


def format_report(rows: Sequence[ResultRow]) -> str:
    """
    Retention table: one line per label group with S/E and Δ per algorithm,
    then an Accuracy footer. Rows for different datasets, scenarios or K
    become separate tables, each under a one-line title.
    """
    if not rows:
        raise ValidationError("nothing to report")
    tables: Dict[Tuple[str, str, int], List[AggregateRow]] = {}
    for aggregate in aggregate_rows(rows):
        tables.setdefault((aggregate.dataset, aggregate.scenario, aggregate.k), []).append(aggregate)

    blocks = []
    for (dataset, scenario, k), aggregates in tables.items():
        lines = _render_table(aggregates)
        if len(tables) > 1:
            lines.insert(0, f"{dataset} {scenario} K={k}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
