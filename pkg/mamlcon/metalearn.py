#!/usr/bin/env python3
"""
Meta-learning algorithms for few-shot continual learning

- inner-loop adaptation, template storage and the batched template step
- the continual inner loop: per class group, T Adam steps on the group's
  support set, then one step on one stored template per class seen so far
- first-order meta-update of the initial weights
- MAMLCon and OML meta-training, test-time deployment, and the
  no-pretraining baseline
- checkpoints of meta-learned weights in the feature-archive container
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import ArchiveRecord, FeatureArchive, read_archive, write_archive
from .episodes import ClassSlot, Episode, LabeledDataset, ScenarioSpec, check_dataset, sample_episode
from .error_handling import ConfigurationError, ValidationError
from .models import ModelConfig, describe, init_params, param_shapes, predict, widen_mask
from .nncore import (
    OPTIMIZERS,
    AdamState,
    GradientSet,
    ParameterSet,
    add_grads,
    copy_params,
    model_backward,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InnerLoopConfig:
    t_initial: int = 30
    t_step: int = 5
    inner_lr: float = 0.001
    template_steps: int = 1
    plain_finetune: bool = False

    def __post_init__(self):
        if not self.t_initial >= self.t_step >= 0:
            raise ConfigurationError(f"need t_initial >= t_step >= 0, got {self.t_initial}, {self.t_step}")
        if not self.inner_lr > 0:
            raise ConfigurationError(f"inner_lr must be positive, got {self.inner_lr}")
        if self.template_steps < 0:
            raise ConfigurationError(f"template_steps must be non-negative, got {self.template_steps}")
        if self.template_steps != 1:
            logger.info(f"Template-step ablation: {self.template_steps} template steps per group")

    @property
    def effective_template_steps(self) -> int:
        return 0 if self.plain_finetune else self.template_steps

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class MetaTrainConfig:
    scenario: ScenarioSpec
    outer_lr: float = 0.0001
    meta_iterations: int = 100
    tasks_per_meta_batch: int = 4
    seed: int = 0
    k_test: int = 5
    outer_optimizer: str = "adam"
    log_every: int = 50
    workers: int = 1

    def __post_init__(self):
        if not self.outer_lr > 0:
            raise ConfigurationError(f"outer_lr must be positive, got {self.outer_lr}")
        if self.meta_iterations < 0:
            raise ConfigurationError(f"meta_iterations must be non-negative, got {self.meta_iterations}")
        if min(self.tasks_per_meta_batch, self.k_test, self.log_every, self.workers) < 1:
            raise ConfigurationError("tasks_per_meta_batch, k_test, log_every and workers must be positive")
        if self.outer_optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"outer_optimizer must be one of {sorted(OPTIMIZERS)}, got '{self.outer_optimizer}'")


@dataclass(frozen=True)
class Template:
    features: np.ndarray
    head_index: int


@dataclass(frozen=True)
class TemplateStore:
    """One stored example per seen class, in class-introduction order."""
    entries: Dict[int, Template] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.entries

    @property
    def class_ids(self) -> List[int]:
        return list(self.entries)

    def batch(self) -> Tuple[np.ndarray, np.ndarray]:
        x = np.stack([t.features for t in self.entries.values()])[:, None, :, :]
        y = np.array([t.head_index for t in self.entries.values()], dtype=np.int64)
        return x, y


@dataclass(frozen=True)
class GroupSnapshot:
    """State right after a class group has been learned (including its template step)."""
    params: ParameterSet
    mask: np.ndarray
    class_ids: Tuple[int, ...]
    adapt_steps: int
    template_steps: int
    support_loss: float


@dataclass(frozen=True)
class InnerLoopResult:
    params: ParameterSet
    store: TemplateStore
    mask: np.ndarray
    trajectory: List[GroupSnapshot]
    opt_state: AdamState


@dataclass(frozen=True)
class DeployedModel:
    params: ParameterSet
    mask: np.ndarray
    store: TemplateStore
    opt_state: AdamState


@dataclass(frozen=True)
class MetaTask:
    """Adapted weights plus the meta-test batch they are scored on."""
    params: ParameterSet
    x: np.ndarray
    labels: np.ndarray
    mask: np.ndarray


# ---------------------------------------------------------------------------
# Inner-loop building blocks
# ---------------------------------------------------------------------------

def _check_labels_masked_in(labels: np.ndarray, mask: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size and not np.asarray(mask, dtype=bool)[labels].all():
        bad = sorted(set(labels[~np.asarray(mask, dtype=bool)[labels]].tolist()))
        raise ValidationError(f"labels {bad} are masked out", {"masked_out_labels": bad})


def loss_and_grads(params: ParameterSet, x: np.ndarray, labels: np.ndarray, mask: np.ndarray,
                   model: ModelConfig) -> Tuple[float, GradientSet]:
    logits, tape = predict(params, x, mask, model)
    loss, dlogits = softmax_cross_entropy(logits, labels, mask)
    return loss, model_backward(tape, dlogits)


def inner_adapt(params: ParameterSet, opt_state: AdamState, x: np.ndarray, labels: np.ndarray,
                mask: np.ndarray, steps: int, lr: float, model: ModelConfig,
                trainable: Optional[Iterable[str]] = None) -> Tuple[ParameterSet, AdamState]:
    """T full-batch Adam steps on the cross-entropy of one support batch."""
    if steps < 0:
        raise ValidationError(f"step count must be non-negative, got {steps}")
    _check_labels_masked_in(labels, mask)
    trainable = None if trainable is None else tuple(trainable)
    for _ in range(steps):
        _, grads = loss_and_grads(params, x, labels, mask, model)
        params, opt_state = OPTIMIZERS["adam"](params, grads, opt_state, lr, trainable)
    return params, opt_state


def store_templates(store: TemplateStore, group: Sequence[ClassSlot], label_map: Dict[int, int],
                    rng: np.random.Generator) -> TemplateStore:
    """Append one uniformly drawn support example per new class."""
    entries = dict(store.entries)
    for slot in group:
        if slot.class_id in entries:
            raise ValidationError(f"class {slot.class_id} already has a stored template", {"class_id": slot.class_id})
        choice = int(rng.integers(slot.support.shape[0]))
        entries[slot.class_id] = Template(np.array(slot.support[choice], copy=True), label_map[slot.class_id])
    return TemplateStore(entries)


def template_step(params: ParameterSet, opt_state: AdamState, store: TemplateStore, mask: np.ndarray,
                  lr: float, model: ModelConfig) -> Tuple[ParameterSet, AdamState]:
    """Exactly one Adam step on all templates as a single batch."""
    if len(store) == 0:
        logger.warning("Template step requested with an empty template store; skipping")
        return params, opt_state
    x, labels = store.batch()
    _check_labels_masked_in(labels, mask)
    _, grads = loss_and_grads(params, x, labels, mask, model)
    return OPTIMIZERS["adam"](params, grads, opt_state, lr)


def _run_inner_loop(theta0: ParameterSet, episode: Episode, cfg: InnerLoopConfig, model: ModelConfig,
                    rng: np.random.Generator, trainable: Optional[Sequence[str]] = None,
                    use_templates: bool = True) -> InnerLoopResult:
    params = copy_params(theta0)
    opt_state = AdamState.fresh(params)
    mask = np.zeros(model.head_classes, dtype=bool)
    store = TemplateStore()
    trajectory: List[GroupSnapshot] = []

    for index, group in enumerate(episode.groups):
        class_ids = tuple(slot.class_id for slot in group)
        mask = widen_mask(mask, episode.heads(class_ids))
        x, labels = episode.support_batch(index)
        steps = cfg.t_initial if index == 0 else cfg.t_step
        params, opt_state = inner_adapt(params, opt_state, x, labels, mask, steps, cfg.inner_lr, model, trainable)

        taken = 0
        if use_templates:
            store = store_templates(store, group, episode.label_map, rng)
            for _ in range(cfg.effective_template_steps):
                params, opt_state = template_step(params, opt_state, store, mask, cfg.inner_lr, model)
                taken += 1

        support_loss, _ = softmax_cross_entropy(predict(params, x, mask, model)[0], labels, mask)
        logger.debug(f"group {index + 1}/{len(episode.groups)}: {len(class_ids)} classes, "
                     f"{steps} steps + {taken} template steps, support loss {support_loss:.4f}")
        trajectory.append(GroupSnapshot(params, mask, class_ids, steps, taken, support_loss))

    return InnerLoopResult(params, store, mask, trajectory, opt_state)


def mamlcon_inner_loop(theta0: ParameterSet, episode: Episode, cfg: InnerLoopConfig, model: ModelConfig,
                       rng: np.random.Generator) -> InnerLoopResult:
    """Sequential group adaptation (t_initial, then t_step steps) with a template step after each group."""
    return _run_inner_loop(theta0, episode, cfg, model, rng)


def oml_inner_loop(theta0: ParameterSet, episode: Episode, cfg: InnerLoopConfig, model: ModelConfig,
                   rng: np.random.Generator) -> InnerLoopResult:
    """Sequential group adaptation of the head only; no templates."""
    return _run_inner_loop(theta0, episode, cfg, model, rng, trainable=model.pn_param_names, use_templates=False)


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

def fo_meta_update(theta0: ParameterSet, tasks: Sequence[MetaTask], opt_state: AdamState, beta: float,
                   model: ModelConfig, optimizer: str = "adam",
                   losses: Optional[List[float]] = None) -> Tuple[ParameterSet, AdamState]:
    """
    First-order meta-update: the meta-test gradients taken at each task's
    adapted weights are summed and applied to theta0 in one outer step.

    If `losses` is given, the mean meta-test loss is appended to it.
    """
    if not tasks:
        raise ValidationError("fo_meta_update needs at least one task")
    if optimizer not in OPTIMIZERS:
        raise ConfigurationError(f"unknown outer optimizer '{optimizer}'")

    total: Optional[GradientSet] = None
    task_losses = []
    for task in tasks:
        _check_labels_masked_in(task.labels, task.mask)
        loss, grads = loss_and_grads(task.params, task.x, task.labels, task.mask, model)
        task_losses.append(loss)
        total = grads if total is None else add_grads(total, grads)

    if losses is not None:
        losses.append(float(np.mean(task_losses)))
    return OPTIMIZERS[optimizer](theta0, total, opt_state, beta)


def _oml_meta_test_batch(episode: Episode, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    # same batch size as the all-classes meta-test, drawn from a random class subset
    x_all, _ = episode.test_batch()
    batch_size = x_all.shape[0]
    slots = [slot for group in episode.groups for slot in group]
    n_chosen = int(rng.integers(1, len(slots) + 1))
    chosen = rng.choice(len(slots), size=n_chosen, replace=False)
    pool_x, pool_y = episode.slots_batch([slots[i] for i in sorted(chosen.tolist())], "test")
    picks = rng.integers(pool_x.shape[0], size=batch_size)
    return pool_x[picks], pool_y[picks]


def _meta_train(data: LabeledDataset, cfg: MetaTrainConfig, inner: InnerLoopConfig, model: ModelConfig,
                make_task: Callable[[ParameterSet, np.random.Generator], MetaTask], label: str,
                initial: Optional[ParameterSet] = None) -> ParameterSet:
    if model.head_classes < cfg.scenario.n_final:
        raise ConfigurationError(f"head_classes {model.head_classes} < N={cfg.scenario.n_final}")
    check_dataset(data, cfg.scenario, cfg.k_test)

    rng = np.random.default_rng(cfg.seed)
    theta0 = copy_params(initial) if initial is not None else init_params(model, rng)
    opt_state = AdamState.fresh(theta0)
    losses: List[float] = []
    started = time.perf_counter()
    logger.info(f"{label} meta-training: {cfg.meta_iterations} iterations x {cfg.tasks_per_meta_batch} tasks, "
                f"{cfg.scenario}, seed {cfg.seed}")
    logger.debug(f"{label} model: {describe(model, theta0)}")

    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for iteration in range(1, cfg.meta_iterations + 1):
            task_seeds = rng.integers(0, 2 ** 63 - 1, size=cfg.tasks_per_meta_batch)
            current = theta0
            run = lambda seed: make_task(current, np.random.default_rng(int(seed)))
            tasks = list(executor.map(run, task_seeds)) if executor else [run(seed) for seed in task_seeds]
            theta0, opt_state = fo_meta_update(theta0, tasks, opt_state, cfg.outer_lr, model,
                                               cfg.outer_optimizer, losses)
            if iteration % cfg.log_every == 0 or iteration == cfg.meta_iterations:
                window = losses[-cfg.log_every:]
                logger.info(f"{label} iteration {iteration}/{cfg.meta_iterations}: "
                            f"meta-test loss {np.mean(window):.4f} ({time.perf_counter() - started:.1f}s)")
    finally:
        if executor:
            executor.shutdown()
    return theta0


def mamlcon_meta_train(data: LabeledDataset, cfg: MetaTrainConfig, inner: InnerLoopConfig, model: ModelConfig,
                       initial: Optional[ParameterSet] = None) -> ParameterSet:
    """
    Meta-learn initial weights for continual learning.

    Each iteration samples tasks_per_meta_batch episodes (each with a fresh
    random label map), runs the continual inner loop from a copy of the
    current weights, and meta-tests every adapted model on all of its
    episode's classes.
    """
    def make_task(theta0: ParameterSet, rng: np.random.Generator) -> MetaTask:
        episode = sample_episode(data, cfg.scenario, model.head_classes, rng, cfg.k_test)
        result = mamlcon_inner_loop(theta0, episode, inner, model, rng)
        x, labels = episode.test_batch()
        return MetaTask(result.params, x, labels, result.mask)

    return _meta_train(data, cfg, inner, model, make_task, "MAMLCon", initial)


def oml_meta_train(data: LabeledDataset, cfg: MetaTrainConfig, inner: InnerLoopConfig, model: ModelConfig,
                   initial: Optional[ParameterSet] = None) -> ParameterSet:
    """
    OML baseline: the inner loop trains only the head, classes in sequence,
    and the meta-test batch comes from a random subset of the episode's
    classes. The outer step updates feature extractor and head.
    """
    def make_task(theta0: ParameterSet, rng: np.random.Generator) -> MetaTask:
        episode = sample_episode(data, cfg.scenario, model.head_classes, rng, cfg.k_test)
        result = oml_inner_loop(theta0, episode, inner, model, rng)
        x, labels = _oml_meta_test_batch(episode, rng)
        return MetaTask(result.params, x, labels, result.mask)

    return _meta_train(data, cfg, inner, model, make_task, "OML", initial)


META_TRAINERS = {
    "mamlcon": mamlcon_meta_train,
    "oml": oml_meta_train,
}


# ---------------------------------------------------------------------------
# Deployment
# ---------------------------------------------------------------------------

def _deployed(result: InnerLoopResult) -> Tuple[DeployedModel, List[GroupSnapshot]]:
    return DeployedModel(result.params, result.mask, result.store, result.opt_state), result.trajectory


def continual_deploy(theta_star: ParameterSet, episode: Episode, inner: InnerLoopConfig, model: ModelConfig,
                     rng: np.random.Generator) -> Tuple[DeployedModel, List[GroupSnapshot]]:
    """Test-time continual learning: follow the inner loop from a copy of theta_star."""
    return _deployed(mamlcon_inner_loop(theta_star, episode, inner, model, rng))


def oml_deploy(theta_star: ParameterSet, episode: Episode, inner: InnerLoopConfig, model: ModelConfig,
               rng: np.random.Generator) -> Tuple[DeployedModel, List[GroupSnapshot]]:
    """Test-time OML: head-only sequential adaptation."""
    return _deployed(oml_inner_loop(theta_star, episode, inner, model, rng))


def finetune_baseline(model: ModelConfig, episode: Episode, inner: InnerLoopConfig, rng: np.random.Generator,
                      initial: Optional[ParameterSet] = None) -> Tuple[DeployedModel, List[GroupSnapshot]]:
    """No pre-training: the continual deployment procedure from a fresh initialisation."""
    theta = initial if initial is not None else init_params(model, rng)
    return continual_deploy(theta, episode, inner, model, rng)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ParameterSet, model: ModelConfig, path: Union[str, Path],
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """Store parameters as [size, 1] records named after the parameters, plus a [model] section."""
    expected = param_shapes(model)
    if list(params) != list(expected):
        raise ValidationError("parameters do not match the model config", {"expected": list(expected)})
    records = [ArchiveRecord(name, 0, np.asarray(value, dtype=np.float64).reshape(-1, 1))
               for name, value in params.items()]
    sections = {"model": {key: json.dumps(value) for key, value in model.to_dict().items()}}
    if extra:
        sections["meta"] = {key: json.dumps(value, sort_keys=True) for key, value in extra.items()}
    archive = FeatureArchive(n_coeffs=1, records=records, classes={0: "parameters"}, sections=sections)
    return write_archive(archive, path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[ParameterSet, ModelConfig, Dict[str, Any]]:
    archive = read_archive(path)
    if "model" not in archive.sections:
        raise ValidationError(f"{path} has no [model] section; not a checkpoint")
    model = ModelConfig.from_dict({key: json.loads(value) for key, value in archive.sections["model"].items()})
    shapes = param_shapes(model)
    by_name = {record.record_id: record.features for record in archive.records}
    if sorted(by_name) != sorted(shapes):
        raise ValidationError(f"{path}: checkpoint parameters do not match its model config",
                              {"expected": list(shapes), "got": list(by_name)})
    params = {name: by_name[name].reshape(shape) for name, shape in shapes.items()}
    extra = {key: json.loads(value) for key, value in archive.sections.get("meta", {}).items()}
    return params, model, extra
