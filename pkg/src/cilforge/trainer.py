"""Base and incremental training sessions and the end-to-end experiment loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import TaskDataset, pool_frames, pooling_window
from .errors import ConfigError, NonFiniteError
from .losses import AgentConfig, ReplayMode, ce_loss, init_calibration_raw, replay_loss
from .memory import EpisodicMemory, update_memory
from .metrics import MetricsReport, summarize
from .nn_core import (
    ModelState,
    adam_step,
    backward_batch,
    clip_inputs,
    expand_head,
    forward_batch,
    init_model,
    multiplies_per_clip,
)
from .seeding import derive_rng

log = logging.getLogger(__name__)


@dataclass
class SessionConfig:
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 12
    lam: float = 0.5
    mode: ReplayMode = ReplayMode.SC_AGENT
    agent: AgentConfig = field(default_factory=AgentConfig)
    delta: float = 0.5
    delta_everywhere: bool = False
    keyframes: int = 16
    gamma: float = 1.0
    per_class: int = 20
    multiplier: int = 1
    segments: int = 8
    embed_dim: int = 32
    hidden: int = 0
    seed: int = 0

    def __post_init__(self):
        self.mode = ReplayMode(self.mode)
        if self.epochs < 0 or self.batch_size < 1 or self.segments < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and segments >= 1 are required")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")

    @property
    def base_delta(self) -> float:
        return self.delta if self.delta_everywhere else 1.0

    @property
    def needs_teacher(self) -> bool:
        return self.mode in (ReplayMode.KD, ReplayMode.KD_EPE) or (
            self.mode is ReplayMode.SC_AGENT and self.agent.needs_teacher
        )


def prepare_inputs(clips, segments: int, delta: float) -> np.ndarray:
    """Segment frames of ``clips`` pooled to resolution ``delta``: (B, S, c, h', w')."""
    x = clip_inputs(clips, segments)
    return pool_frames(x, pooling_window(x.shape[-2], x.shape[-1], delta))


def _labels(clips) -> np.ndarray:
    return np.array([c.label for c in clips], dtype=np.int64)


def _batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_finite(value, where: str):
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss at {where}")


def train_base(model: ModelState, task: TaskDataset, cfg: SessionConfig, rng=None, history=None) -> ModelState:
    """Cross-entropy training on the base task."""
    if model.num_classes != len(task.labels):
        raise ConfigError(f"base head has {model.num_classes} columns for {len(task.labels)} classes")
    rng = rng if rng is not None else derive_rng(cfg.seed, "batching")
    x = prepare_inputs(task.train, cfg.segments, cfg.base_delta)
    y = _labels(task.train)
    for epoch in range(cfg.epochs):
        total = 0.0
        for b, idx in enumerate(_batches(len(y), cfg.batch_size, rng)):
            logits, cache = forward_batch(model, x[idx])
            loss, grad = ce_loss(logits, y[idx])
            loss = float(loss.mean())
            _check_finite(loss, f"task {task.index} epoch {epoch + 1} batch {b + 1}")
            model = adam_step(model, backward_batch(model, cache, grad / len(idx)), cfg.lr)
            total += loss * len(idx)
        if history is not None:
            history.append({"task": task.index, "epoch": epoch + 1, "loss": total / len(y)})
    return model


def snapshot_teacher(model: ModelState) -> ModelState:
    """Frozen deep copy of the current model."""
    return model.copy()


def rehearsal_indices(size: int, batch_size: int, rng) -> np.ndarray:
    if size == 0:
        raise ConfigError("rehearsal needs a non-empty memory")
    return rng.integers(0, size, size=batch_size)


def with_calibration(model: ModelState, num_old: int, rng) -> ModelState:
    """Ensure a learnable calibration vector of length ``num_old``.

    A fresh vector starts at ``0.01 * U[0, 1)``; later growth appends zeros.
    """
    params, m1, m2 = dict(model.params), dict(model.moment1), dict(model.moment2)
    raw = params.get("calib_raw")
    if raw is None:
        params["calib_raw"] = init_calibration_raw(num_old, rng)
        m1["calib_raw"] = np.zeros(num_old)
        m2["calib_raw"] = np.zeros(num_old)
    elif raw.shape[0] < num_old:
        pad = np.zeros(num_old - raw.shape[0])
        params["calib_raw"] = np.concatenate([raw, pad])
        m1["calib_raw"] = np.concatenate([m1["calib_raw"], pad])
        m2["calib_raw"] = np.concatenate([m2["calib_raw"], pad])
    else:
        return model
    return replace(model, params=params, moment1=m1, moment2=m2)


def train_incremental(
    model: ModelState,
    task: TaskDataset,
    memory: EpisodicMemory,
    cfg: SessionConfig,
    teacher: ModelState | None = None,
    rngs: dict | None = None,
    history=None,
) -> ModelState:
    """One incremental session: new-class CE plus the configured replay objective.

    Each step pairs a shuffled batch of new clips with an equally sized
    with-replacement draw from memory; both pass through the network together
    and their gradients are summed.
    """
    rngs = rngs or {k: derive_rng(cfg.seed, k) for k in ("batching", "calibration")}
    num_old = model.num_classes - len(task.labels)
    if num_old < 1:
        raise ConfigError("incremental session needs old classes; expand the head first")
    x_new = prepare_inputs(task.train, cfg.segments, cfg.delta)
    y_new = _labels(task.train)

    replaying = cfg.mode is not ReplayMode.FINETUNE
    agent = cfg.agent
    use_raw = cfg.mode is ReplayMode.SC_AGENT and agent.has_raw
    if replaying:
        pool = memory.all_exemplars()
        if not pool:
            raise ConfigError(f"{cfg.mode.value} replay needs a populated memory")
        x_mem = prepare_inputs(pool, cfg.segments, cfg.delta)
        y_mem = _labels(pool)
        t_mem = None
        if cfg.needs_teacher:
            if teacher is None:
                raise ConfigError(f"{cfg.mode.value} replay needs a teacher snapshot")
            t_mem = forward_batch(teacher, x_mem)[0][:, :num_old]
        if use_raw:
            model = with_calibration(model, num_old, rngs["calibration"])

    for epoch in range(cfg.epochs):
        total = 0.0
        for b, idx in enumerate(_batches(len(y_new), cfg.batch_size, rngs["batching"])):
            nb = len(idx)
            if not replaying:
                logits, cache = forward_batch(model, x_new[idx])
                loss, grad = ce_loss(logits, y_new[idx])
                loss = float(loss.mean())
                grad = grad / nb
                raw_grad = None
            else:
                ridx = rehearsal_indices(len(y_mem), cfg.batch_size, rngs["batching"])
                logits, cache = forward_batch(model, np.concatenate([x_new[idx], x_mem[ridx]]))
                ce_new, g_new = ce_loss(logits[:nb], y_new[idx])
                if use_raw:
                    agent = replace(agent, learnable_raw=model.params["calib_raw"][:num_old])
                rep = replay_loss(
                    cfg.mode,
                    logits[nb:],
                    y_mem[ridx],
                    num_old,
                    cfg.lam,
                    agent,
                    teacher_logits=None if t_mem is None else t_mem[ridx],
                    rng=rngs["calibration"],
                )
                loss = float(ce_new.mean()) + rep.loss
                grad = np.concatenate([g_new / nb, rep.grad_logits])
                raw_grad = rep.grad_raw
            _check_finite(loss, f"task {task.index} epoch {epoch + 1} batch {b + 1}")
            grads = backward_batch(model, cache, grad)
            if raw_grad is not None:
                grads["calib_raw"] = raw_grad
            model = adam_step(model, grads, cfg.lr)
            total += loss * nb
        if history is not None:
            history.append({"task": task.index, "epoch": epoch + 1, "loss": total / len(y_new)})
    return model


def evaluate(model: ModelState, tasks, cfg: SessionConfig, delta: float | None = None) -> list[float]:
    """Percent of test clips whose argmax over all seen classes is correct, per task."""
    delta = cfg.delta if delta is None else delta
    row = []
    for task in tasks:
        if not task.test:
            raise ConfigError(f"task {task.index} has no test clips")
        logits, _ = forward_batch(model, prepare_inputs(task.test, cfg.segments, delta))
        row.append(100.0 * float(np.mean(np.argmax(logits, axis=1) == _labels(task.test))))
    return row


@dataclass
class ExperimentResult:
    matrix: list[list[float]]
    metrics: MetricsReport
    history: list[dict]
    meta: dict
    model: ModelState
    memory: EpisodicMemory


def run_experiment(tasks: list[TaskDataset], cfg: SessionConfig) -> ExperimentResult:
    """Base session, then expand / snapshot / train / store / evaluate per task."""
    if not tasks:
        raise ConfigError("empty stream")
    frame_shape = tasks[0].train[0].frame_shape
    rngs = {k: derive_rng(cfg.seed, k) for k in ("init", "batching", "calibration", "expand")}
    model = init_model(frame_shape, cfg.embed_dim, len(tasks[0].labels), rngs["init"], cfg.hidden)
    memory = EpisodicMemory(cfg.per_class, cfg.multiplier, cfg.keyframes, cfg.gamma)
    history: list[dict] = []
    matrix: list[list[float]] = []
    step_cost = []

    model = train_base(model, tasks[0], cfg, rngs["batching"], history)
    memory = update_memory(memory, tasks[0], model, cfg.segments)
    matrix.append(evaluate(model, tasks[:1], cfg, cfg.base_delta))
    log.info("task 1: %s", matrix[-1])

    window = pooling_window(frame_shape[1], frame_shape[2], cfg.delta)
    for k, task in enumerate(tasks[1:], start=2):
        model = expand_head(model, len(task.labels), rngs["expand"])
        teacher = snapshot_teacher(model) if cfg.needs_teacher else None
        model = train_incremental(model, task, memory, cfg, teacher, rngs, history)
        memory = update_memory(memory, task, model, cfg.segments)
        matrix.append(evaluate(model, tasks[:k], cfg, cfg.delta))
        per_step = 2 * cfg.batch_size if cfg.mode is not ReplayMode.FINETUNE else cfg.batch_size
        step_cost.append(per_step * multiplies_per_clip(model, window, cfg.segments))
        log.info("task %d: %s", k, matrix[-1])

    meta = {
        "eval_delta_base": cfg.base_delta,
        "eval_delta_incremental": cfg.delta,
        "multiplies_per_step": step_cost[-1] if step_cost else None,
        "multiplies_per_step_by_task": step_cost,
        "memory_exemplars": len(memory),
    }
    return ExperimentResult(matrix, summarize(matrix), history, meta, model, memory)
