"""Central finite-difference audit of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datagen import Clip
from .losses import AgentConfig, Calibration, ReplayMode, ce_loss, replay_loss
from .nn_core import ModelState, backward_batch, expand_head, forward_batch, init_model
from .seeding import make_rng
from .trainer import prepare_inputs, with_calibration

LOSS_MODES = (
    "ce",
    "kd",
    "kd_epe",
    "ls",
    "sc_agent:uniform",
    "sc_agent:random",
    "sc_agent:teacher",
    "sc_agent:learnable",
    "sc_agent:frozen",
)

_CALIBRATION_DRAW_SEED = 12345


def _parse_mode(loss_mode: str):
    if loss_mode == "ce":
        return None, None
    mode, _, calib = loss_mode.partition(":")
    return ReplayMode(mode), Calibration(calib) if calib else None


def objective(
    model: ModelState,
    inputs: np.ndarray,
    labels,
    loss_mode: str,
    num_old: int,
    lam: float = 0.5,
    agent: AgentConfig | None = None,
    teacher: ModelState | None = None,
):
    """Loss and analytic gradients for one batch under ``loss_mode``.

    Random calibration draws come from a fixed-seed generator so repeated
    evaluations see the same calibration vectors.
    """
    labels = np.asarray(labels)
    logits, cache = forward_batch(model, inputs)
    mode, calib = _parse_mode(loss_mode)
    if mode is None:
        loss, grad = ce_loss(logits, labels)
        b = len(labels)
        return float(loss.mean()), backward_batch(model, cache, grad / b)
    agent = agent or AgentConfig()
    if calib is not None:
        agent = replace(agent, calibration=calib)
    if mode is ReplayMode.SC_AGENT and agent.has_raw:
        agent = replace(agent, learnable_raw=model.params["calib_raw"])
    teacher_logits = None if teacher is None else forward_batch(teacher, inputs)[0]
    res = replay_loss(
        mode,
        logits,
        labels,
        num_old,
        lam,
        agent,
        teacher_logits=teacher_logits,
        rng=make_rng(_CALIBRATION_DRAW_SEED),
    )
    grads = backward_batch(model, cache, res.grad_logits)
    if res.grad_raw is not None:
        grads["calib_raw"] = res.grad_raw
    return res.loss, grads


def finite_diff_audit(
    model: ModelState,
    clips,
    labels,
    loss_mode: str,
    num_old: int | None = None,
    lam: float = 0.5,
    agent: AgentConfig | None = None,
    teacher: ModelState | None = None,
    delta: float = 1.0,
    segments: int = 8,
    step: float = 1e-5,
    objective_fn=None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    For every parameter tensor the error is ``max|analytic - numeric|`` over
    ``max(1e-12, max|numeric|)``; the function returns the largest of these.
    """
    if isinstance(clips, Clip):
        clips, labels = [clips], [labels]
    objective_fn = objective_fn or objective
    inputs = prepare_inputs(clips, segments, delta)
    num_old = model.num_classes if num_old is None else num_old
    args = (inputs, labels, loss_mode, num_old, lam, agent, teacher)
    _, analytic = objective_fn(model, *args)
    worst = 0.0
    for name, grad in analytic.items():
        base = model.params[name]
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            values = []
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped.reshape(-1)[i] += sign * step
                probe = replace(model, params={**model.params, name: bumped})
                values.append(objective_fn(probe, *args)[0])
            flat[i] = (values[0] - values[1]) / (2.0 * step)
        err = np.max(np.abs(grad - numeric)) / max(1e-12, float(np.max(np.abs(numeric))))
        worst = max(worst, float(err))
    return worst


@dataclass
class AuditCase:
    model: ModelState
    teacher: ModelState
    clips: list
    labels: list
    num_old: int
    delta: float
    segments: int


def audit_case(seed: int) -> AuditCase:
    """Small random model/teacher/batch triple used by the gradient audit.

    Geometry varies with the seed: hidden layer on or off, full or halved
    resolution, and clips shorter or longer than the segment count.
    """
    rng = make_rng(seed, 99)
    hidden = int(rng.choice([0, 5]))
    frame_shape = (2, 4, 4)
    num_old, num_new = int(rng.integers(2, 5)), 2
    teacher = init_model(frame_shape, 4, num_old, rng, hidden=hidden)
    for name in teacher.params:
        teacher.params[name] = teacher.params[name] + rng.normal(scale=0.3, size=teacher.params[name].shape)
    model = expand_head(teacher.copy(), num_new, rng)
    for name in model.params:
        model.params[name] = model.params[name] + rng.normal(scale=0.3, size=model.params[name].shape)
    model = with_calibration(model, num_old, rng)
    model.params["calib_raw"] = rng.normal(size=num_old)
    delta = float(rng.choice([1.0, 0.5]))
    segments = int(rng.integers(2, 5))
    batch = int(rng.integers(1, 4))
    clips, labels = [], []
    for _ in range(batch):
        label = int(rng.integers(0, num_old))
        frames = rng.normal(size=(int(rng.integers(1, 7)), *frame_shape))
        clips.append(Clip(frames, label))
        labels.append(label)
    return AuditCase(model, teacher, clips, labels, num_old, delta, segments)


def run_audit(seeds, modes=LOSS_MODES, lam: float = 0.5, agent: AgentConfig | None = None, objective_fn=None):
    """Worst relative error per loss mode over the seeded audit cases."""
    agent = agent or AgentConfig()
    worst = {mode: 0.0 for mode in modes}
    for seed in seeds:
        case = audit_case(seed)
        for mode in modes:
            err = finite_diff_audit(
                case.model,
                case.clips,
                case.labels,
                mode,
                num_old=case.num_old,
                lam=lam,
                agent=agent,
                teacher=case.teacher,
                delta=case.delta,
                segments=case.segments,
                objective_fn=objective_fn,
            )
            worst[mode] = max(worst[mode], err)
    return worst
