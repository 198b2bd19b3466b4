"""Supervision signals for base training and rehearsal.

All per-sample functions accept a single vector or a (B, C) batch and return
per-sample losses with gradients of the same shape as the logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def _log_softmax(o):
    shifted = o - o.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class ReplayMode(str, Enum):
    FINETUNE = "finetune"
    KD = "kd"
    KD_EPE = "kd_epe"
    LS = "ls"
    SC_AGENT = "sc_agent"


class Calibration(str, Enum):
    UNIFORM = "uniform"
    RANDOM = "random"
    TEACHER = "teacher"
    LEARNABLE = "learnable"
    FROZEN = "frozen"


@dataclass
class AgentConfig:
    alpha: float = 0.2
    calibration: Calibration = Calibration.FROZEN
    uniform_value: float = 0.5
    ls_epsilon: float = 0.1
    learnable_raw: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.calibration = Calibration(self.calibration)
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.uniform_value <= 1.0:
            raise ConfigError(f"uniform calibration value must lie in [0, 1], got {self.uniform_value}")
        if not 0.0 <= self.ls_epsilon < 1.0:
            raise ConfigError(f"ls_epsilon must lie in [0, 1), got {self.ls_epsilon}")

    @property
    def needs_teacher(self) -> bool:
        return self.calibration is Calibration.TEACHER

    @property
    def has_raw(self) -> bool:
        return self.calibration in (Calibration.LEARNABLE, Calibration.FROZEN)


def init_calibration_raw(dims: int, rng) -> np.ndarray:
    """Small random start for learnable calibration parameters."""
    return 0.01 * rng.random(dims)


def calibration_input(cfg: AgentConfig, dims: int, teacher_logits=None, rng=None, batch=None):
    """Calibration vector(s) in [0, 1]^dims.

    ``batch`` asks for a (batch, dims) array; per-sample variation only exists
    in the random and teacher modes.
    """
    mode = cfg.calibration
    shape = (dims,) if batch is None else (batch, dims)
    if mode is Calibration.UNIFORM:
        return np.full(shape, float(cfg.uniform_value))
    if mode is Calibration.RANDOM:
        if rng is None:
            raise ConfigError("random calibration needs an rng")
        return sigmoid(rng.standard_normal(shape))
    if mode is Calibration.TEACHER:
        if teacher_logits is None:
            raise ConfigError("teacher calibration needs teacher logits")
        t = np.asarray(teacher_logits, dtype=np.float64)
        if t.shape[-1] != dims:
            raise ConfigError(f"teacher logits have {t.shape[-1]} entries, expected {dims}")
        return sigmoid(t)
    raw = cfg.learnable_raw
    if raw is None or raw.shape != (dims,):
        raise ConfigError(f"{mode.value} calibration needs learnable_raw of length {dims}")
    return np.broadcast_to(sigmoid(raw), shape).copy()


def _check_onehot(y):
    ok = np.all((y == 0) | (y == 1), axis=-1) & (y.sum(axis=-1) == 1)
    if not np.all(ok):
        raise ConfigError("ground-truth label must be one-hot")


def teacher_agent_label(y_onehot, p, alpha: float) -> np.ndarray:
    """Soft label ``(y + p)**alpha`` normalised to the simplex."""
    y = np.asarray(y_onehot, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    _check_onehot(y)
    if np.any(p < 0) or np.any(p > 1):
        raise ConfigError("calibration input must lie in [0, 1]")
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    a = (y + p) ** alpha
    return a / a.sum(axis=-1, keepdims=True)


def teacher_agent_label_vjp(y_onehot, p, alpha: float, grad_chi) -> np.ndarray:
    """Pull a gradient w.r.t. the soft label back to the calibration input."""
    z = np.asarray(y_onehot, dtype=np.float64) + np.asarray(p, dtype=np.float64)
    chi = teacher_agent_label(y_onehot, p, alpha)
    g = np.asarray(grad_chi, dtype=np.float64)
    centred = g - (g * chi).sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(z > 0, alpha * chi * centred / z, 0.0)
    return out


def ls_label(num_classes: int, true_class, epsilon: float) -> np.ndarray:
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1), got {epsilon}")
    onehot = np.eye(num_classes)[np.asarray(true_class)]
    return (1.0 - epsilon) * onehot + epsilon / num_classes


def ce_loss(logits, label):
    """Softmax cross-entropy; gradient is ``softmax(o) - onehot``."""
    o = np.asarray(logits, dtype=np.float64)
    single = o.ndim == 1
    o2 = np.atleast_2d(o)
    lab = np.atleast_1d(np.asarray(label))
    logp = _log_softmax(o2)
    rows = np.arange(o2.shape[0])
    loss = -logp[rows, lab]
    grad = np.exp(logp)
    grad[rows, lab] -= 1.0
    return (loss[0], grad[0]) if single else (loss, grad)


def sc_loss(logits, chi):
    """``-sum_c chi_c log sigmoid(o_c)`` with gradient ``chi_c (sigmoid(o_c) - 1)``."""
    o = np.asarray(logits, dtype=np.float64)
    chi = np.asarray(chi, dtype=np.float64)
    if o.shape[-1] != chi.shape[-1]:
        raise ConfigError(f"logits ({o.shape[-1]}) and soft label ({chi.shape[-1]}) differ in length")
    loss = -(chi * log_sigmoid(o)).sum(axis=-1)
    grad = chi * (sigmoid(o) - 1.0)
    return loss, grad


def kd_loss(student_logits, teacher_logits):
    """``-sum_c sigmoid(t_c) log sigmoid(s_c)``; the teacher side is constant."""
    return sc_loss(student_logits, sigmoid(teacher_logits))


def epe_filter(teacher_logits, labels) -> np.ndarray:
    """True where the teacher's top class equals the label."""
    t = np.atleast_2d(np.asarray(teacher_logits))
    labels = np.atleast_1d(np.asarray(labels))
    if t.shape[0] != labels.shape[0]:
        raise ConfigError("teacher logits and labels disagree on batch size")
    return np.argmax(t, axis=1) == labels


@dataclass
class ReplayResult:
    loss: float  # batch mean
    grad_logits: np.ndarray  # (B, C_all), already divided by B
    grad_raw: np.ndarray | None  # (C_old,) for learnable calibration
    ce_part: float
    replay_part: float


def replay_loss(
    mode,
    logits,
    labels,
    num_old: int,
    lam: float,
    agent: AgentConfig,
    teacher_logits=None,
    rng=None,
) -> ReplayResult:
    """Batch-mean ``lam * CE(all classes) + (1 - lam) * X(old classes)``.

    X is KD, EPE-masked KD, SC against a label-smoothed target, or SC against
    the teacher-agent label depending on ``mode``.
    """
    mode = ReplayMode(mode)
    o = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    b = o.shape[0]
    if mode is ReplayMode.FINETUNE:
        return ReplayResult(0.0, np.zeros_like(o), None, 0.0, 0.0)
    if b == 0:
        raise ConfigError(f"{mode.value} replay needs exemplars")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if np.any(labels >= num_old):
        raise ConfigError("exemplar labels must belong to old classes")
    needs_teacher = mode in (ReplayMode.KD, ReplayMode.KD_EPE) or (
        mode is ReplayMode.SC_AGENT and agent.needs_teacher
    )
    if needs_teacher:
        if teacher_logits is None:
            raise ConfigError(f"{mode.value} replay needs a teacher snapshot")
        teacher_logits = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))[:, :num_old]

    ce, ce_grad = ce_loss(o, labels)
    old = o[:, :num_old]
    grad_raw = None
    if mode in (ReplayMode.KD, ReplayMode.KD_EPE):
        x, x_grad = kd_loss(old, teacher_logits)
        if mode is ReplayMode.KD_EPE:
            mask = epe_filter(teacher_logits, labels).astype(np.float64)
            x, x_grad = x * mask, x_grad * mask[:, None]
    elif mode is ReplayMode.LS:
        x, x_grad = sc_loss(old, ls_label(num_old, labels, agent.ls_epsilon))
    else:
        onehot = np.eye(num_old)[labels]
        p = calibration_input(agent, num_old, teacher_logits=teacher_logits, rng=rng, batch=b)
        chi = teacher_agent_label(onehot, p, agent.alpha)
        x, x_grad = sc_loss(old, chi)
        if agent.calibration is Calibration.LEARNABLE:
            g_chi = -log_sigmoid(old) * ((1.0 - lam) / b)
            g_p = teacher_agent_label_vjp(onehot, p, agent.alpha, g_chi)
            grad_raw = (g_p * p * (1.0 - p)).sum(axis=0)

    grad = lam * ce_grad
    grad[:, :num_old] += (1.0 - lam) * x_grad
    ce_mean, x_mean = float(ce.mean()), float(x.mean())
    return ReplayResult(
        lam * ce_mean + (1.0 - lam) * x_mean, grad / b, grad_raw, ce_mean, x_mean
    )


def table1_conf_to_logit(conf):
    return 2.0 * conf - 1.0


TABLE1_CONFIDENCES = (0.9, 0.8, 0.2, 0.1)


def table1_diagnostic(convention=table1_conf_to_logit):
    """Rows ``(conf, ce_grad, ls_grad)`` for a single binary logit unit.

    The confidence is mapped to a logit by ``convention`` (``2*conf - 1`` by
    default); the CE target is 1 and the LS target is 0.9.
    """
    rows = []
    for conf in TABLE1_CONFIDENCES:
        s = float(sigmoid(np.array([convention(conf)]))[0])
        rows.append((conf, s - 1.0, s - 0.9))
    return rows
