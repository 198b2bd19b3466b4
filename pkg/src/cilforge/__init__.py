"""Rehearsal-based class-incremental learning with teacher-agent soft labels."""

__version__ = "0.1.0"

from .datagen import Clip, StreamConfig, TaskDataset, downsample, generate_stream, load_clips, save_clips
from .losses import AgentConfig, Calibration, ReplayMode, teacher_agent_label
from .memory import EpisodicMemory, herding_select, update_memory
from .metrics import MetricsReport, summarize
from .nn_core import ModelState, init_model
from .sampler import refine_exemplar, select_keyframes
from .trainer import SessionConfig, run_experiment

__all__ = [
    "AgentConfig",
    "Calibration",
    "Clip",
    "EpisodicMemory",
    "MetricsReport",
    "ModelState",
    "ReplayMode",
    "SessionConfig",
    "StreamConfig",
    "TaskDataset",
    "downsample",
    "generate_stream",
    "herding_select",
    "init_model",
    "load_clips",
    "refine_exemplar",
    "run_experiment",
    "save_clips",
    "select_keyframes",
    "summarize",
    "teacher_agent_label",
    "update_memory",
]
