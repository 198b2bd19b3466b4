"""Synthetic clip streams for class-incremental experiments.

Each class owns a spatial prototype (a coarse block pattern plus per-pixel
detail) and a moving intensity blob whose sinusoidal trajectory has a
class-specific frequency. Clips of a class differ by the trajectory phase and
additive Gaussian noise. Fine spatial detail makes resolution reduction costly
and the motion makes frame selection non-trivial.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VersionMismatchError,
    ClipFormatError,
)
from .seeding import make_rng

MAGIC = b"CILF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_CLIP_HEADER = struct.Struct("<IIIII")

# key prefixes for per-class generator streams
_CLASS_KEY = 0
_CLIP_KEY = 1
_SPLITS = {"train": 0, "test": 1}


@dataclass(eq=False)
class Clip:
    frames: np.ndarray  # (T, c, h, w) float64
    label: int
    clip_id: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ConfigError(f"clip frames must be (T>=1, c, h, w), got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    def same_as(self, other: "Clip") -> bool:
        """Bitwise equality of label and frames (clip ids are not compared)."""
        return (
            self.label == other.label
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


@dataclass
class TaskDataset:
    index: int  # 1-based task number
    labels: tuple[int, ...]
    train: list[Clip]
    test: list[Clip]


@dataclass
class StreamConfig:
    total_classes: int = 20
    base_classes: int = 2
    classes_per_task: int = 2
    train_clips_per_class: int = 30
    test_clips_per_class: int = 20
    frames_per_clip: int = 32
    channels: int = 3
    height: int = 8
    width: int = 8
    prototype_scale: float = 1.0
    motion_amplitude: float = 2.0
    noise_std: float = 5.0
    seed: int = 0

    @property
    def num_tasks(self) -> int:
        return 1 + (self.total_classes - self.base_classes) // self.classes_per_task

    def validate(self) -> None:
        counts = {
            "total_classes": self.total_classes,
            "base_classes": self.base_classes,
            "classes_per_task": self.classes_per_task,
            "train_clips_per_class": self.train_clips_per_class,
            "test_clips_per_class": self.test_clips_per_class,
            "frames_per_clip": self.frames_per_clip,
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"stream.{name} must be a positive integer, got {value!r}")
        rest = self.total_classes - self.base_classes
        if rest < self.classes_per_task or rest % self.classes_per_task:
            raise ConfigError(
                "stream: base_classes + k * classes_per_task must equal total_classes "
                f"for an integer k >= 1 (got {self.base_classes} + k * "
                f"{self.classes_per_task} = {self.total_classes})"
            )
        if self.noise_std < 0 or self.prototype_scale < 0:
            raise ConfigError("stream: noise_std and prototype_scale must be >= 0")

    def task_labels(self) -> list[tuple[int, ...]]:
        out = [tuple(range(self.base_classes))]
        start = self.base_classes
        while start < self.total_classes:
            out.append(tuple(range(start, start + self.classes_per_task)))
            start += self.classes_per_task
        return out


@dataclass
class ClassPattern:
    """Deterministic per-class ingredients of the generator."""

    prototype: np.ndarray  # (c, h, w)
    frequency: float  # trajectory cycles per clip
    colour: np.ndarray  # (c,) blob gain per channel
    direction: np.ndarray  # (2,) unit vector of the oscillation axis
    blob_width: float = 1.0


def class_pattern(cfg: StreamConfig, label: int) -> ClassPattern:
    rng = make_rng(cfg.seed, _CLASS_KEY, label)
    c, h, w = cfg.channels, cfg.height, cfg.width
    # coarse 2x2 block layout survives pooling down to 2x2 frames
    bh, bw = max(1, h // 2), max(1, w // 2)
    coarse = rng.normal(size=(c, -(-h // bh), -(-w // bw)))
    coarse = np.repeat(np.repeat(coarse, bh, axis=1), bw, axis=2)[:, :h, :w]
    fine = rng.normal(size=(c, h, w))
    prototype = cfg.prototype_scale * (0.25 * coarse + fine)
    frequency = float(rng.uniform(0.5, 3.0))
    colour = rng.uniform(0.5, 1.5, size=c)
    angle = rng.uniform(0.0, np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])
    return ClassPattern(prototype, frequency, colour, direction)


def render_clip(pattern: ClassPattern, phase: float, num_frames: int, amplitude: float) -> np.ndarray:
    """Noise-free frames: prototype plus a blob on a sinusoidal path."""
    c, h, w = pattern.prototype.shape
    t = np.arange(num_frames)
    offset = amplitude * np.sin(2.0 * np.pi * pattern.frequency * t / num_frames + phase)
    cy = (h - 1) / 2.0 + offset * pattern.direction[0]
    cx = (w - 1) / 2.0 + offset * pattern.direction[1]
    yy = np.arange(h)[None, :, None]
    xx = np.arange(w)[None, None, :]
    d2 = (yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2
    blob = np.exp(-d2 / (2.0 * pattern.blob_width**2))  # (T, h, w)
    return pattern.prototype[None] + pattern.colour[None, :, None, None] * blob[:, None]


def _class_clips(cfg: StreamConfig, label: int, split: str, count: int, id_base: int) -> list[Clip]:
    pattern = class_pattern(cfg, label)
    rng = make_rng(cfg.seed, _CLIP_KEY, label, _SPLITS[split])
    clips = []
    for j in range(count):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        frames = render_clip(pattern, phase, cfg.frames_per_clip, cfg.motion_amplitude)
        if cfg.noise_std > 0:
            frames = frames + rng.normal(scale=cfg.noise_std, size=frames.shape)
        clips.append(Clip(frames, label, id_base + j))
    return clips


def generate_stream(cfg: StreamConfig) -> list[TaskDataset]:
    """Build the ordered list of tasks; fully determined by ``cfg.seed``.

    Every class draws from its own keyed generator, so the clips of a class
    do not depend on how classes are partitioned into tasks.
    """
    cfg.validate()
    per_class = cfg.train_clips_per_class + cfg.test_clips_per_class
    tasks = []
    for index, labels in enumerate(cfg.task_labels(), start=1):
        train, test = [], []
        for label in labels:
            base = label * per_class
            train += _class_clips(cfg, label, "train", cfg.train_clips_per_class, base)
            test += _class_clips(
                cfg, label, "test", cfg.test_clips_per_class, base + cfg.train_clips_per_class
            )
        tasks.append(TaskDataset(index, labels, train, test))
    return tasks


def pooling_window(height: int, width: int, delta: float) -> int:
    """Integer window size for resolution factor ``delta`` or ConfigError."""
    if not 0.0 < delta <= 1.0:
        raise ConfigError(f"delta must lie in (0, 1], got {delta}")
    new_h, new_w = delta * height, delta * width
    if abs(new_h - round(new_h)) > 1e-9 or abs(new_w - round(new_w)) > 1e-9 or round(new_h) < 1:
        raise ConfigError(
            f"delta={delta} needs delta*h and delta*w to be positive integers (h={height}, w={width})"
        )
    new_h, new_w = int(round(new_h)), int(round(new_w))
    if height % new_h or width % new_w or height // new_h != width // new_w:
        raise ConfigError(
            f"delta={delta}: h={height} and w={width} must both be divisible by the same "
            f"integer window (got {height}/{new_h}, {width}/{new_w})"
        )
    return height // new_h


def pool_frames(frames: np.ndarray, window: int) -> np.ndarray:
    if window == 1:
        return frames
    *lead, h, w = frames.shape
    blocks = frames.reshape(*lead, h // window, window, w // window, window)
    return blocks.mean(axis=(-3, -1))


def downsample(clip: Clip, delta: float) -> Clip:
    """Average-pool every frame by ``1/delta`` along both spatial axes."""
    _, _, h, w = clip.frames.shape
    window = pooling_window(h, w, delta)
    if window == 1:
        return clip
    return Clip(pool_frames(clip.frames, window), clip.label, clip.clip_id)


def save_clips(path, clips) -> None:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(clips))]
    for clip in clips:
        parts.append(_CLIP_HEADER.pack(clip.label, *clip.frames.shape))
        parts.append(np.ascontiguousarray(clip.frames, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_clips(path) -> list[Clip]:
    """Read a clip file; clip ids are the positions within the file."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MalformedHeaderError(f"{path}: file too short for header ({len(data)} bytes)")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    offset = _HEADER.size
    clips = []
    for i in range(count):
        if offset + _CLIP_HEADER.size > len(data):
            raise TruncatedPayloadError(f"{path}: clip {i} header past end of file")
        label, t, c, h, w = _CLIP_HEADER.unpack_from(data, offset)
        offset += _CLIP_HEADER.size
        nbytes = 8 * t * c * h * w
        if offset + nbytes > len(data):
            raise TruncatedPayloadError(
                f"{path}: clip {i} needs {nbytes} payload bytes, {len(data) - offset} remain"
            )
        frames = np.frombuffer(data, dtype="<f8", count=t * c * h * w, offset=offset)
        offset += nbytes
        clips.append(Clip(frames.reshape(t, c, h, w).astype(np.float64), label, i))
    if offset != len(data):
        raise ClipFormatError(f"{path}: {len(data) - offset} trailing bytes after {count} clips")
    return clips
