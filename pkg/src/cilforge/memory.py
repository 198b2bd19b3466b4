"""Per-class episodic memory filled by herding over clip embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Clip, TaskDataset, save_clips
from .errors import CILError, ConfigError
from .nn_core import ModelState, clip_inputs, embed_batch
from .sampler import refine_exemplar


_TIE_RTOL = 1e-12


def herding_select(embeddings, m: int) -> np.ndarray:
    """Greedy herding without replacement.

    At step ``k`` the candidate whose addition brings the running exemplar mean
    closest to the class mean is taken; ties go to the lowest index. The
    returned order is the selection order, so any prefix is itself a valid
    (smaller) exemplar set.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError("embeddings must be a 2-D array (count, dim)")
    count = x.shape[0]
    if m > count or m < 0:
        raise ConfigError(f"cannot herd {m} exemplars from {count} candidates")
    mu = x.mean(axis=0)
    available = np.ones(count, dtype=bool)
    running = np.zeros(x.shape[1])
    chosen = np.empty(m, dtype=np.int64)
    # distances within rounding of the minimum count as ties (lowest index wins)
    tol = _TIE_RTOL * max(1.0, float((x**2).sum(axis=1).max()))
    for k in range(1, m + 1):
        dist = (((running + x) / k - mu) ** 2).sum(axis=1)
        dist[~available] = np.inf
        i = int(np.flatnonzero(dist <= dist.min() + tol)[0])
        chosen[k - 1] = i
        available[i] = False
        running += x[i]
    return chosen


@dataclass
class EpisodicMemory:
    per_class: int = 20
    multiplier: int = 1
    keyframes: int = 16
    gamma: float = 1.0
    exemplars: dict[int, list[Clip]] = field(default_factory=dict)

    @property
    def capacity_per_class(self) -> int:
        return self.per_class * self.multiplier

    @property
    def classes(self) -> list[int]:
        return sorted(self.exemplars)

    def __len__(self) -> int:
        return sum(len(v) for v in self.exemplars.values())

    def all_exemplars(self) -> list[Clip]:
        return [clip for label in self.classes for clip in self.exemplars[label]]

    def check_budget(self) -> None:
        for label, clips in self.exemplars.items():
            if len(clips) > self.capacity_per_class:
                raise CILError(
                    f"memory invariant breached: class {label} holds {len(clips)} "
                    f"> {self.capacity_per_class} exemplars"
                )

    def dump(self, directory) -> None:
        """Write exemplars in the clip file format plus a class -> clip id index."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_clips(directory / "memory.cilf", self.all_exemplars())
        index = {str(label): [c.clip_id for c in self.exemplars[label]] for label in self.classes}
        (directory / "memory_index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def update_memory(
    memory: EpisodicMemory, task: TaskDataset, model: ModelState, segments: int = 8
) -> EpisodicMemory:
    """Herd exemplars for each class of ``task`` and store their key-frame versions.

    Classes already in memory are left untouched. When a class has fewer
    training clips than the budget, all of them are kept.
    """
    by_class: dict[int, list[Clip]] = {}
    for clip in task.train:
        by_class.setdefault(clip.label, []).append(clip)
    stored = dict(memory.exemplars)
    for label in sorted(by_class):
        if label in stored:
            continue
        clips = by_class[label]
        emb = embed_batch(model, clip_inputs(clips, segments))
        budget = min(memory.capacity_per_class, len(clips))
        order = herding_select(emb, budget)
        stored[label] = [refine_exemplar(clips[i], memory.keyframes, memory.gamma) for i in order]
    out = EpisodicMemory(memory.per_class, memory.multiplier, memory.keyframes, memory.gamma, stored)
    out.check_budget()
    return out


def rehearsal_batch(memory: EpisodicMemory, batch_size: int, rng) -> list[Clip]:
    """Uniform draw with replacement over all stored exemplars."""
    pool = memory.all_exemplars()
    if not pool:
        raise CILError("rehearsal batch requested from an empty memory")
    idx = rng.integers(0, len(pool), size=batch_size)
    return [pool[i] for i in idx]
