"""Fixed-count key-frame selection from cumulative inter-frame motion.

The normalised cumulative frame-difference energy is split into ``n`` equal
mass bins; each bin keeps the first frame whose cumulative value reaches the
bin midpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import Clip
from .errors import ConfigError


_TIE_TOL = 1e-12


def identity_mapping(frames: np.ndarray) -> np.ndarray:
    return frames.reshape(frames.shape[0], -1)


@dataclass
class MotionProfile:
    energies: np.ndarray  # (T-1,)
    total: float
    cumulative: np.ndarray  # (T,), c[0] = 0
    degenerate: bool


def motion_profile(clip, gamma: float = 1.0, mapping=identity_mapping) -> MotionProfile:
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    frames = clip.frames if isinstance(clip, Clip) else np.asarray(clip, dtype=np.float64)
    feats = mapping(frames)
    energies = np.abs(feats[1:] - feats[:-1]).sum(axis=1)
    if gamma != 1.0:
        energies = energies**gamma
    running = np.zeros(energies.shape[0] + 1)
    running[1:] = energies.cumsum()
    total = float(running[-1])
    if total > 0:
        return MotionProfile(energies, total, running / total, False)
    return MotionProfile(energies, total, running, True)


def select_keyframes(clip, n: int, gamma: float = 1.0, mapping=identity_mapping) -> np.ndarray:
    """Sorted, distinct indices of ``n`` key frames.

    A bin whose first qualifying frame is already taken moves to the next free
    frame; the choice is capped so that the remaining bins still fit before the
    last frame.
    """
    profile = motion_profile(clip, gamma, mapping)
    total_frames = profile.cumulative.shape[0]
    if not 1 <= n <= total_frames:
        raise ConfigError(f"cannot select {n} distinct key frames from a {total_frames}-frame clip")
    if profile.degenerate:
        # floor(T * (k - 1/2) / n) in integer arithmetic
        return np.array([((2 * k - 1) * total_frames) // (2 * n) for k in range(1, n + 1)], dtype=np.int64)
    # a share within rounding of a midpoint counts as reaching it, so rescaled
    # clips resolve exact ties the same way
    midpoints = [(k - 0.5) / n - _TIE_TOL for k in range(1, n + 1)]
    first = profile.cumulative.searchsorted(midpoints, side="left").tolist()
    chosen = []
    prev = -1
    for k in range(n):
        prev = min(max(first[k], prev + 1), total_frames - n + k)
        chosen.append(prev)
    return np.array(chosen, dtype=np.int64)


def refine_exemplar(clip: Clip, n: int, gamma: float = 1.0, mapping=identity_mapping) -> Clip:
    idx = select_keyframes(clip, n, gamma, mapping)
    if idx.shape[0] == clip.num_frames:
        return clip
    return Clip(clip.frames[idx], clip.label, clip.clip_id)
