"""Segment-consensus clip classifier with hand-written gradients.

The extractor maps a flattened frame to an embedding (one linear layer, or a
tanh hidden layer followed by a linear layer). A clip embedding is the mean of
the frame embeddings at the segment positions; the head is a growable linear
layer over that mean.

Weights are defined on full-resolution frames. A frame pooled by an integer
window ``s`` is fed through the weights summed over each ``s x s`` block,
which equals nearest-upsampling the pooled frame and applying the full
weights, but costs ``s**2`` fewer multiplies.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, NonFiniteError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
HEAD_INIT_STD = 0.01


@dataclass(eq=False)
class ModelState:
    frame_shape: tuple[int, int, int]
    embed_dim: int
    hidden: int
    params: dict[str, np.ndarray]
    moment1: dict[str, np.ndarray] = field(default_factory=dict)
    moment2: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, value in self.params.items():
            self.moment1.setdefault(name, np.zeros_like(value))
            self.moment2.setdefault(name, np.zeros_like(value))

    @property
    def input_dim(self) -> int:
        c, h, w = self.frame_shape
        return c * h * w

    @property
    def num_classes(self) -> int:
        return self.params["head_w"].shape[1]

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def tree_bytes(self) -> bytes:
        """Concatenated raw bytes of every array, for bitwise comparisons."""
        parts = []
        for store in (self.params, self.moment1, self.moment2):
            for name in sorted(store):
                parts.append(name.encode())
                parts.append(np.ascontiguousarray(store[name]).tobytes())
        return b"".join(parts)


def init_model(frame_shape, embed_dim: int, num_classes: int, rng, hidden: int = 0) -> ModelState:
    c, h, w = frame_shape
    d = c * h * w
    if embed_dim < 1 or num_classes < 1 or hidden < 0:
        raise ConfigError("embed_dim and num_classes must be positive, hidden >= 0")
    params = {}
    if hidden:
        params["w1"] = rng.normal(scale=1.0 / np.sqrt(d), size=(d, hidden))
        params["b1"] = np.zeros(hidden)
        params["w2"] = rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, embed_dim))
        params["b2"] = np.zeros(embed_dim)
    else:
        params["w1"] = rng.normal(scale=1.0 / np.sqrt(d), size=(d, embed_dim))
        params["b1"] = np.zeros(embed_dim)
    params["head_w"] = rng.normal(scale=HEAD_INIT_STD, size=(embed_dim, num_classes))
    params["head_b"] = np.zeros(num_classes)
    return ModelState(tuple(frame_shape), embed_dim, hidden, params)


def segment_indices(num_frames: int, segments: int) -> np.ndarray:
    """Frame index per segment: the segment centre, or cyclic repeats for short clips."""
    if num_frames < 1 or segments < 1:
        raise ConfigError("need at least one frame and one segment")
    if num_frames < segments:
        return np.arange(segments) % num_frames
    return ((np.arange(segments) + 0.5) * num_frames / segments).astype(np.int64)


def clip_inputs(clips, segments: int) -> np.ndarray:
    """Stack the segment frames of ``clips`` into a (B, S, c, h, w) array."""
    out = [clip.frames[segment_indices(clip.num_frames, segments)] for clip in clips]
    return np.stack(out)


def _window(model: ModelState, spatial) -> int:
    c, h, w = model.frame_shape
    cc, hh, ww = spatial
    if cc != c or hh < 1 or ww < 1 or h % hh or w % ww or h // hh != w // ww:
        raise ConfigError(
            f"frame shape {tuple(spatial)} does not match extractor input {model.frame_shape} "
            "(channels must agree and h, w must be divisible by one integer window)"
        )
    return h // hh


def _fold(w1: np.ndarray, frame_shape, window: int) -> np.ndarray:
    if window == 1:
        return w1
    c, h, w = frame_shape
    out = w1.shape[1]
    blocks = w1.reshape(c, h // window, window, w // window, window, out)
    return blocks.sum(axis=(2, 4)).reshape(-1, out)


def _unfold(grad: np.ndarray, frame_shape, window: int) -> np.ndarray:
    if window == 1:
        return grad
    c, h, w = frame_shape
    out = grad.shape[1]
    g = grad.reshape(c, h // window, 1, w // window, 1, out)
    return np.broadcast_to(g, (c, h // window, window, w // window, window, out)).reshape(-1, out)


@dataclass
class _Cache:
    x: np.ndarray  # (B, S, D')
    window: int
    hidden_act: np.ndarray | None  # (B, S, H) tanh outputs
    embedding: np.ndarray  # (B, E)


def _embed(model: ModelState, inputs: np.ndarray) -> _Cache:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 5:
        raise ConfigError(f"expected (B, S, c, h, w) inputs, got shape {inputs.shape}")
    window = _window(model, inputs.shape[2:])
    b, s = inputs.shape[:2]
    x = inputs.reshape(b, s, -1)
    p = model.params
    w1 = _fold(p["w1"], model.frame_shape, window)
    if model.hidden:
        act = np.tanh(x @ w1 + p["b1"])
        frame_emb = act @ p["w2"] + p["b2"]
    else:
        act = None
        frame_emb = x @ w1 + p["b1"]
    return _Cache(x, window, act, frame_emb.mean(axis=1))


def embed_batch(model: ModelState, inputs: np.ndarray) -> np.ndarray:
    return _embed(model, inputs).embedding


def _apply_head(model: ModelState, y: np.ndarray) -> np.ndarray:
    # per-column reduction rather than BLAS: a column's value must not change
    # bitwise when the head is widened
    return (y[..., :, None] * model.params["head_w"]).sum(axis=-2) + model.params["head_b"]


def forward_batch(model: ModelState, inputs: np.ndarray):
    """Logits (B, C) and the cache needed by :func:`backward_batch`."""
    cache = _embed(model, inputs)
    return _apply_head(model, cache.embedding), cache


def backward_batch(model: ModelState, cache: _Cache, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (cache.embedding.shape[0], model.num_classes):
        raise ConfigError(f"logit gradient shape {g.shape} does not match head width {model.num_classes}")
    grads = {"head_w": cache.embedding.T @ g, "head_b": g.sum(axis=0)}
    s = cache.x.shape[1]
    g_frame = np.repeat((g @ p["head_w"].T)[:, None, :] / s, s, axis=1)  # (B, S, E)
    if model.hidden:
        grads["w2"] = np.einsum("bsh,bse->he", cache.hidden_act, g_frame)
        grads["b2"] = g_frame.sum(axis=(0, 1))
        g_pre = (g_frame @ p["w2"].T) * (1.0 - cache.hidden_act**2)
    else:
        g_pre = g_frame
    g_w1 = np.einsum("bsd,bsh->dh", cache.x, g_pre)
    grads["w1"] = _unfold(g_w1, model.frame_shape, cache.window)
    grads["b1"] = g_pre.sum(axis=(0, 1))
    return grads


def clip_embed(model: ModelState, clip, segments: int = 8) -> np.ndarray:
    """Segment-averaged embedding of a single clip."""
    if segments < 1:
        raise ConfigError("segments must be >= 1")
    return embed_batch(model, clip_inputs([clip], segments))[0]


def forward(model: ModelState, embedding) -> np.ndarray:
    y = np.asarray(embedding, dtype=np.float64)
    if y.shape[-1] != model.embed_dim:
        raise ConfigError(f"embedding length {y.shape[-1]} != embed_dim {model.embed_dim}")
    return _apply_head(model, y)


def backward(model: ModelState, clip, loss_grad, segments: int = 8) -> dict[str, np.ndarray]:
    """Parameter gradients of a single clip given dL/dlogits."""
    _, cache = forward_batch(model, clip_inputs([clip], segments))
    return backward_batch(model, cache, np.atleast_2d(loss_grad))


def adam_step(model: ModelState, grads: dict[str, np.ndarray], lr: float) -> ModelState:
    """One Adam update of the parameters named in ``grads``; others stay put."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {model.step + 1}")
    t = model.step + 1
    params, m1, m2 = dict(model.params), dict(model.moment1), dict(model.moment2)
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, g in grads.items():
        m = ADAM_BETA1 * m1[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * m2[name] + (1.0 - ADAM_BETA2) * g * g
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        m1[name], m2[name] = m, v
    return replace(model, params=params, moment1=m1, moment2=m2, step=t)


def expand_head(model: ModelState, new_classes: int, rng) -> ModelState:
    """Append ``new_classes`` freshly initialised head columns."""
    if new_classes < 0:
        raise ConfigError("new_classes must be >= 0")
    if new_classes == 0:
        return model
    e = model.embed_dim
    params, m1, m2 = dict(model.params), dict(model.moment1), dict(model.moment2)
    params["head_w"] = np.concatenate(
        [params["head_w"], rng.normal(scale=HEAD_INIT_STD, size=(e, new_classes))], axis=1
    )
    params["head_b"] = np.concatenate([params["head_b"], np.zeros(new_classes)])
    for store in (m1, m2):
        store["head_w"] = np.concatenate([store["head_w"], np.zeros((e, new_classes))], axis=1)
        store["head_b"] = np.concatenate([store["head_b"], np.zeros(new_classes)])
    return replace(model, params=params, moment1=m1, moment2=m2)


def multiplies_per_clip(model: ModelState, window: int, segments: int) -> int:
    """Multiplications for one clip forward pass at pooling ``window``."""
    c, h, w = model.frame_shape
    d = c * (h // window) * (w // window)
    first = model.hidden or model.embed_dim
    per_frame = d * first + (model.hidden * model.embed_dim if model.hidden else 0)
    return segments * per_frame + model.embed_dim * model.num_classes
