"""Noise-prediction MLP with hand-written reverse-mode gradients.

Inputs are the scaled state, a sinusoidal embedding of ``t_norm`` and the
condition embedding, concatenated at the first layer. All parameters,
including the two embedding tables and the time frequencies, live in one
flat float64 array addressed through a manifest of named segments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from sag.conditioning import (
    Condition,
    EmbeddingTables,
    GenericDescriptor,
    LearnedToken,
    SeparateEmbedding,
    embed_batch,
)


@dataclass(frozen=True)
class ArchSpec:
    x_dim: int = 2
    content_dim: int = 8
    subject_dim: int = 8
    num_styles: int = 3
    num_classes: int = 5
    hidden: int = 128
    depth: int = 3
    num_freqs: int = 8
    x_scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def cond_dim(self) -> int:
        return self.content_dim + self.subject_dim


def layout(arch: ArchSpec) -> list[tuple[str, tuple[int, ...]]]:
    H = arch.hidden
    segs = [
        ("content_table", (arch.num_styles, arch.content_dim)),
        ("generic_table", (arch.num_classes, arch.subject_dim)),
        ("time_freqs", (arch.num_freqs,)),
        ("in.x", (arch.x_dim, H)),
        ("in.t", (2 * arch.num_freqs, H)),
        ("in.c", (arch.cond_dim, H)),
        ("in.b", (H,)),
    ]
    for i in range(arch.depth - 1):
        segs += [(f"hidden{i}.W", (H, H)), (f"hidden{i}.b", (H,))]
    segs += [("out.W", (H, arch.x_dim)), ("out.b", (arch.x_dim,))]
    return segs


class Denoiser:
    """Parameters plus named views; ``model.tables`` exposes the embedding tables."""

    def __init__(self, arch: ArchSpec, params: np.ndarray | None = None):
        self.arch = arch
        self.manifest = []
        offset = 0
        for name, shape in layout(arch):
            size = int(np.prod(shape))
            self.manifest.append((name, offset, shape))
            offset += size
        self.size = offset
        if params is None:
            params = np.zeros(offset)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (offset,):
            raise ValueError(f"expected {offset} parameters for {arch}, got {params.shape}")
        self.params = params

    def view(self, name: str, flat: np.ndarray | None = None) -> np.ndarray:
        flat = self.params if flat is None else flat
        for n, off, shape in self.manifest:
            if n == name:
                return flat[off: off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def segment_mask(self, names) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for n, off, shape in self.manifest:
            if n in names:
                mask[off: off + int(np.prod(shape))] = True
        return mask

    @property
    def tables(self) -> EmbeddingTables:
        return EmbeddingTables(self.view("content_table"), self.view("generic_table"))

    def copy(self) -> "Denoiser":
        return Denoiser(self.arch, self.params.copy())


def init_denoiser(arch: ArchSpec, rng: np.random.Generator, zero_head: bool = False) -> Denoiser:
    model = Denoiser(arch)
    for name, _, shape in model.manifest:
        v = model.view(name)
        if name.endswith("_table"):
            v[...] = rng.standard_normal(shape)
        elif name == "time_freqs":
            v[...] = 0.25 * 2.0 ** np.arange(arch.num_freqs)
        elif name.startswith("in.") and name != "in.b":
            fan_in = arch.x_dim + 2 * arch.num_freqs + arch.cond_dim
            v[...] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif name.endswith(".W"):
            scale = 0.0 if (zero_head and name == "out.W") else math.sqrt(1.0 / shape[0])
            v[...] = rng.standard_normal(shape) * scale
    model.tables.check_distinct()
    return model


def _silu(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


def _check_inputs(model: Denoiser, x_t: np.ndarray, t_norm: np.ndarray, cvec: np.ndarray):
    if x_t.ndim != 2 or x_t.shape[1] != model.arch.x_dim:
        raise ValueError(f"x_t must have shape (B, {model.arch.x_dim}), got {x_t.shape}")
    if cvec.shape != (x_t.shape[0], model.arch.cond_dim):
        raise ValueError(f"condition embedding must have shape {(x_t.shape[0], model.arch.cond_dim)}, got {cvec.shape}")
    if t_norm.shape != (x_t.shape[0],):
        raise ValueError("t_norm must be a scalar or one value per row")
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(t_norm)) and np.all(np.isfinite(cvec))):
        raise ValueError("non-finite input to the denoiser")


def condition_matrix(model: Denoiser, c, batch: int) -> np.ndarray:
    """Turn a Condition, a list of them, or a raw embedding into a (B, cond_dim) array."""
    if isinstance(c, Condition):
        return np.broadcast_to(embed_batch([c], model.tables), (batch, model.arch.cond_dim))
    if isinstance(c, np.ndarray):
        return np.broadcast_to(c, (batch, model.arch.cond_dim))
    return embed_batch(list(c), model.tables)


def forward_cached(model: Denoiser, x_t, t_norm, cvec):
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    B = x_t.shape[0]
    t_norm = np.broadcast_to(np.asarray(t_norm, dtype=np.float64), (B,))
    cvec = np.asarray(cvec, dtype=np.float64)
    _check_inputs(model, x_t, t_norm, cvec)
    v = model.view
    freqs = v("time_freqs")
    phase = 2.0 * math.pi * t_norm[:, None] * freqs[None, :]
    temb = np.concatenate([np.sin(phase), np.cos(phase)], axis=1)
    xs = x_t * model.arch.x_scale
    a = xs @ v("in.x") + temb @ v("in.t") + cvec @ v("in.c") + v("in.b")
    h, s = _silu(a)
    acts = [(a, s, h)]
    for i in range(model.arch.depth - 1):
        a = h @ v(f"hidden{i}.W") + v(f"hidden{i}.b")
        h, s = _silu(a)
        acts.append((a, s, h))
    out = h @ v("out.W") + v("out.b")
    cache = {"xs": xs, "t": t_norm, "phase": phase, "temb": temb, "cvec": cvec, "acts": acts}
    return out, cache


def forward(model: Denoiser, x_t, t_norm, c) -> np.ndarray:
    """Predicted noise for a batch (or a single vector) under condition(s) ``c``."""
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    out, _ = forward_cached(model, x, t_norm, condition_matrix(model, c, x.shape[0]))
    return out[0] if single else out


def backward_cached(model: Denoiser, cache: dict, g_out: np.ndarray):
    """Gradients of ``sum(g_out * out)``: flat parameter gradient and d/d(cvec)."""
    v = model.view
    grad = np.zeros(model.size)
    gv = lambda name: model.view(name, grad)  # noqa: E731
    acts = cache["acts"]
    h_last = acts[-1][2]
    gv("out.W")[...] = h_last.T @ g_out
    gv("out.b")[...] = g_out.sum(axis=0)
    g_h = g_out @ v("out.W").T
    for i in range(len(acts) - 1, -1, -1):
        a, s, _ = acts[i]
        g_a = g_h * (s * (1.0 + a * (1.0 - s)))
        if i == 0:
            break
        h_prev = acts[i - 1][2]
        gv(f"hidden{i - 1}.W")[...] = h_prev.T @ g_a
        gv(f"hidden{i - 1}.b")[...] = g_a.sum(axis=0)
        g_h = g_a @ v(f"hidden{i - 1}.W").T
    gv("in.x")[...] = cache["xs"].T @ g_a
    gv("in.t")[...] = cache["temb"].T @ g_a
    gv("in.c")[...] = cache["cvec"].T @ g_a
    gv("in.b")[...] = g_a.sum(axis=0)
    g_temb = g_a @ v("in.t").T
    F = model.arch.num_freqs
    # d sin(2 pi f t)/df = 2 pi t cos(.), d cos/df = -2 pi t sin(.)
    dphase = g_temb[:, :F] * np.cos(cache["phase"]) - g_temb[:, F:] * np.sin(cache["phase"])
    gv("time_freqs")[...] = (dphase * (2.0 * math.pi * cache["t"][:, None])).sum(axis=0)
    g_cvec = g_a @ v("in.c").T
    return grad, g_cvec


def scatter_condition_grads(model: Denoiser, conds, g_cvec: np.ndarray, grad: np.ndarray) -> dict:
    """Route condition-embedding gradients into the table segments of ``grad``.

    Returns summed gradients for token / separate subject embeddings keyed
    by condition index, for callers that own those vectors.
    """
    Dc = model.arch.content_dim
    g_content = model.view("content_table", grad)
    g_generic = model.view("generic_table", grad)
    subject_grads = {}
    for i, c in enumerate(conds):
        if c.content is not None:
            g_content[c.content.style_id] += g_cvec[i, :Dc]
        subj = c.subject
        if isinstance(subj, GenericDescriptor):
            g_generic[subj.class_id] += g_cvec[i, Dc:]
        elif isinstance(subj, LearnedToken) or (isinstance(subj, SeparateEmbedding) and subj.attention_mask):
            subject_grads[i] = g_cvec[i, Dc:]
    return subject_grads


class Adam:
    """Adam over a flat parameter vector; ``mask`` limits which entries move."""

    def __init__(self, size: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, mask: np.ndarray | None = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.mask = mask

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if self.mask is None:
            params -= update
        else:
            params[self.mask] -= update[self.mask]
