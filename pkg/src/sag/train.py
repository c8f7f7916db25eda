"""Training: base denoiser, subject inversion and the subject encoder.

Conditions inside the training loops are assembled as arrays (style index,
content on/off, subject mode) rather than Condition objects; the embedding
they produce is identical to :func:`sag.conditioning.embed`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from sag.diffusion import NoiseSchedule
from sag.model import Adam, ArchSpec, Denoiser, backward_cached, forward_cached, init_denoiser
from sag.world import Dataset, WorldSpec, sample_shape

SUBJ_NULL, SUBJ_GENERIC, SUBJ_EXTERNAL = 0, 1, 2


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # probability of the fully null condition, and of dropping only one part
    cond_dropout: float = 0.1
    subject_dropout: float = 0.1
    content_dropout: float = 0.1
    # probability of drawing a domain-specific point (rest: general)
    mix_p: float = 0.1
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        total = self.cond_dropout + self.subject_dropout + self.content_dropout
        if not 0 <= self.cond_dropout < 1 or self.subject_dropout < 0 or self.content_dropout < 0 or total >= 1:
            raise ValueError("dropout probabilities must be non-negative with cond_dropout in [0, 1) and sum < 1")
        if not 0 < self.mix_p <= 1:
            raise ValueError("mix_p must lie in (0, 1]")
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("steps >= 0, batch_size >= 1 and lr >= 0 required")


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)  # (step, mean loss over the logging window)
    n_domain: int = 0
    n_general: int = 0

    @property
    def initial(self) -> float:
        return self.losses[0][1]

    @property
    def final(self) -> float:
        return self.losses[-1][1]


def default_arch(world: WorldSpec, **kw) -> ArchSpec:
    kw.setdefault("x_scale", 1.0 / world.ring_radius)
    return ArchSpec(num_styles=world.num_styles, num_classes=world.num_classes, **kw)


# --- condition assembly -------------------------------------------------------

@dataclass
class CondBatch:
    style: np.ndarray
    content_on: np.ndarray
    cls: np.ndarray
    mode: np.ndarray
    external: np.ndarray | None = None

    def matrix(self, model: Denoiser) -> np.ndarray:
        content = model.view("content_table")[self.style] * self.content_on[:, None]
        subj = np.zeros((len(self.style), model.arch.subject_dim))
        gen = self.mode == SUBJ_GENERIC
        subj[gen] = model.view("generic_table")[self.cls[gen]]
        if self.external is not None:
            ext = self.mode == SUBJ_EXTERNAL
            subj[ext] = self.external[ext]
        return np.concatenate([content, subj], axis=1)

    def scatter(self, model: Denoiser, g_cvec: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Add table gradients into ``grad``; return d/d(external subject) per row."""
        Dc = model.arch.content_dim
        on = self.content_on.astype(bool)
        np.add.at(model.view("content_table", grad), self.style[on], g_cvec[on, :Dc])
        gen = self.mode == SUBJ_GENERIC
        np.add.at(model.view("generic_table", grad), self.cls[gen], g_cvec[gen, Dc:])
        g_ext = np.zeros_like(g_cvec[:, Dc:])
        ext = self.mode == SUBJ_EXTERNAL
        g_ext[ext] = g_cvec[ext, Dc:]
        return g_ext


def _apply_dropout(cb: CondBatch, cfg: TrainConfig, u: np.ndarray) -> None:
    a = cfg.cond_dropout
    b = a + cfg.subject_dropout
    c = b + cfg.content_dropout
    null = u < a
    cb.content_on[null] = 0.0
    cb.mode[null] = SUBJ_NULL
    cb.mode[(u >= a) & (u < b)] = SUBJ_NULL
    cb.content_on[(u >= b) & (u < c)] = 0.0


def _mixed_indices(data: Dataset, p: float, n: int, rng: np.random.Generator):
    dom = np.flatnonzero(data.domain == 1)
    gen = np.flatnonzero(data.domain == 0)
    take_dom = rng.random(n) < p
    if len(dom) == 0:
        take_dom[:] = False
    if len(gen) == 0:
        take_dom[:] = True
    idx = np.empty(n, dtype=np.int64)
    nd = int(take_dom.sum())
    if nd:
        idx[take_dom] = dom[rng.integers(0, len(dom), nd)]
    if n - nd:
        idx[~take_dom] = gen[rng.integers(0, len(gen), n - nd)]
    return idx, take_dom


def _noised(x0, sched: NoiseSchedule, rng):
    k = rng.integers(1, sched.num_steps + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bars[k - 1][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, k / sched.num_steps, eps


def _loss_grad(model, x_t, t, cvec, eps):
    pred, cache = forward_cached(model, x_t, t, cvec)
    diff = pred - eps
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grad, g_cvec = backward_cached(model, cache, 2.0 * diff / len(x_t))
    return loss, grad, g_cvec


def _log(log: TrainLog, window: list, step: int, every: int) -> None:
    if (step + 1) % every == 0 or step == 0:
        log.losses.append((step + 1, float(np.mean(window))))
        window.clear()


def _check_finite(loss: float, step: int, what: str) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{what}: loss became {loss} at step {step + 1}")


def general_conditions(model: Denoiser, data: Dataset, idx: np.ndarray, world: WorldSpec) -> CondBatch:
    n = len(idx)
    classes = np.asarray(world.classes)
    return CondBatch(style=data.style[idx].copy(), content_on=np.ones(n), cls=classes[data.subject[idx]],
                     mode=np.full(n, SUBJ_GENERIC))


def train(data: Dataset, config: TrainConfig, world: WorldSpec, sched: NoiseSchedule,
          arch: ArchSpec | None = None, model: Denoiser | None = None):
    """Train the denoiser (and its embedding tables) on the mixed datasets.

    Every point is captioned with its style and the generic class of its
    subject; condition dropout then produces the null condition and the
    content-only / subject-only variants.
    """
    if len(np.unique(data.style)) < world.num_styles:
        raise ValueError("training data must cover every style")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_denoiser(arch or default_arch(world), rng)
    else:
        model = model.copy()
    opt = Adam(model.size, config.lr, config.beta1, config.beta2, config.adam_eps)
    log, window = TrainLog(), []
    for step in range(config.steps):
        idx, took_dom = _mixed_indices(data, config.mix_p, config.batch_size, rng)
        log.n_domain += int(took_dom.sum())
        log.n_general += int((~took_dom).sum())
        cb = general_conditions(model, data, idx, world)
        _apply_dropout(cb, config, rng.random(len(idx)))
        x_t, t, eps = _noised(data.x[idx], sched, rng)
        loss, grad, g_cvec = _loss_grad(model, x_t, t, cb.matrix(model), eps)
        _check_finite(loss, step, "train")
        cb.scatter(model, g_cvec, grad)
        opt.step(model.params, grad)
        window.append(loss)
        _log(log, window, step, config.log_every)
    return model, log


# --- subject inversion ----------------------------------------------------------

# caption templates for reference points, besides a fixed style id >= 0
TEMPLATE_NULL = -1    # no content
TEMPLATE_RANDOM = -2  # a uniformly random style per row


@dataclass(frozen=True)
class InvertConfig:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 5e-3
    reg: float = 1.0
    template_style: int = TEMPLATE_RANDOM
    init_class: int = 0
    seed: int = 0
    log_every: int = 100


@dataclass
class SubjectEmbedding:
    s: np.ndarray
    provenance: str
    reference_ids: tuple = ()
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if not np.all(np.isfinite(self.s)):
            raise ValueError("subject embedding has non-finite entries")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.s))


def _template(model: Denoiser, n: int, template_style: int, rng: np.random.Generator) -> CondBatch:
    """Caption template for reference points: a fixed style, no content, or a random style per row."""
    if template_style == TEMPLATE_RANDOM:
        style = rng.integers(0, model.arch.num_styles, n)
    else:
        style = np.full(n, max(template_style, 0))
    on = np.full(n, 0.0 if template_style == TEMPLATE_NULL else 1.0)
    return CondBatch(style=style, content_on=on, cls=np.zeros(n, np.int64), mode=np.full(n, SUBJ_EXTERNAL))


def invert_subject(model: Denoiser, references: np.ndarray, config: InvertConfig,
                   sched: NoiseSchedule, reference_ids: tuple = ()) -> SubjectEmbedding:
    """Optimise a token embedding against the denoising loss with the network frozen.

    Starts from the generic-table row ``config.init_class``.
    """
    refs = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if len(refs) == 0 or refs.size == 0:
        raise ValueError("need at least one reference")
    rng = np.random.default_rng(config.seed)
    s = model.view("generic_table")[config.init_class].copy()
    opt = Adam(len(s), config.lr)
    trace, window = [], []
    for step in range(config.steps):
        idx = rng.integers(0, len(refs), config.batch_size)
        x_t, t, eps = _noised(refs[idx], sched, rng)
        cb = _template(model, config.batch_size, config.template_style, rng)
        cb.external = np.broadcast_to(s, (config.batch_size, len(s)))
        loss, _, g_cvec = _loss_grad(model, x_t, t, cb.matrix(model), eps)
        _check_finite(loss, step, "invert_subject")
        g_s = g_cvec[:, model.arch.content_dim:].sum(axis=0) + 2.0 * config.reg * s
        opt.step(s, g_s)
        window.append(loss)
        if (step + 1) % config.log_every == 0 or step == 0:
            trace.append((step + 1, float(np.mean(window)), float(np.linalg.norm(s))))
            window.clear()
    return SubjectEmbedding(s, "inverted", tuple(reference_ids), trace)


# --- subject encoder -----------------------------------------------------------

class SubjectEncoder:
    """Three-layer MLP from a reference point to a subject embedding."""

    def __init__(self, hidden: int, out_dim: int, x_scale: float, params: np.ndarray | None = None,
                 in_dim: int = 2):
        self.hidden, self.out_dim, self.x_scale, self.in_dim = hidden, out_dim, x_scale, in_dim
        self.shapes = [("l0.W", (in_dim, hidden)), ("l0.b", (hidden,)), ("l1.W", (hidden, hidden)),
                       ("l1.b", (hidden,)), ("l2.W", (hidden, out_dim)), ("l2.b", (out_dim,))]
        self.size = sum(int(np.prod(s)) for _, s in self.shapes)
        self.params = np.zeros(self.size) if params is None else np.asarray(params, dtype=np.float64)

    def view(self, name, flat=None):
        flat = self.params if flat is None else flat
        off = 0
        for n, shape in self.shapes:
            size = int(np.prod(shape))
            if n == name:
                return flat[off: off + size].reshape(shape)
            off += size
        raise KeyError(name)

    def init(self, rng: np.random.Generator) -> "SubjectEncoder":
        for n, shape in self.shapes:
            if n.endswith(".W"):
                self.view(n)[...] = rng.standard_normal(shape) * math.sqrt(1.0 / shape[0])
        return self

    def forward_cached(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64)) * self.x_scale
        a0 = x @ self.view("l0.W") + self.view("l0.b")
        s0 = 1.0 / (1.0 + np.exp(-a0))
        h0 = a0 * s0
        a1 = h0 @ self.view("l1.W") + self.view("l1.b")
        s1 = 1.0 / (1.0 + np.exp(-a1))
        h1 = a1 * s1
        out = h1 @ self.view("l2.W") + self.view("l2.b")
        return out, (x, a0, s0, h0, a1, s1, h1)

    def __call__(self, x) -> np.ndarray:
        single = np.asarray(x).ndim == 1
        out, _ = self.forward_cached(x)
        return out[0] if single else out

    def backward(self, cache, g_out) -> np.ndarray:
        x, a0, s0, h0, a1, s1, h1 = cache
        grad = np.zeros(self.size)
        self.view("l2.W", grad)[...] = h1.T @ g_out
        self.view("l2.b", grad)[...] = g_out.sum(axis=0)
        g_a1 = (g_out @ self.view("l2.W").T) * (s1 * (1.0 + a1 * (1.0 - s1)))
        self.view("l1.W", grad)[...] = h0.T @ g_a1
        self.view("l1.b", grad)[...] = g_a1.sum(axis=0)
        g_a0 = (g_a1 @ self.view("l1.W").T) * (s0 * (1.0 + a0 * (1.0 - s0)))
        self.view("l0.W", grad)[...] = x.T @ g_a0
        self.view("l0.b", grad)[...] = g_a0.sum(axis=0)
        return grad

    def encode(self, reference, reference_ids: tuple = ()) -> SubjectEmbedding:
        refs = np.atleast_2d(np.asarray(reference, dtype=np.float64))
        return SubjectEmbedding(self(refs).mean(axis=0), "encoded", tuple(reference_ids))

    def describe(self) -> dict:
        return {"hidden": self.hidden, "out_dim": self.out_dim, "x_scale": self.x_scale, "in_dim": self.in_dim}


@dataclass(frozen=True)
class EncoderConfig:
    steps: int = 10000
    batch_size: int = 256
    lr: float = 1e-4
    mix_p: float = 0.1
    reg: float = 1.0
    hidden: int = 64
    template_style: int = TEMPLATE_RANDOM
    # "self": the target is its own reference; "resample": a fresh draw of the same subject
    reference_mode: str = "resample"
    # style of resampled references; -1 means the target's own style
    reference_style: int = 0
    # segments of the denoiser trained alongside the encoder; "*" means all
    trainable: tuple = ("*",)
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not 0 < self.mix_p <= 1:
            raise ValueError("mix_p must lie in (0, 1]")
        if self.reference_mode not in ("self", "resample"):
            raise ValueError("reference_mode must be 'self' or 'resample'")


def train_subject_encoder(model: Denoiser, data: Dataset, config: EncoderConfig, world: WorldSpec,
                          sched: NoiseSchedule):
    """Train the encoder jointly with the ``config.trainable`` segments of a copy of ``model``.

    Domain-specific points are captioned with the template and the encoding
    of a fresh reference of the same subject; general points keep their usual
    captions and dropout, so the generic and null conditions stay intact.
    The loss adds ``reg * ||s||^2`` averaged over the encoded rows.
    """
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    enc = SubjectEncoder(config.hidden, model.arch.subject_dim, model.arch.x_scale).init(rng)
    names = [n for n, _, _ in model.manifest] if "*" in config.trainable else config.trainable
    mask = model.segment_mask(names)
    opt_m = Adam(model.size, config.lr, mask=mask)
    opt_e = Adam(enc.size, config.lr)
    dropout = TrainConfig(mix_p=config.mix_p)
    log, window = TrainLog(), []
    for step in range(config.steps):
        idx, took_dom = _mixed_indices(data, config.mix_p, config.batch_size, rng)
        log.n_domain += int(took_dom.sum())
        log.n_general += int((~took_dom).sum())
        cb = general_conditions(model, data, idx, world)
        _apply_dropout(cb, dropout, rng.random(len(idx)))
        dom = np.flatnonzero(took_dom)
        if config.reference_mode == "self":
            refs = data.x[idx[dom]]
        else:
            ref_style = data.style[idx[dom]] if config.reference_style < 0 else np.full(len(dom), config.reference_style)
            refs = sample_shape(world, data.subject[idx[dom]], ref_style, rng)
        s_dom, enc_cache = enc.forward_cached(refs) if len(dom) else (np.zeros((0, enc.out_dim)), None)
        ext = np.zeros((len(idx), enc.out_dim))
        ext[dom] = s_dom
        cb.external = ext
        cb.mode[dom] = SUBJ_EXTERNAL
        tpl = _template(model, len(dom), config.template_style, rng)
        cb.content_on[dom] = tpl.content_on
        cb.style[dom] = tpl.style
        x_t, t, eps = _noised(data.x[idx], sched, rng)
        loss, grad, g_cvec = _loss_grad(model, x_t, t, cb.matrix(model), eps)
        reg = float(np.mean(np.sum(s_dom * s_dom, axis=1))) if len(dom) else 0.0
        _check_finite(loss + reg, step, "train_subject_encoder")
        g_ext = cb.scatter(model, g_cvec, grad)
        if len(dom):
            g_s = g_ext[dom] + config.reg * 2.0 * s_dom / len(dom)
            opt_e.step(enc.params, enc.backward(enc_cache, g_s))
        opt_m.step(model.params, grad)
        window.append(loss + config.reg * reg)
        _log(log, window, step, config.log_every)
    return enc, model, log


def config_dict(cfg) -> dict:
    return asdict(cfg)
