"""Reverse-process sampling with CFG or DCFG guidance, recording full traces."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sag.conditioning import Condition, null_condition
from sag.diffusion import NoiseSchedule
from sag.guidance import GuidanceSpec, guide
from sag.model import Denoiser, condition_matrix, forward_cached

SAMPLER_KINDS = ("ddim", "ddpm_ancestral")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    num_steps: int = 50
    ddim_eta: float = 0.0
    seed: int = 0
    batch_size: int = 500

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"sampler kind must be one of {SAMPLER_KINDS}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not 0.0 <= self.ddim_eta <= 1.0:
            raise ValueError("ddim_eta must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def step_indices(T0: int, num_steps: int) -> list[int]:
    """Strictly decreasing strided steps starting at ``T0``."""
    if num_steps > T0:
        raise ValueError(f"num_steps {num_steps} exceeds T0 {T0}")
    ks = [T0 - (i * T0) // num_steps for i in range(num_steps)]
    assert all(a > b for a, b in zip(ks, ks[1:])) and ks[-1] >= 1
    return ks


class NonFiniteState(RuntimeError):
    def __init__(self, step: int, k: int):
        super().__init__(f"non-finite sampler state at step {step} (k={k})")
        self.step = step
        self.k = k


def ddpm_step(x_k, eps_tilde, k: int, sched: NoiseSchedule, rng=None, noise=None) -> np.ndarray:
    """Ancestral update from step ``k`` to ``k - 1`` with the posterior variance; no noise at ``k = 1``."""
    if not 1 <= k <= sched.num_steps:
        raise ValueError(f"step {k} out of range [1, {sched.num_steps}]")
    x_k = np.asarray(x_k, dtype=np.float64)
    beta, ab, ab_prev = sched.beta(k), sched.alpha_bar(k), sched.alpha_bar(k - 1)
    mean = (x_k - beta / math.sqrt(1.0 - ab) * eps_tilde) / math.sqrt(1.0 - beta)
    if k == 1:
        return mean
    if noise is None:
        noise = rng.standard_normal(x_k.shape)
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mean + math.sqrt(var) * noise


def ddim_sigma(ab: float, ab_next: float, eta: float) -> float:
    if eta == 0.0:
        return 0.0
    return eta * math.sqrt((1.0 - ab_next) / (1.0 - ab) * (1.0 - ab / ab_next))


def ddim_update(x_k, eps, ab: float, ab_next: float, eta: float, noise) -> np.ndarray:
    """DDIM update written on the cumulative coefficients; shared with the trace audit."""
    x0_hat = (x_k - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    sigma = ddim_sigma(ab, ab_next, eta)
    x_next = math.sqrt(ab_next) * x0_hat + math.sqrt(max(1.0 - ab_next - sigma ** 2, 0.0)) * eps
    if sigma > 0.0:
        x_next = x_next + sigma * noise
    return x_next


def ddim_step(x_k, eps_tilde, k: int, k_next: int, sched: NoiseSchedule, eta: float = 0.0,
              rng=None, noise=None) -> np.ndarray:
    if not (0 <= k_next < k <= sched.num_steps):
        raise ValueError(f"invalid step pair ({k}, {k_next})")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    x_k = np.asarray(x_k, dtype=np.float64)
    ab, ab_next = sched.alpha_bar(k), sched.alpha_bar(k_next)
    if noise is None and ddim_sigma(ab, ab_next, eta) > 0.0:
        noise = rng.standard_normal(x_k.shape)
    return ddim_update(x_k, eps_tilde, ab, ab_next, eta, noise)


@dataclass
class SampleTrace:
    """Per-step arrays; the chain axis is second: ``eps_c[step, chain, dim]``."""

    ks: list
    k_next: list
    t_norm: list
    alpha_bar: list
    alpha_bar_next: list
    w_t: list
    eps_c: list = field(default_factory=list)
    eps_c0: list = field(default_factory=list)
    eps_null: list = field(default_factory=list)
    eps_tilde: list = field(default_factory=list)
    noise: list = field(default_factory=list)
    x_before: list = field(default_factory=list)
    x_after: list = field(default_factory=list)
    model_calls: int = 0
    kind: str = "ddim"
    eta: float = 0.0
    spec: GuidanceSpec | None = None

    @property
    def num_steps(self) -> int:
        return len(self.ks)


class _Evaluator:
    """Counts denoiser calls; each condition is its own forward pass of identical shape."""

    def __init__(self, model: Denoiser, batch: int):
        self.model = model
        self.batch = batch
        self.calls = 0
        self._cvecs: dict = {}

    def __call__(self, x, t_norm, cond: Condition) -> np.ndarray:
        cvec = self._cvecs.get(cond)
        if cvec is None:
            cvec = self._cvecs[cond] = np.ascontiguousarray(condition_matrix(self.model, cond, self.batch))
        self.calls += 1
        out, _ = forward_cached(self.model, x, np.full(self.batch, t_norm), cvec)
        return out


def chain_generators(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, i]) for i in range(n)]


def _draw(gens, dim: int) -> np.ndarray:
    return np.stack([g.standard_normal(dim) for g in gens])


def sample(model: Denoiser, sched: NoiseSchedule, c: Condition, c0: Condition | None,
           spec: GuidanceSpec, sampler: SamplerConfig, record: bool = True):
    """Run the guided reverse process; returns ``(x0_batch, trace)``."""
    if spec.mode == "dcfg" and c0 is None:
        raise ValueError("dcfg mode needs a subject-agnostic condition c0")
    B, D = sampler.batch_size, model.arch.x_dim
    ks = step_indices(sched.num_steps, sched.num_steps if sampler.kind == "ddpm_ancestral" else sampler.num_steps)
    k_next = ks[1:] + [0]
    eta = 1.0 if sampler.kind == "ddpm_ancestral" else sampler.ddim_eta
    gens = chain_generators(sampler.seed, B)
    x = _draw(gens, D)
    phi = null_condition()
    ev = _Evaluator(model, B)
    trace = SampleTrace(ks=list(ks), k_next=list(k_next), t_norm=[], alpha_bar=[], alpha_bar_next=[],
                        w_t=[], kind=sampler.kind, eta=eta, spec=spec)
    for i, (k, kn) in enumerate(zip(ks, k_next)):
        t = k / sched.num_steps
        eps_c = ev(x, t, c)
        eps_c0 = ev(x, t, c0) if spec.mode == "dcfg" else None
        eps_null = ev(x, t, phi)
        g = guide(eps_c, eps_c0, eps_null, spec, t)
        ab, ab_next = sched.alpha_bar(k), sched.alpha_bar(kn)
        if sampler.kind == "ddpm_ancestral":
            noise = _draw(gens, D) if k > 1 else np.zeros((B, D))
            x_new = ddpm_step(x, g.eps_tilde, k, sched, noise=noise)
        else:
            noise = _draw(gens, D) if ddim_sigma(ab, ab_next, eta) > 0 else np.zeros((B, D))
            x_new = ddim_update(x, g.eps_tilde, ab, ab_next, eta, noise)
        if not np.all(np.isfinite(x_new)):
            raise NonFiniteState(i, k)
        trace.t_norm.append(t)
        trace.alpha_bar.append(ab)
        trace.alpha_bar_next.append(ab_next)
        trace.w_t.append(g.w_t)
        if record:
            trace.eps_c.append(eps_c)
            trace.eps_c0.append(eps_c0)
            trace.eps_null.append(eps_null)
            trace.eps_tilde.append(g.eps_tilde)
            trace.noise.append(noise)
            trace.x_before.append(x)
            trace.x_after.append(x_new)
        x = x_new
    trace.model_calls = ev.calls
    return x, trace
