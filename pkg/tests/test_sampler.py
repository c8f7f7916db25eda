import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sag.conditioning import Condition, ContentSpec, GenericDescriptor, LearnedToken, make_agnostic_token_flavor
from sag.diffusion import make_linear_schedule
from sag.guidance import GuidanceSpec, cfg, weak_cfg
from sag.sampler import (
    NonFiniteState,
    SamplerConfig,
    ddim_step,
    ddim_update,
    ddpm_step,
    sample,
    step_indices,
)
from tests.conftest import tiny_model

SCHED = make_linear_schedule(100, 1e-3, 0.05)
C = Condition(ContentSpec(1), LearnedToken(np.array([0.5, -1.0, 0.25, 2.0])))
C0 = make_agnostic_token_flavor(C, 1)


def run(spec, c=C, c0=C0, **kw):
    cfgs = dict(num_steps=10, batch_size=16, seed=3)
    cfgs.update(kw)
    return sample(tiny_model(7), SCHED, c, c0, spec, SamplerConfig(**cfgs))


@given(st.integers(1, 500), st.integers(1, 500))
def test_step_indices(T0, n):
    if n > T0:
        with pytest.raises(ValueError):
            step_indices(T0, n)
        return
    ks = step_indices(T0, n)
    assert ks[0] == T0 and len(ks) == n and ks[-1] >= 1
    assert all(a > b for a, b in zip(ks, ks[1:]))


def test_config_validation():
    for kw in (dict(kind="euler"), dict(num_steps=0), dict(ddim_eta=1.5), dict(batch_size=0)):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


def test_dcfg_with_c0_equal_c_is_cfg():
    a, _ = run(GuidanceSpec(w=2.0, r=0.3, T=0.6), c0=C)
    b, _ = run(GuidanceSpec(w=2.0, mode="cfg_only"), c0=None)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("T", [0.0, 0.4, 1.0])
def test_all_early_schedule_is_cfg_on_c0(T):
    a, _ = run(GuidanceSpec(w=1.5, r=-1.0, T=T))
    b, _ = run(GuidanceSpec(w=1.5, mode="cfg_only"), c=C0, c0=None)
    np.testing.assert_array_equal(a, b)


def test_late_only_schedule_with_r0_is_cfg_on_c():
    a, _ = run(GuidanceSpec(w=1.5, r=0.0, T=1.0))
    b, _ = run(GuidanceSpec(w=1.5, mode="cfg_only"), c0=None)
    np.testing.assert_array_equal(a, b)


def test_trace_early_steps_use_c0_only():
    spec = GuidanceSpec(w=2.5, r=0.5, T=0.45)
    _, tr = run(spec)
    for i, t in enumerate(tr.t_norm):
        e, e0, n = tr.eps_c[i], tr.eps_c0[i], tr.eps_null[i]
        if t > spec.T:
            np.testing.assert_allclose(tr.eps_tilde[i], (1 + 2.5) * e0 - 2.5 * n, rtol=0, atol=1e-10)
        else:
            bar = (1 + 0.5) * e - 0.5 * e0
            np.testing.assert_allclose(tr.eps_tilde[i], (1 + 2.5) * bar - 2.5 * n, rtol=0, atol=1e-10)
        np.testing.assert_array_equal(tr.eps_tilde[i], cfg(weak_cfg(e, e0, tr.w_t[i]), n, 2.5))


def test_trace_is_a_consistent_chain():
    _, tr = run(GuidanceSpec(w=1.0), ddim_eta=0.5)
    assert tr.model_calls == 3 * tr.num_steps
    for i in range(tr.num_steps - 1):
        np.testing.assert_array_equal(tr.x_after[i], tr.x_before[i + 1])
    for i in range(tr.num_steps):
        x = ddim_update(tr.x_before[i], tr.eps_tilde[i], tr.alpha_bar[i], tr.alpha_bar_next[i], 0.5, tr.noise[i])
        np.testing.assert_array_equal(x, tr.x_after[i])


def test_cfg_mode_skips_c0_calls():
    _, tr = run(GuidanceSpec(w=1.0, mode="cfg_only"), c0=None)
    assert tr.model_calls == 2 * tr.num_steps
    with pytest.raises(ValueError):
        run(GuidanceSpec(w=1.0), c0=None)


def test_sampling_is_reproducible():
    a, _ = run(GuidanceSpec(), kind="ddpm_ancestral", num_steps=100)
    b, _ = run(GuidanceSpec(), kind="ddpm_ancestral", num_steps=100)
    np.testing.assert_array_equal(a, b)
    c, _ = run(GuidanceSpec(), kind="ddpm_ancestral", num_steps=100, seed=4)
    assert not np.array_equal(a, c)


def test_eta_zero_is_deterministic_in_the_noise():
    x = np.array([[0.3, -0.2]])
    e = np.array([[0.1, 0.4]])
    a = ddim_step(x, e, 50, 20, SCHED, eta=0.0, rng=np.random.default_rng(0))
    b = ddim_step(x, e, 50, 20, SCHED, eta=0.0, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


def test_one_step_ddim_to_zero_is_x0_estimate():
    x = np.array([1.2, -0.7])
    e = np.array([0.3, 0.9])
    ab = SCHED.alpha_bar(60)
    np.testing.assert_allclose(ddim_step(x, e, 60, 0, SCHED), (x - math.sqrt(1 - ab) * e) / math.sqrt(ab),
                               atol=1e-14)


def test_ddpm_final_step_is_noise_free():
    x = np.array([0.5, 0.5])
    e = np.array([0.1, -0.1])
    a = ddpm_step(x, e, 1, SCHED, rng=np.random.default_rng(0))
    b = ddpm_step(x, e, 1, SCHED, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_ddpm_recovers_posterior_mean_with_true_noise():
    x0 = np.array([0.7, -1.1])
    eps = np.array([0.4, 0.2])
    k = 40
    ab, ab_prev, beta = SCHED.alpha_bar(k), SCHED.alpha_bar(k - 1), SCHED.beta(k)
    xk = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
    mean = (math.sqrt(ab_prev) * beta / (1 - ab) * x0
            + math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab) * xk)
    np.testing.assert_allclose(ddpm_step(xk, eps, k, SCHED, noise=np.zeros(2)), mean, atol=1e-12)


def test_ddim_eta_one_matches_ddpm_statistics():
    n, k = 10_000, 30
    x = np.tile([0.4, -0.3], (n, 1))
    e = np.tile([0.2, 0.5], (n, 1))
    a = ddim_step(x, e, k, k - 1, SCHED, eta=1.0, rng=np.random.default_rng(0))
    b = ddpm_step(x, e, k, SCHED, rng=np.random.default_rng(1))
    se = np.sqrt(a.var(axis=0) / n + b.var(axis=0) / n)
    assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) < 3 * se)
    var_se = a.var(axis=0) * math.sqrt(2 / n) * math.sqrt(2)
    assert np.all(np.abs(a.var(axis=0) - b.var(axis=0)) < 3 * var_se)


def test_step_validation():
    with pytest.raises(ValueError):
        ddim_step(np.zeros(2), np.zeros(2), 10, 10, SCHED)
    with pytest.raises(ValueError):
        ddim_step(np.zeros(2), np.zeros(2), 10, 5, SCHED, eta=2.0)
    with pytest.raises(ValueError):
        ddpm_step(np.zeros(2), np.zeros(2), 0, SCHED)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_is_reported():
    m = tiny_model(7)
    m.params[m.manifest[-1][1]:] = 1e308  # output bias
    with pytest.raises(NonFiniteState):
        sample(m, SCHED, C, C0, GuidanceSpec(w=1e300), SamplerConfig(num_steps=5, batch_size=2))


def test_generic_condition_sampling():
    x, _ = run(GuidanceSpec(w=1.0, mode="cfg_only"), c=Condition(ContentSpec(0), GenericDescriptor(0)), c0=None)
    assert x.shape == (16, 2) and np.all(np.isfinite(x))
