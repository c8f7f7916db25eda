import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sag.model import ArchSpec, init_denoiser

settings.register_profile("sag", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sag")


def tiny_arch(**kw) -> ArchSpec:
    base = dict(x_dim=2, content_dim=3, subject_dim=4, num_styles=3, num_classes=2,
                hidden=6, depth=3, num_freqs=2, x_scale=0.5)
    base.update(kw)
    return ArchSpec(**base)


def tiny_model(seed: int = 0, **kw):
    m = init_denoiser(tiny_arch(**kw), np.random.default_rng(seed))
    # nonzero biases so every gradient path is exercised
    m.params += 0.05 * np.random.default_rng(seed + 100).standard_normal(m.size)
    return m


@pytest.fixture(scope="session")
def standard():
    """The standard toy system, trained once per session (about 100 s)."""
    import time

    from sag import experiment as ex
    from sag.config import standard_plan

    t0 = time.time()
    plan = standard_plan()
    system = ex.train_system(plan)
    inv = ex.invert(system.bundle, plan)
    enc = ex.encode(system.bundle, plan)
    return {"plan": plan, "system": system, "bundle": system.bundle, "token": inv, "separate": enc,
            "seconds": time.time() - t0}


@pytest.fixture(scope="session")
def standard_rows(standard):
    """Ablation rows of the standard grid for both flavors, plus the elapsed wall time."""
    import time

    from sag import experiment as ex

    t0 = time.time()
    rows = {f: ex.ablation_rows(standard["bundle"], standard[f], standard["plan"], standard["plan"].references.subject, f)
            for f in ("token", "separate")}
    return rows, time.time() - t0
