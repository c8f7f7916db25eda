from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sag.config import (
    ConfigError,
    ExperimentPlan,
    AblationConfig,
    RunConfig,
    apply_overrides,
    load_plan,
    plan_lines,
    save_plan,
    standard_plan,
)
from sag.guidance import GuidanceSpec
from sag.world import WorldSpec, save_world

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_shipped_configs_parse():
    assert load_plan(CONFIGS / "toy.ini") == standard_plan()
    smoke = load_plan(CONFIGS / "smoke.ini")
    assert smoke.train.steps < standard_plan().train.steps


def test_round_trip(tmp_path):
    plan = replace(standard_plan(), ablation=AblationConfig(T_grid=(1.0, 0.25), r_grid=(-0.75,)),
                   run=RunConfig(style=2, subject="generic:1", trace_chains=3))
    save_plan(plan, tmp_path / "p.ini")
    assert load_plan(tmp_path / "p.ini") == plan


@given(st.floats(0, 50, allow_nan=False), st.floats(-1, 5), st.floats(0, 1))
def test_float_values_round_trip_exactly(w, r, T):
    import configparser

    from sag.config import plan_from_parser, plan_to_parser

    plan = replace(standard_plan(), guidance=GuidanceSpec(w=w, r=r, T=T))
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_dict(plan_to_parser(plan))
    assert plan_from_parser(cp) == plan


def test_partial_file_falls_back_to_standard(tmp_path):
    p = tmp_path / "p.ini"
    p.write_text("[guidance]\nw = 2.0\n")
    plan = load_plan(p)
    assert plan.guidance.w == 2.0 and plan.train == standard_plan().train


@pytest.mark.parametrize("text", ["[nonsense]\na = 1\n", "[train]\nsteps = many\n", "[train]\nfoo = 1\n",
                                  "[guidance]\nT = 1.5\n", "[run]\nsubject_source = magic\n",
                                  "[ablation]\nr_grid = -2.0\n", "[run]\nstyle = 9\n", "not an ini"])
def test_bad_files_rejected(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_plan(p)


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(ConfigError, match="nowhere.ini"):
        load_plan(tmp_path / "nowhere.ini")


def test_world_path_is_loaded(tmp_path):
    save_world(WorldSpec(radius=2.2), tmp_path / "w.ini")
    p = tmp_path / "p.ini"
    p.write_text(f"[run]\nworld_path = {tmp_path / 'w.ini'}\n")
    assert load_plan(p).world.radius == 2.2


def test_overrides():
    plan = apply_overrides(standard_plan(), "guidance", w=3.0, r=None)
    assert plan.guidance.w == 3.0 and plan.guidance.r == standard_plan().guidance.r
    assert apply_overrides(plan, "train") is plan
    with pytest.raises(ConfigError):
        apply_overrides(plan, "guidance", T=2.0)
    with pytest.raises(ConfigError):
        apply_overrides(plan, "train", nonsense=1)


def test_guidance_grid():
    plan = replace(standard_plan(), ablation=AblationConfig(T_grid=(1.0, 0.9, 0.7, 0.5), r_grid=()))
    grid = plan.guidance_grid()
    assert len(grid) == 5
    assert grid[0] == ("baseline", GuidanceSpec(w=plan.guidance.w, mode="cfg_only"))
    assert all(s.mode == "dcfg" and s.r == 0.0 for _, s in grid[1:])


def test_plan_lines_are_stable():
    a, b = plan_lines(standard_plan()), plan_lines(standard_plan())
    assert a == b
    assert "guidance.w = 0.5" in a
    assert all(" = " in line for line in a)


def test_plan_validates_itself():
    with pytest.raises(ConfigError):
        ExperimentPlan(run=RunConfig(style=3))
