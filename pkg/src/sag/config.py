"""Experiment plans as INI files.

One section per dataclass; keys are field names. Command-line flags are
applied on top of the parsed file with :func:`apply_overrides`.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from sag import _ini
from sag.diffusion import NoiseSchedule, make_cosine_schedule, make_linear_schedule
from sag.guidance import GuidanceSpec
from sag.model import ArchSpec
from sag.sampler import SamplerConfig
from sag.train import EncoderConfig, InvertConfig, TrainConfig
from sag.world import WorldSpec, load_world

SUBJECT_SOURCES = ("inverted", "encoded", "generic")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_domain: int = 20000
    n_general: int = 100000
    seed: int = 0


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    num_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    offset: float = 0.008
    max_beta: float = 0.999

    def build(self) -> NoiseSchedule:
        if self.kind == "linear":
            return make_linear_schedule(self.num_steps, self.beta_min, self.beta_max)
        if self.kind == "cosine":
            return make_cosine_schedule(self.num_steps, self.offset, self.max_beta)
        raise ConfigError(f"unknown schedule kind {self.kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    depth: int = 3
    num_freqs: int = 8
    content_dim: int = 8
    subject_dim: int = 8

    def arch(self, world: WorldSpec) -> ArchSpec:
        return ArchSpec(content_dim=self.content_dim, subject_dim=self.subject_dim, num_styles=world.num_styles,
                        num_classes=world.num_classes, hidden=self.hidden, depth=self.depth,
                        num_freqs=self.num_freqs, x_scale=1.0 / world.ring_radius)


@dataclass(frozen=True)
class ReferenceConfig:
    """Few-shot references of one subject, all drawn in one style."""

    subject: int = 0
    count: int = 5
    style: int = 0
    seed: int = 7


@dataclass(frozen=True)
class AblationConfig:
    T_grid: tuple = (1.0, 0.9, 0.7, 0.5, 0.3)
    r_at: float = 0.0
    r_grid: tuple = (0.0, -0.5, -1.0)
    T_at: float = 0.9
    baseline: bool = True


@dataclass(frozen=True)
class RunConfig:
    """Where things live and what to generate."""

    world_path: str = ""
    checkpoint: str = ""
    subject: str = ""
    subject_source: str = "inverted"
    style: int = 1
    out: str = "runs/out"
    trace_chains: int = 16


@dataclass(frozen=True)
class ExperimentPlan:
    world: WorldSpec = field(default_factory=WorldSpec)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    invert: InvertConfig = field(default_factory=InvertConfig)
    references: ReferenceConfig = field(default_factory=ReferenceConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.run.subject_source not in SUBJECT_SOURCES:
            raise ConfigError(f"subject_source must be one of {SUBJECT_SOURCES}")
        if not 0 <= self.run.style < self.world.num_styles:
            raise ConfigError(f"style {self.run.style} out of range")
        if not 0 <= self.references.subject < self.world.num_subjects:
            raise ConfigError(f"reference subject {self.references.subject} out of range")
        if self.references.count < 1:
            raise ConfigError("need at least one reference")
        # reject bad grid points before anything runs
        self.guidance_grid()

    def guidance_grid(self) -> list[tuple[str, GuidanceSpec]]:
        """(sweep name, spec) pairs; the baseline is plain CFG at the same ``w``."""
        w, a = self.guidance.w, self.ablation
        grid = [("baseline", GuidanceSpec(w=w, mode="cfg_only"))] if a.baseline else []
        try:
            grid += [("T", GuidanceSpec(w=w, r=a.r_at, T=T, mode="dcfg")) for T in a.T_grid]
            grid += [("r", GuidanceSpec(w=w, r=r, T=a.T_at, mode="dcfg")) for r in a.r_grid]
        except ValueError as exc:
            raise ConfigError(f"invalid guidance grid point: {exc}") from None
        return grid


def standard_plan() -> ExperimentPlan:
    """The standard toy configuration used by the acceptance tests and scripts."""
    return ExperimentPlan(
        schedule=ScheduleConfig(kind="cosine", max_beta=0.05),
        train=TrainConfig(lr=2e-3, log_every=500),
        encoder=EncoderConfig(steps=6000, lr=1e-3, mix_p=0.5, reg=0.01, log_every=500),
        invert=InvertConfig(steps=3000, lr=5e-3, reg=1.0),
        sampler=SamplerConfig(batch_size=1000),
        guidance=GuidanceSpec(w=0.5, r=0.0, T=0.9),
    )


SECTIONS = [f.name for f in fields(ExperimentPlan)]


def plan_from_parser(cp: configparser.ConfigParser, base: ExperimentPlan | None = None) -> ExperimentPlan:
    base = base or standard_plan()
    unknown = sorted(set(cp.sections()) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown sections: {unknown}")
    parts = {}
    try:
        for name in SECTIONS:
            section = dict(cp[name]) if cp.has_section(name) else {}
            parts[name] = _ini.from_section(getattr(base, name), section, name)
        if parts["run"].world_path:
            parts["world"] = load_world(parts["run"].world_path)
        return ExperimentPlan(**parts)
    except (ValueError, TypeError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from None


def load_plan(path, base: ExperimentPlan | None = None) -> ExperimentPlan:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read(p)
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return plan_from_parser(cp, base)


def plan_to_parser(plan: ExperimentPlan) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for name in SECTIONS:
        cp[name] = _ini.to_section(getattr(plan, name))
    return cp


def save_plan(plan: ExperimentPlan, path) -> None:
    with open(path, "w") as fh:
        plan_to_parser(plan).write(fh)


def plan_lines(plan: ExperimentPlan) -> list[str]:
    """Resolved plan as ``section.key = value`` lines, in a fixed order."""
    cp = plan_to_parser(plan)
    return [f"{s}.{k} = {v}" for s in SECTIONS for k, v in cp[s].items()]


def apply_overrides(plan: ExperimentPlan, section: str, **values) -> ExperimentPlan:
    """Replace fields of one section, skipping values that are ``None``."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return plan
    try:
        return replace(plan, **{section: replace(getattr(plan, section), **values)})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
