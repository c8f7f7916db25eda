"""The end-to-end toy pipeline shared by the CLI, the scripts and the tests."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from sag.checkpoint import ModelBundle, load_model, save_model
from sag.conditioning import (
    Condition,
    ContentSpec,
    GenericDescriptor,
    LearnedToken,
    SeparateEmbedding,
    make_agnostic_separate_flavor,
    make_agnostic_token_flavor,
    make_subject_aware,
)
from sag.config import ExperimentPlan
from sag.guidance import GuidanceSpec
from sag.sampler import SamplerConfig, sample
from sag.train import (
    SubjectEmbedding,
    TrainLog,
    invert_subject,
    train,
    train_subject_encoder,
)
from sag.world import AlignmentReport, alignment_report, generate_dataset, sample_shape

FLAVORS = ("token", "separate")


@dataclass
class TrainedSystem:
    bundle: ModelBundle
    base: object  # the denoiser before the subject-channel stage
    base_log: TrainLog
    encoder_log: TrainLog


def train_system(plan: ExperimentPlan) -> TrainedSystem:
    """Base denoiser on the mixed data, then the subject-channel stage with the encoder."""
    world = plan.world
    sched = plan.schedule.build()
    data = generate_dataset(world, plan.data.n_domain, plan.data.n_general, seed=plan.data.seed)
    arch = plan.model.arch(world)
    base, base_log = train(data, plan.train, world, sched, arch=arch)
    enc, adapted, enc_log = train_subject_encoder(base, data, plan.encoder, world, sched)
    bundle = ModelBundle(adapted, sched, world, enc, meta={"stages": ["train", "train_subject_encoder"]})
    return TrainedSystem(bundle, base, base_log, enc_log)


def load_or_train(plan: ExperimentPlan, path) -> ModelBundle:
    """Reuse the checkpoint at ``path`` if present, otherwise train and save it."""
    path = Path(path)
    if path.is_file():
        return load_model(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bundle = train_system(plan).bundle
    save_model(path, bundle)
    return bundle


def reference_points(plan: ExperimentPlan, subject: int | None = None) -> tuple[np.ndarray, tuple]:
    """The few-shot references: ``count`` draws of one subject in one style."""
    r = plan.references
    subject = r.subject if subject is None else subject
    rng = np.random.default_rng(r.seed)
    x = sample_shape(plan.world, np.full(r.count, subject), np.full(r.count, r.style), rng)
    ids = tuple(f"s{subject}-ref{i}" for i in range(r.count))
    return x, ids


def invert(bundle: ModelBundle, plan: ExperimentPlan, subject: int | None = None) -> SubjectEmbedding:
    subject = plan.references.subject if subject is None else subject
    refs, ids = reference_points(plan, subject)
    config = plan.invert
    if config.init_class != bundle.world.class_of(subject):
        config = replace(config, init_class=bundle.world.class_of(subject))
    return invert_subject(bundle.model, refs, config, bundle.sched, ids)


def encode(bundle: ModelBundle, plan: ExperimentPlan, subject: int | None = None) -> SubjectEmbedding:
    if bundle.encoder is None:
        raise ValueError("checkpoint has no subject encoder")
    subject = plan.references.subject if subject is None else subject
    refs, ids = reference_points(plan, subject)
    return bundle.encoder.encode(refs, ids)


def flavor_of(emb: SubjectEmbedding) -> str:
    return "token" if emb.provenance == "inverted" else "separate"


def conditions(emb: SubjectEmbedding, style: int, generic_class: int, flavor: str | None = None):
    """Subject-aware ``c`` and its subject-agnostic counterpart ``c0``."""
    flavor = flavor or flavor_of(emb)
    if flavor == "token":
        c = make_subject_aware(ContentSpec(style), LearnedToken(emb.s))
        return c, make_agnostic_token_flavor(c, generic_class)
    if flavor == "separate":
        c = make_subject_aware(ContentSpec(style), SeparateEmbedding(emb.s, 1))
        return c, make_agnostic_separate_flavor(c)
    raise ValueError(f"unknown flavor {flavor!r}")


def generic_conditions(style: int, generic_class: int):
    """A generic-descriptor subject. There is no agnostic side, so only plain CFG applies."""
    return Condition(ContentSpec(style), GenericDescriptor(generic_class)), None


@dataclass
class Evaluation:
    spec: GuidanceSpec
    report: AlignmentReport
    samples: np.ndarray
    trace: object


def evaluate(bundle: ModelBundle, c: Condition, c0: Condition | None, spec: GuidanceSpec,
             sampler: SamplerConfig, subject: int, style: int, record: bool = False) -> Evaluation:
    x, trace = sample(bundle.model, bundle.sched, c, c0, spec, sampler, record=record)
    return Evaluation(spec, alignment_report(x, subject, style, bundle.world), x, trace)


def ablation_rows(bundle: ModelBundle, emb: SubjectEmbedding, plan: ExperimentPlan, subject: int,
                  flavor: str | None = None) -> list[dict]:
    """One row per grid point of ``plan.guidance_grid()``, all with the same seed."""
    flavor = flavor or flavor_of(emb)
    style = plan.run.style
    c, c0 = conditions(emb, style, bundle.world.class_of(subject), flavor)
    rows = []
    for sweep, spec in plan.guidance_grid():
        ev = evaluate(bundle, c, c0, spec, plan.sampler, subject, style)
        rows.append({
            "sweep": sweep, "flavor": flavor, "w": spec.w, "r": spec.r, "T": spec.T, "mode": spec.mode,
            "subject_alignment": ev.report.subject_alignment,
            "content_alignment": ev.report.content_alignment,
            "n": ev.report.n, "seed": plan.sampler.seed,
        })
    return rows
