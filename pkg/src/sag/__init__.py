"""Subject-agnostic guidance for conditional diffusion, on a synthetic 2-D world.

Dual classifier-free guidance mixes a subject-aware condition with a
subject-agnostic one on a time-varying weight, so that the layout of a
sample follows the prompt before the subject identity is filled in.
"""

__version__ = "0.1.0"

from sag.conditioning import (  # noqa: E402
    Condition,
    ContentSpec,
    GenericDescriptor,
    LearnedToken,
    NullSubject,
    SeparateEmbedding,
    embed,
    make_agnostic_separate_flavor,
    make_agnostic_token_flavor,
    make_subject_aware,
    null_condition,
)
from sag.diffusion import NoiseSchedule, denoising_loss, make_cosine_schedule, make_linear_schedule, q_sample  # noqa: E402
from sag.guidance import GuidanceSpec, cfg, dcfg, weak_cfg, weight_at  # noqa: E402
from sag.model import ArchSpec, Denoiser, forward  # noqa: E402
from sag.sampler import SamplerConfig, SampleTrace, sample  # noqa: E402
from sag.world import WorldSpec, content_alignment, generate_dataset, subject_alignment  # noqa: E402
