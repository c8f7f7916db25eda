"""Conditions, subject slots and the subject-agnostic / null constructions.

A condition is a style (the prompt content) plus a subject slot. The "text
encoder" is two learnable tables: one row per style and one row per generic
subject class. ``embed`` concatenates the content segment and the subject
segment; the null condition embeds to all zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Union

import numpy as np


def _as_tuple(v) -> tuple:
    return tuple(float(x) for x in np.asarray(v, dtype=np.float64).ravel())


@dataclass(frozen=True)
class LearnedToken:
    embedding: tuple

    def __init__(self, embedding):
        object.__setattr__(self, "embedding", _as_tuple(embedding))


@dataclass(frozen=True)
class SeparateEmbedding:
    embedding: tuple
    attention_mask: int = 1

    def __init__(self, embedding, attention_mask: int = 1):
        emb = _as_tuple(embedding)
        if attention_mask not in (0, 1):
            raise ValueError("attention_mask must be 0 or 1")
        if attention_mask == 0 and any(emb):
            raise ValueError("a masked separate embedding must be the zero vector")
        object.__setattr__(self, "embedding", emb)
        object.__setattr__(self, "attention_mask", int(attention_mask))


@dataclass(frozen=True)
class GenericDescriptor:
    class_id: int


@dataclass(frozen=True)
class NullSubject:
    pass


SubjectSlot = Union[LearnedToken, SeparateEmbedding, GenericDescriptor, NullSubject]


@dataclass(frozen=True)
class ContentSpec:
    style_id: int


@dataclass(frozen=True)
class Condition:
    """``content=None`` means no prompt content (zero content segment)."""

    content: ContentSpec | None
    subject: SubjectSlot = NullSubject()


@dataclass(frozen=True)
class ModelDims:
    content_dim: int
    subject_dim: int
    num_styles: int
    num_classes: int


class EmbeddingTables:
    """Read-only view of the style and generic-class tables of a model."""

    def __init__(self, content: np.ndarray, generic: np.ndarray):
        self.content = content
        self.generic = generic

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.content.shape[1], self.generic.shape[1],
                         self.content.shape[0], self.generic.shape[0])

    @property
    def width(self) -> int:
        return self.content.shape[1] + self.generic.shape[1]

    def check_distinct(self) -> None:
        """Rows must be pairwise distinct and nonzero so embed is injective."""
        for name, table in (("content", self.content), ("generic", self.generic)):
            rows = {r.tobytes() for r in table}
            if len(rows) != len(table) or np.any(np.all(table == 0.0, axis=1)):
                raise ValueError(f"{name} table rows must be distinct and nonzero")


def make_subject_aware(content: ContentSpec, subject: SubjectSlot, dims: ModelDims | None = None) -> Condition:
    if not isinstance(subject, (LearnedToken, SeparateEmbedding)):
        raise TypeError(f"subject-aware conditions need a learned token or separate embedding, got {subject!r}")
    if dims is not None:
        _check_subject_dim(subject, dims)
        _check_style(content, dims)
    return Condition(content, subject)


def make_agnostic_token_flavor(c: Condition, generic: int) -> Condition:
    """Swap the learned token for the generic descriptor of its class."""
    if not isinstance(c.subject, LearnedToken):
        raise TypeError(f"token flavor needs a LearnedToken subject, got {type(c.subject).__name__}")
    return replace(c, subject=GenericDescriptor(int(generic)))


def make_agnostic_separate_flavor(c: Condition) -> Condition:
    """Zero both the subject embedding and its attention mask."""
    if not isinstance(c.subject, SeparateEmbedding):
        raise TypeError(f"separate flavor needs a SeparateEmbedding subject, got {type(c.subject).__name__}")
    return replace(c, subject=SeparateEmbedding(np.zeros(len(c.subject.embedding)), 0))


def null_condition(dims: ModelDims | None = None) -> Condition:
    return Condition(None, NullSubject())


def _check_style(content: ContentSpec | None, dims: ModelDims) -> None:
    if content is not None and not 0 <= content.style_id < dims.num_styles:
        raise ValueError(f"style_id {content.style_id} out of range [0, {dims.num_styles})")


def _check_subject_dim(subject: SubjectSlot, dims: ModelDims) -> None:
    if isinstance(subject, (LearnedToken, SeparateEmbedding)) and len(subject.embedding) != dims.subject_dim:
        raise ValueError(f"subject embedding has dim {len(subject.embedding)}, model expects {dims.subject_dim}")
    if isinstance(subject, GenericDescriptor) and not 0 <= subject.class_id < dims.num_classes:
        raise ValueError(f"class_id {subject.class_id} out of range [0, {dims.num_classes})")


def subject_vector(subject: SubjectSlot, tables: EmbeddingTables) -> np.ndarray:
    d = tables.generic.shape[1]
    if isinstance(subject, NullSubject):
        return np.zeros(d)
    _check_subject_dim(subject, tables.dims)
    if isinstance(subject, GenericDescriptor):
        return tables.generic[subject.class_id].copy()
    if isinstance(subject, SeparateEmbedding) and subject.attention_mask == 0:
        return np.zeros(d)
    return np.array(subject.embedding)


def embed(c: Condition, tables: EmbeddingTables) -> np.ndarray:
    _check_style(c.content, tables.dims)
    if c.content is None:
        content = np.zeros(tables.content.shape[1])
    else:
        content = tables.content[c.content.style_id].copy()
    return np.concatenate([content, subject_vector(c.subject, tables)])


def embed_batch(conds, tables: EmbeddingTables) -> np.ndarray:
    """Embed a sequence of conditions; repeated conditions are embedded once."""
    cache: dict = {}
    out = np.empty((len(conds), tables.width))
    for i, c in enumerate(conds):
        v = cache.get(c)
        if v is None:
            v = cache[c] = embed(c, tables)
        out[i] = v
    return out


def parse_condition(text: str, subjects: Mapping[str, np.ndarray] | None = None) -> Condition:
    """Parse ``"style=2 subject=token:KEY"``-style literals.

    Subject forms: ``token:KEY``, ``separate:KEY``, ``generic:ID``, ``null``.
    ``style=null`` gives no content.
    """
    subjects = subjects or {}
    fields = dict(part.split("=", 1) for part in text.split())
    unknown = set(fields) - {"style", "subject"}
    if unknown:
        raise ValueError(f"unknown condition fields: {sorted(unknown)}")
    style = fields.get("style", "null")
    content = None if style == "null" else ContentSpec(int(style))
    spec = fields.get("subject", "null")
    kind, _, arg = spec.partition(":")
    if kind == "null":
        subject: SubjectSlot = NullSubject()
    elif kind == "generic":
        subject = GenericDescriptor(int(arg))
    elif kind in ("token", "separate"):
        if arg not in subjects:
            raise KeyError(f"unknown subject key {arg!r}")
        cls = LearnedToken if kind == "token" else SeparateEmbedding
        subject = cls(subjects[arg])
    else:
        raise ValueError(f"unknown subject spec {spec!r}")
    return Condition(content, subject)
