"""Synthetic subject x style world and closed-form alignment metrics.

Subjects are cluster centers on a small circle. A style is a shape drawn
around the subject center: 0 an isotropic blob, 1 a wide ring, 2 an
anisotropic bar oriented relative to the subject's radial direction. The
shapes are much larger than the subject spacing, so at the noise levels
where a sample's style is decided its subject is still open. This puts the
style in the role of layout and the subject in the role of identity detail.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.optimize import least_squares
from scipy.special import logsumexp

from sag import _ini

STYLE_NAMES = ("blob", "ring", "bar")
DOMAIN_TAGS = ("domain_specific", "general")


@dataclass(frozen=True)
class WorldSpec:
    num_subjects: int = 5
    num_styles: int = 3
    radius: float = 1.8
    angle_offset: float = 0.0
    blob_sigma: float = 0.075
    ring_radius: float = 12.0
    ring_sigma: float = 0.6
    bar_long: float = 3.0
    bar_short: float = 0.75
    bar_angle: float = 0.0
    # generic class of each subject; empty means one class per subject
    subject_classes: tuple = (0, 0, 1, 1, 1)
    # restricted subject subset and style mix of the domain-specific data
    domain_subjects: tuple = (0, 1)
    domain_style_weights: tuple = (0.7, 0.3, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_subjects < 1 or not 1 <= self.num_styles <= 3:
            raise ValueError("need at least one subject and 1..3 styles")
        for name in ("radius", "blob_sigma", "ring_radius", "ring_sigma", "bar_long", "bar_short"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.num_subjects > 1 and self.spacing <= 0:
            raise ValueError("subject centers must be pairwise distinct")
        if self.subject_classes and len(self.subject_classes) != self.num_subjects:
            raise ValueError("subject_classes needs one entry per subject")
        if not self.domain_subjects or any(not 0 <= s < self.num_subjects for s in self.domain_subjects):
            raise ValueError("domain_subjects must be a non-empty subset of the subjects")
        w = np.asarray(self.domain_style_weights, dtype=float)
        if len(w) != self.num_styles or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("domain_style_weights needs one non-negative weight per style")

    @property
    def spacing(self) -> float:
        """Distance between neighbouring subject centers."""
        return 2.0 * self.radius * math.sin(math.pi / self.num_subjects)

    @property
    def num_classes(self) -> int:
        return max(self.classes) + 1

    @property
    def classes(self) -> tuple:
        return tuple(self.subject_classes) if self.subject_classes else tuple(range(self.num_subjects))

    def class_of(self, subject_id: int) -> int:
        return self.classes[subject_id]

    def angles(self) -> np.ndarray:
        return self.angle_offset + 2.0 * math.pi * np.arange(self.num_subjects) / self.num_subjects

    def centers(self) -> np.ndarray:
        a = self.angles()
        return self.radius * np.stack([np.cos(a), np.sin(a)], axis=1)

    @property
    def alignment_lambda(self) -> float:
        """Chosen so a centroid one subject spacing away scores 0.05."""
        return self.spacing ** 2 / math.log(20.0)


@dataclass(frozen=True)
class LabeledPoint:
    x: tuple
    subject_id: int
    style_id: int
    domain_tag: str


@dataclass
class Dataset:
    """Column-oriented labeled points; indexing yields :class:`LabeledPoint`."""

    x: np.ndarray
    subject: np.ndarray
    style: np.ndarray
    domain: np.ndarray  # 1 for domain_specific, 0 for general

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> LabeledPoint:
        return LabeledPoint(tuple(self.x[i]), int(self.subject[i]), int(self.style[i]),
                            DOMAIN_TAGS[0] if self.domain[i] else DOMAIN_TAGS[1])

    def __iter__(self) -> Iterator[LabeledPoint]:
        return (self[i] for i in range(len(self)))

    def select(self, mask: np.ndarray) -> "Dataset":
        return Dataset(self.x[mask], self.subject[mask], self.style[mask], self.domain[mask])


def sample_shape(spec: WorldSpec, subject: np.ndarray, style: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one point per (subject, style) pair from the world's generative law."""
    subject = np.asarray(subject)
    style = np.asarray(style)
    n = len(subject)
    z = rng.standard_normal((n, 2))
    u = rng.random(n)
    offsets = np.empty((n, 2))
    blob = style == 0
    offsets[blob] = spec.blob_sigma * z[blob]
    ring = style == 1
    r = spec.ring_radius + spec.ring_sigma * z[ring, 0]
    phi = 2.0 * math.pi * u[ring]
    offsets[ring] = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    bar = style == 2
    theta = spec.angles()[subject[bar]] + spec.bar_angle
    c, s = np.cos(theta), np.sin(theta)
    a, b = spec.bar_long * z[bar, 0], spec.bar_short * z[bar, 1]
    offsets[bar] = np.stack([a * c - b * s, a * s + b * c], axis=1)
    return spec.centers()[subject] + offsets


def generate_dataset(spec: WorldSpec, n_domain: int, n_general: int, seed: int | None = None) -> Dataset:
    """Domain-specific points from the restricted subjects and style mix, then general points."""
    if n_domain < 0 or n_general < 0:
        raise ValueError("sample counts must be non-negative")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    w = np.asarray(spec.domain_style_weights, dtype=float)
    d_subj = rng.choice(np.asarray(spec.domain_subjects), size=n_domain)
    d_style = rng.choice(spec.num_styles, size=n_domain, p=w / w.sum())
    g_subj = rng.integers(0, spec.num_subjects, size=n_general)
    g_style = rng.integers(0, spec.num_styles, size=n_general)
    subject = np.concatenate([d_subj, g_subj]).astype(np.int64)
    style = np.concatenate([d_style, g_style]).astype(np.int64)
    x = sample_shape(spec, subject, style, rng)
    domain = np.concatenate([np.ones(n_domain, np.int64), np.zeros(n_general, np.int64)])
    return Dataset(x, subject, style, domain)


def shape_log_density(spec: WorldSpec, style: int, offset: np.ndarray, subject: int) -> np.ndarray:
    """log p(offset | style) for offsets measured from the given subject's center."""
    d = np.asarray(offset, dtype=np.float64)
    if style == 0:
        s = spec.blob_sigma
        return -0.5 * np.sum(d * d, axis=-1) / s ** 2 - math.log(2 * math.pi * s * s)
    if style == 1:
        # the reflected radial law has a 1/r singularity at the centre carrying
        # negligible mass; clamping keeps the centre point itself finite
        r = np.maximum(np.sqrt(np.sum(d * d, axis=-1)), 1e-9 * spec.ring_radius)
        rho, sr = spec.ring_radius, spec.ring_sigma
        # radial draw rho + sr * z may be negative, which reflects the point
        log_radial = np.logaddexp(-0.5 * ((r - rho) / sr) ** 2, -0.5 * ((r + rho) / sr) ** 2)
        return log_radial - 0.5 * math.log(2 * math.pi) - math.log(sr) - np.log(2 * math.pi * r)
    theta = spec.angles()[subject] + spec.bar_angle
    c, s = math.cos(theta), math.sin(theta)
    u = d[..., 0] * c + d[..., 1] * s
    v = -d[..., 0] * s + d[..., 1] * c
    return (-0.5 * (u / spec.bar_long) ** 2 - 0.5 * (v / spec.bar_short) ** 2
            - math.log(2 * math.pi * spec.bar_long * spec.bar_short))


def style_log_likelihoods(spec: WorldSpec, x: np.ndarray) -> np.ndarray:
    """log p(x | style) under a uniform mixture over subjects; shape (..., num_styles)."""
    x = np.asarray(x, dtype=np.float64)
    centers = spec.centers()
    out = []
    for k in range(spec.num_styles):
        terms = np.stack([shape_log_density(spec, k, x - centers[g], g) for g in range(spec.num_subjects)])
        out.append(logsumexp(terms, axis=0) - math.log(spec.num_subjects))
    return np.stack(out, axis=-1)


def classify_style(spec: WorldSpec, x: np.ndarray) -> np.ndarray:
    """Maximum-likelihood style label of each point."""
    return np.argmax(style_log_likelihoods(spec, np.atleast_2d(x)), axis=-1)


def _check_samples(samples) -> np.ndarray:
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.size == 0:
        raise ValueError("no samples")
    if x.shape[1] != 2:
        raise ValueError(f"samples must be 2-vectors, got shape {x.shape}")
    return x


def fit_circle_center(x: np.ndarray) -> np.ndarray:
    """Algebraic least-squares circle fit: solve ``2 a x + 2 b y + c = x^2 + y^2``."""
    x = np.asarray(x, dtype=np.float64)
    A = np.column_stack([2.0 * x, np.ones(len(x))])
    sol, *_ = np.linalg.lstsq(A, np.sum(x * x, axis=1), rcond=None)
    return sol[:2]


def fit_ring_center(x: np.ndarray, radius: float) -> np.ndarray:
    """Centre of a ring of known radius: least squares on ``|x - c| - radius``, from the algebraic fit."""
    x = np.asarray(x, dtype=np.float64)
    x = x[np.lexsort(x.T[::-1])]  # the solver stops at a tolerance, so fix the order
    res = least_squares(lambda c: np.linalg.norm(x - c, axis=1) - radius, fit_circle_center(x),
                        method="lm", xtol=1e-12, ftol=1e-12)
    return res.x


def fitted_center(spec: WorldSpec, x) -> np.ndarray:
    """Fraction-weighted mean of per-style maximum-likelihood center estimates.

    Points are grouped by their Bayes style label. Blob and bar groups use
    the mean; ring groups use a fit with the known ring radius, which
    recovers the center from an arc as well as from a full ring.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    styles = classify_style(spec, x)
    total = np.zeros(2)
    for k in np.unique(styles):
        pts = x[styles == k]
        if k == 1 and len(pts) >= 3 and np.linalg.matrix_rank(pts - pts.mean(axis=0)) == 2:
            c = fit_ring_center(pts, spec.ring_radius)
        else:
            c = pts.mean(axis=0)
        total += len(pts) * c
    return total / len(x)


def subject_alignment(samples, subject_id: int, spec: WorldSpec) -> float:
    """``exp(-d^2 / lambda)``, d the distance from the fitted sample center to the subject center.

    The raw point centroid is not used: rings are wider than the subject
    spacing, so any angular imbalance would swamp it.
    """
    x = _check_samples(samples)
    d = np.linalg.norm(fitted_center(spec, x) - spec.centers()[subject_id])
    return float(math.exp(-d * d / spec.alignment_lambda))


def content_alignment(samples, style_id: int, spec: WorldSpec) -> float:
    """Fraction of samples the maximum-likelihood classifier assigns to ``style_id``."""
    x = _check_samples(samples)
    if not 0 <= style_id < spec.num_styles:
        raise ValueError(f"style_id {style_id} out of range")
    return float(np.mean(classify_style(spec, x) == style_id))


@dataclass
class AlignmentReport:
    subject_alignment: float
    content_alignment: float
    centroid: tuple
    centroid_distance: float
    style_fractions: tuple
    n: int


def alignment_report(samples, subject_id: int, style_id: int, spec: WorldSpec) -> AlignmentReport:
    x = _check_samples(samples)
    labels = classify_style(spec, x)
    centroid = fitted_center(spec, x)
    return AlignmentReport(
        subject_alignment=subject_alignment(x, subject_id, spec),
        content_alignment=float(np.mean(labels == style_id)),
        centroid=tuple(float(v) for v in centroid),
        centroid_distance=float(np.linalg.norm(centroid - spec.centers()[subject_id])),
        style_fractions=tuple(float(np.mean(labels == k)) for k in range(spec.num_styles)),
        n=len(x),
    )


def bayes_accuracy_grid(spec: WorldSpec, half_width: float | None = None, n: int = 1200):
    """Numerical integration of the style densities on a square grid.

    Returns ``(per_style, pairwise)``: the probability that a draw of style k
    is classified as k, and the equal-prior two-class Bayes accuracy for
    every pair of styles.
    """
    if half_width is None:
        half_width = spec.radius + max(spec.ring_radius + 5 * spec.ring_sigma, 5 * spec.bar_long)
    g = np.linspace(-half_width, half_width, n)
    X, Y = np.meshgrid(g, g)
    pts = np.stack([X, Y], axis=-1)
    dA = (g[1] - g[0]) ** 2
    lp = style_log_likelihoods(spec, pts)
    p = np.exp(lp)
    label = np.argmax(lp, axis=-1)
    per_style = [float(p[..., k][label == k].sum() * dA) for k in range(spec.num_styles)]
    pairwise = {}
    for i in range(spec.num_styles):
        for j in range(i + 1, spec.num_styles):
            pairwise[(i, j)] = float(1.0 - 0.5 * np.minimum(p[..., i], p[..., j]).sum() * dA)
    return per_style, pairwise


def validate_world(spec: WorldSpec, min_pairwise: float = 0.95) -> dict:
    """Reject worlds whose styles are too entangled for content alignment to mean anything."""
    _, pairwise = bayes_accuracy_grid(spec)
    bad = {k: v for k, v in pairwise.items() if v <= min_pairwise}
    if bad:
        raise ValueError(f"style pairs below Bayes accuracy {min_pairwise}: {bad}")
    return pairwise


def shape_moments(spec: WorldSpec, style: int, subject: int = 0):
    """Closed-form mean and covariance of the offset of a style around its center."""
    if style == 0:
        return np.zeros(2), spec.blob_sigma ** 2 * np.eye(2)
    if style == 1:
        m2 = spec.ring_radius ** 2 + spec.ring_sigma ** 2
        return np.zeros(2), 0.5 * m2 * np.eye(2)
    theta = spec.angles()[subject] + spec.bar_angle
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    return np.zeros(2), R @ np.diag([spec.bar_long ** 2, spec.bar_short ** 2]) @ R.T


# --- persistence -------------------------------------------------------------

def save_dataset_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x0", "x1", "subject_id", "style_id", "domain_tag"])
        for p in data:
            w.writerow([repr(float(p.x[0])), repr(float(p.x[1])), p.subject_id, p.style_id, p.domain_tag])


def load_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"x0", "x1", "subject_id", "style_id", "domain_tag"}:
        raise ValueError(f"{path}: unexpected columns {sorted(rows[0])}")
    x = np.array([[float(r["x0"]), float(r["x1"])] for r in rows]).reshape(-1, 2)
    return Dataset(x, np.array([int(r["subject_id"]) for r in rows], np.int64),
                   np.array([int(r["style_id"]) for r in rows], np.int64),
                   np.array([1 if r["domain_tag"] == DOMAIN_TAGS[0] else 0 for r in rows], np.int64))


def world_from_section(section) -> WorldSpec:
    return _ini.from_section(WorldSpec(), section, "world")


def world_to_dict(spec: WorldSpec) -> dict:
    return _ini.to_section(spec)


def load_world(path) -> WorldSpec:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return world_from_section(cp["world"] if cp.has_section("world") else {})


def save_world(spec: WorldSpec, path) -> None:
    cp = configparser.ConfigParser()
    cp["world"] = world_to_dict(spec)
    with open(path, "w") as fh:
        cp.write(fh)
