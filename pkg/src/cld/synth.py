"""Deterministic synthetic language/accent embedding generator.

Clusters are isotropic Gaussians arranged hierarchically: each language has a
center in feature space, each of its accents a sub-center offset from the
language center, and each sample adds white noise around its accent center.
Overlap between accent clouds of different languages is what makes the
detection task nontrivial; the generator records the nearest-language-center
accuracy at generation time as a separability gauge.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataio import FeatureMatrix, LabelSet

_DEFAULT_LANGS = ("en", "zh", "id", "ms", "hi")


class GenerationError(RuntimeError):
    """Requested cluster geometry could not be realised."""


@dataclass(frozen=True)
class SynthSpec:
    languages: int = 5
    accents_per_language: tuple[int, ...] = (5, 5, 5, 5, 4)   # 24 accents total
    dim: int = 64
    language_separation: float = 6.0
    accent_spread: float = 1.0
    noise_sigma: float = 1.0
    samples_per_accent: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.languages < 2:
            raise ValueError("need at least 2 languages")
        if len(self.accents_per_language) != self.languages:
            raise ValueError("accents_per_language must list one count per language")
        if min(self.accents_per_language) < 1:
            raise ValueError("every language needs at least one accent")
        if min(self.dim, self.samples_per_accent) < 1:
            raise ValueError("dim and samples_per_accent must be positive")
        if min(self.language_separation, self.accent_spread, self.noise_sigma) < 0:
            raise ValueError("geometry scales must be nonnegative")

    @property
    def total_accents(self) -> int:
        return sum(self.accents_per_language)

    @property
    def total_samples(self) -> int:
        return self.total_accents * self.samples_per_accent

    def language_names(self) -> list[str]:
        names = list(_DEFAULT_LANGS[: self.languages])
        names += [f"lang{i}" for i in range(len(names), self.languages)]
        return names


@dataclass(frozen=True)
class SynthData:
    features: FeatureMatrix
    labels: LabelSet
    accent_ids: np.ndarray
    language_centers: np.ndarray
    accent_centers: np.ndarray
    nearest_center_accuracy: float


def _language_centers(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    for _ in range(100):
        centers = rng.standard_normal((spec.languages, spec.dim))
        diffs = centers[:, None, :] - centers[None, :, :]
        dist = np.linalg.norm(diffs, axis=2)
        min_pair = dist[np.triu_indices(spec.languages, k=1)].min()
        if min_pair > 0.0:
            if min_pair < spec.language_separation:
                centers *= spec.language_separation / min_pair
            return centers
    raise GenerationError("could not draw distinct language centers in 100 attempts")


def generate(spec: SynthSpec) -> SynthData:
    """Generate an embedding dataset; byte-identical for a fixed seed."""
    root = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(0,)))
    centers = _language_centers(spec, root)
    accent_centers = []
    accent_language = []
    for lang, count in enumerate(spec.accents_per_language):
        for a in range(count):
            accent_language.append(lang)
    accent_language = np.array(accent_language)
    total = spec.total_accents
    rows, labels, accents = [], [], []
    for accent_id in range(total):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=spec.seed, spawn_key=(1, accent_id))
        )
        lang = accent_language[accent_id]
        center = centers[lang] + spec.accent_spread * rng.standard_normal(spec.dim)
        accent_centers.append(center)
        samples = center + spec.noise_sigma * rng.standard_normal(
            (spec.samples_per_accent, spec.dim)
        )
        rows.append(samples)
        labels.append(np.full(spec.samples_per_accent, lang))
        accents.append(np.full(spec.samples_per_accent, accent_id))
    X = np.vstack(rows)
    y = np.concatenate(labels)
    accent_ids = np.concatenate(accents)
    label_map = {name: i for i, name in enumerate(spec.language_names())}
    dists = np.linalg.norm(X[:, None, :] - centers[None, :, :], axis=2)
    nearest_acc = float(np.mean(dists.argmin(axis=1) == y))
    return SynthData(
        features=FeatureMatrix(X),
        labels=LabelSet(y, label_map),
        accent_ids=accent_ids,
        language_centers=centers,
        accent_centers=np.stack(accent_centers),
        nearest_center_accuracy=nearest_acc,
    )


def split(class_ids: np.ndarray, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified (train, test, validation) index split.

    Per-class proportions land within one sample of the targets. Classes with
    fewer than 3 members cannot be stratified; a warning is emitted and the
    split falls back to one global shuffle.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three nonnegative numbers summing to 1")
    class_ids = np.asarray(class_ids)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    counts = np.bincount(class_ids)
    if counts[counts > 0].min() < 3:
        warnings.warn("a class has fewer than 3 examples; falling back to a global shuffle",
                      stacklevel=2)
        perm = rng.permutation(class_ids.size)
        c1 = round(fractions[0] * class_ids.size)
        c2 = round((fractions[0] + fractions[1]) * class_ids.size)
        return perm[:c1], perm[c1:c2], perm[c2:]
    parts: list[list[np.ndarray]] = [[], [], []]
    for cls in np.unique(class_ids):
        members = np.flatnonzero(class_ids == cls)
        members = members[rng.permutation(members.size)]
        c1 = round(fractions[0] * members.size)
        c2 = round((fractions[0] + fractions[1]) * members.size)
        parts[0].append(members[:c1])
        parts[1].append(members[c1:c2])
        parts[2].append(members[c2:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)
