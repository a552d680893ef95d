"""Synthetic embedding sets with controllable identity-cluster structure.

Lets the full pipeline be exercised at desk scale without any face data:
identity centroids are i.i.d. standard normal, each image is its centroid
plus isotropic noise, and distractors are i.i.d. standard normal.  With
zero noise every image of an identity is a bit-exact copy of the centroid,
so rank-1 retrieval must be perfect; with the pure-noise flag the needle is
exchangeable with distractors, so rank-k accuracy sits at chance level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .probes import ProbeManifest, build_probe_manifest
from .store import EmbeddingSet, IdentityRecord


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for one synthetic probe-set/gallery pair."""

    dim: int
    n_identities: int
    images_per_identity: int
    n_distractors: int
    intra_class_sigma: float
    seed: int
    normalize: bool = False
    pure_noise: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.n_identities < 1 or self.images_per_identity < 1:
            raise ValidationError("dim, n_identities, images_per_identity must be positive")
        if self.n_distractors < 0:
            raise ValidationError("n_distractors must be non-negative")
        if not (self.intra_class_sigma >= 0):
            raise ValidationError("intra_class_sigma must be non-negative")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        missing = {"dim", "n_identities", "images_per_identity", "n_distractors",
                   "intra_class_sigma", "seed"} - set(doc)
        if missing:
            raise ValidationError(f"synthetic spec missing keys: {sorted(missing)}")
        return cls(**doc)


def load_spec(path: str | Path) -> SyntheticSpec:
    with open(path, encoding="utf-8") as f:
        return SyntheticSpec.from_json_dict(json.load(f))


def _identity_id(i: int) -> str:
    return f"id{i:05d}"


def synthetic_gender(index: int) -> str:
    # alternate so grouped reporting always has both strata
    return "male" if index % 2 == 0 else "female"


def identity_records(spec: SyntheticSpec) -> list[IdentityRecord]:
    """Candidate records for the synthetic probe identities."""
    return [
        IdentityRecord(
            identity_id=_identity_id(i),
            display_name=_identity_id(i),
            gender=synthetic_gender(i),
            image_count=spec.images_per_identity,
        )
        for i in range(spec.n_identities)
    ]


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat.astype(np.float64), axis=1)
    norms[norms == 0] = 1.0
    return (mat / norms[:, None].astype(np.float32)).astype(np.float32)


def generate(spec: SyntheticSpec) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Generate (probe_embeddings, gallery_embeddings) for ``spec``.

    Deterministic in ``spec.seed``; draw order is centroids, then image
    noise, then distractors, all from one PCG64 stream.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n_img = spec.n_identities * spec.images_per_identity

    centroids = rng.standard_normal((spec.n_identities, spec.dim), dtype=np.float32)
    if spec.pure_noise:
        images = rng.standard_normal((n_img, spec.dim), dtype=np.float32)
    elif spec.intra_class_sigma == 0:
        images = np.repeat(centroids, spec.images_per_identity, axis=0)
    else:
        noise = rng.standard_normal((n_img, spec.dim), dtype=np.float32)
        images = np.repeat(centroids, spec.images_per_identity, axis=0)
        images += np.float32(spec.intra_class_sigma) * noise
    distractors = rng.standard_normal((spec.n_distractors, spec.dim), dtype=np.float32)

    if spec.normalize:
        images = _unit_rows(images)
        distractors = _unit_rows(distractors)

    probe_image_ids = []
    probe_identity_ids = []
    for i in range(spec.n_identities):
        ident = _identity_id(i)
        for j in range(spec.images_per_identity):
            probe_image_ids.append(f"{ident}_im{j:03d}")
            probe_identity_ids.append(ident)

    gallery_ids = tuple(f"g{i:07d}" for i in range(spec.n_distractors))
    probe_set = EmbeddingSet(images, tuple(probe_image_ids), tuple(probe_identity_ids))
    gallery_set = EmbeddingSet(
        distractors.reshape(spec.n_distractors, spec.dim), gallery_ids, gallery_ids
    )
    return probe_set, gallery_set


def synthetic_manifest(
    spec: SyntheticSpec,
    probe_embeddings: EmbeddingSet,
    domain_label: str,
    seed: int | None = None,
) -> ProbeManifest:
    """Manifest covering the synthetic probe set (all identities, all images).

    Requires at least one identity per gender, i.e. ``n_identities >= 2``;
    with an odd count the surplus identity in the larger stratum is left out
    so both strata stay equal-sized.
    """
    if spec.n_identities < 2:
        raise ValidationError("need at least 2 identities to build a manifest")
    return build_probe_manifest(
        candidates=identity_records(spec),
        embeddings=probe_embeddings,
        domain_label=domain_label,
        seed=spec.seed if seed is None else seed,
        identities_per_gender=spec.n_identities // 2,
        images_per_identity=spec.images_per_identity,
    )
