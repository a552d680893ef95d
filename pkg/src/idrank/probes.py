"""Probe-set construction: name matching and seeded stratified sampling.

A probe manifest fixes which identities are evaluated, which images
represent each identity, and the group labels (domain, gender) used later
for stratified reporting.  Manifests are a pure function of their inputs
and seed: the sampler is a partial Fisher-Yates shuffle driven by numpy's
PCG64 stream, candidate pools are sorted before sampling, and output is
emitted in sorted order, so reruns are byte-identical.
"""

from __future__ import annotations

import json
import logging
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import StratumShortfallError, ValidationError
from .store import EmbeddingSet, IdentityRecord

logger = logging.getLogger(__name__)

IN_DOMAIN = "in_domain"
OUT_OF_DOMAIN = "out_of_domain"
DOMAIN_LABELS = (IN_DOMAIN, OUT_OF_DOMAIN)

SAMPLED_GENDERS = ("female", "male")

_NON_ALNUM_RUN = re.compile(r"[^0-9a-z]+")


def canonicalize_name(raw: str) -> str:
    """Reduce a display name to a canonical matching key.

    Lowercases, strips diacritics (NFKD decomposition with combining marks
    removed), collapses every maximal run of non-alphanumeric characters to
    a single underscore, and trims leading/trailing underscores.  May return
    an empty string for all-punctuation input.
    """
    decomposed = unicodedata.normalize("NFKD", raw)
    stripped = "".join(c for c in decomposed if not unicodedata.combining(c))
    lowered = stripped.lower()
    pieces = [c if c.isalnum() else " " for c in lowered]
    return "_".join("".join(pieces).split())


class MatchedIdentity(NamedTuple):
    source_identity_id: str
    reference_identity_id: str
    canonical_name: str


@dataclass(frozen=True)
class MatchResult:
    """Partition of source identities into matched and unmatched.

    ``ambiguous`` is diagnostic only: canonical names that map to more than
    one reference identity.  Sources colliding with such names count as
    unmatched rather than being matched arbitrarily.
    """

    matched: tuple[MatchedIdentity, ...]
    unmatched: tuple[str, ...]
    ambiguous: dict[str, tuple[str, ...]]


def match_identities(
    source: Sequence[IdentityRecord], reference: Sequence[IdentityRecord]
) -> MatchResult:
    """Match source identities to reference identities by canonical name.

    A source matches iff its canonical display name equals exactly one
    reference identity's canonical name.  Empty canonical names never match.
    """
    seen: set[str] = set()
    for rec in source:
        if rec.identity_id in seen:
            raise ValidationError(f"duplicate source identity_id {rec.identity_id!r}")
        seen.add(rec.identity_id)

    by_name: dict[str, list[str]] = {}
    for rec in reference:
        key = canonicalize_name(rec.display_name)
        if key:
            by_name.setdefault(key, []).append(rec.identity_id)
    ambiguous = {k: tuple(v) for k, v in by_name.items() if len(v) > 1}

    matched: list[MatchedIdentity] = []
    unmatched: list[str] = []
    for rec in source:
        key = canonicalize_name(rec.display_name)
        refs = by_name.get(key, []) if key else []
        if len(refs) == 1:
            matched.append(MatchedIdentity(rec.identity_id, refs[0], key))
        else:
            unmatched.append(rec.identity_id)
    return MatchResult(tuple(matched), tuple(unmatched), ambiguous)


class ProbeEntry(NamedTuple):
    identity_id: str
    gender: str
    image_ids: tuple[str, ...]


@dataclass(frozen=True)
class ManifestSummary:
    """The slice of a manifest that grouped reporting needs."""

    domain_label: str
    seed: int
    genders: Mapping[str, str]


@dataclass(frozen=True)
class ProbeManifest:
    """A fully sampled evaluation plan."""

    domain_label: str
    seed: int
    images_per_identity: int
    identities_per_gender: int
    entries: tuple[ProbeEntry, ...]

    def __post_init__(self):
        if self.domain_label not in DOMAIN_LABELS:
            raise ValidationError(f"unknown domain label {self.domain_label!r}")
        if self.images_per_identity < 1 or self.identities_per_gender < 1:
            raise ValidationError("sampling sizes must be positive")
        per_gender = {g: 0 for g in SAMPLED_GENDERS}
        seen: set[str] = set()
        for entry in self.entries:
            if entry.identity_id in seen:
                raise ValidationError(f"identity {entry.identity_id!r} appears twice")
            seen.add(entry.identity_id)
            if entry.gender not in per_gender:
                raise ValidationError(f"unsampleable gender {entry.gender!r}")
            per_gender[entry.gender] += 1
            if len(entry.image_ids) != self.images_per_identity:
                raise ValidationError(
                    f"identity {entry.identity_id!r} has {len(entry.image_ids)} "
                    f"images, expected {self.images_per_identity}"
                )
            if len(set(entry.image_ids)) != len(entry.image_ids):
                raise ValidationError(
                    f"identity {entry.identity_id!r} repeats an image_id"
                )
        for g, n in per_gender.items():
            if n != self.identities_per_gender:
                raise ValidationError(
                    f"stratum {g!r} has {n} identities, expected "
                    f"{self.identities_per_gender}"
                )

    def gender_map(self) -> dict[str, str]:
        return {e.identity_id: e.gender for e in self.entries}

    def image_ids(self) -> list[str]:
        return [img for e in self.entries for img in e.image_ids]

    def summary(self) -> ManifestSummary:
        return ManifestSummary(self.domain_label, self.seed, self.gender_map())

    def to_json_dict(self) -> dict:
        return {
            "domain_label": self.domain_label,
            "seed": self.seed,
            "images_per_identity": self.images_per_identity,
            "identities_per_gender": self.identities_per_gender,
            "entries": [
                {
                    "identity_id": e.identity_id,
                    "gender": e.gender,
                    "image_ids": list(e.image_ids),
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ProbeManifest":
        try:
            entries = tuple(
                ProbeEntry(e["identity_id"], e["gender"], tuple(e["image_ids"]))
                for e in doc["entries"]
            )
            return cls(
                domain_label=doc["domain_label"],
                seed=int(doc["seed"]),
                images_per_identity=int(doc["images_per_identity"]),
                identities_per_gender=int(doc["identities_per_gender"]),
                entries=entries,
            )
        except KeyError as exc:
            raise ValidationError(f"manifest JSON missing key {exc}") from None


def manifest_to_json(manifest: ProbeManifest, extra: Mapping | None = None) -> str:
    doc = manifest.to_json_dict()
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def load_manifest(path: str | Path) -> ProbeManifest:
    with open(path, encoding="utf-8") as f:
        return ProbeManifest.from_json_dict(json.load(f))


def _sample_without_replacement(
    pool: Sequence, k: int, rng: np.random.Generator
) -> list:
    """First k elements of a partial Fisher-Yates shuffle of ``pool``."""
    items = list(pool)
    n = len(items)
    for i in range(k):
        j = i + int(rng.integers(0, n - i))
        items[i], items[j] = items[j], items[i]
    return items[:k]


def build_probe_manifest(
    candidates: Sequence[IdentityRecord],
    embeddings: EmbeddingSet,
    domain_label: str,
    seed: int,
    identities_per_gender: int,
    images_per_identity: int,
) -> ProbeManifest:
    """Sample a stratified probe manifest from candidate identities.

    Identities are sampled uniformly without replacement per gender stratum,
    then images uniformly without replacement per identity.  Candidates with
    fewer than ``images_per_identity`` rows in ``embeddings`` are excluded
    before identity sampling and reported at warning level.  Deterministic in
    ``seed``: strata are processed in fixed order ("female" then "male") over
    pools sorted by identity_id.
    """
    if identities_per_gender < 1 or images_per_identity < 1:
        raise ValidationError("sampling sizes must be positive")
    rows = embeddings.rows_by_identity()

    pools: dict[str, list[str]] = {g: [] for g in SAMPLED_GENDERS}
    too_few: list[str] = []
    seen: set[str] = set()
    for rec in candidates:
        if rec.identity_id in seen:
            raise ValidationError(f"duplicate candidate identity_id {rec.identity_id!r}")
        seen.add(rec.identity_id)
        if rec.gender not in pools:
            continue
        if len(rows.get(rec.identity_id, ())) < images_per_identity:
            too_few.append(rec.identity_id)
            continue
        pools[rec.gender].append(rec.identity_id)
    if too_few:
        logger.warning(
            "excluded %d candidate identities with fewer than %d images: %s",
            len(too_few),
            images_per_identity,
            ", ".join(sorted(too_few)[:10]) + ("..." if len(too_few) > 10 else ""),
        )

    rng = np.random.Generator(np.random.PCG64(seed))
    gender_of: dict[str, str] = {}
    selected: list[str] = []
    for gender in SAMPLED_GENDERS:
        pool = sorted(pools[gender])
        if len(pool) < identities_per_gender:
            raise StratumShortfallError(gender, identities_per_gender, len(pool))
        picked = _sample_without_replacement(pool, identities_per_gender, rng)
        selected.extend(picked)
        for ident in picked:
            gender_of[ident] = gender

    entries = []
    for ident in sorted(selected):
        images = [embeddings.image_ids[r] for r in rows[ident]]
        picked = _sample_without_replacement(images, images_per_identity, rng)
        entries.append(ProbeEntry(ident, gender_of[ident], tuple(sorted(picked))))
    entries.sort(key=lambda e: (e.gender, e.identity_id))

    return ProbeManifest(
        domain_label=domain_label,
        seed=seed,
        images_per_identity=images_per_identity,
        identities_per_gender=identities_per_gender,
        entries=tuple(entries),
    )


def split_candidates(
    source: Sequence[IdentityRecord], result: MatchResult
) -> tuple[list[IdentityRecord], list[IdentityRecord]]:
    """Partition source records into (matched, unmatched) candidate lists."""
    matched_ids = {m.source_identity_id for m in result.matched}
    ins = [r for r in source if r.identity_id in matched_ids]
    outs = [r for r in source if r.identity_id not in matched_ids]
    return ins, outs
