"""Closed-set identification by needle insertion and L2 ranking.

For every identity in a probe manifest, each of its images in turn plays
the needle (the one gallery entry of the probe's true identity) while every
other image of the identity plays the probe.  The needle's rank is its
position among gallery-plus-needle ordered by distance to the probe, with
pessimistic ties: a distractor at exactly the needle's distance outranks
the needle, so reported accuracy never benefits from coincidental ties.

Two independent rank-extraction routes are provided.  The naive route
materializes the combined distance list, stably sorts it, and locates the
needle: the trusted oracle.  The fast route never sorts; it extracts the
k-th smallest gallery distance per probe (slab-wise, bounded memory) and
counts a hit whenever the needle's distance is strictly below it.  Both
routes consume distances from one shared kernel so that floating-point
rounding can never make them disagree.

Distances are squared L2 computed in float32 as ||t||^2 - 2<q,t> + ||q||^2
with the terms folded into a single matrix product (columns of norms and
ones appended to the operands; the -2 scaling is exact).  Squared L2 ranks
identically to L2.  BLAS pools are pinned to one thread inside evaluation,
so results are bit-identical for any worker count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ValidationError
from .probes import ManifestSummary, ProbeManifest
from .store import EmbeddingSet, fingerprint

DEFAULT_THRESHOLDS = (1, 10, 100)
DEFAULT_SLAB_ROWS = 32768

DISTANCE_MODES = ("l2", "squared_l2")


def check_thresholds(thresholds: Sequence[int]) -> tuple[int, ...]:
    """Validate a rank-threshold set: positive, strictly increasing."""
    out = tuple(int(k) for k in thresholds)
    if not out:
        raise ValidationError("threshold set must not be empty")
    if out[0] < 1 or any(b <= a for a, b in zip(out, out[1:])):
        raise ValidationError(
            f"thresholds must be positive and strictly increasing, got {list(out)}"
        )
    return out


def distance(a, b, mode: str = "squared_l2") -> float:
    """Euclidean distance (or its square) between two vectors.

    Computed from per-coordinate differences in float32, so exactly equal
    vectors yield exactly 0.0.
    """
    if mode not in DISTANCE_MODES:
        raise ValueError(f"unknown distance mode {mode!r}")
    av = np.asarray(a, dtype=np.float32)
    bv = np.asarray(b, dtype=np.float32)
    if av.shape != bv.shape or av.ndim != 1:
        raise ValidationError(f"dimension mismatch: {av.shape} vs {bv.shape}")
    diff = av - bv
    sq = float(np.einsum("i,i->", diff, diff))
    return math.sqrt(sq) if mode == "l2" else sq


def rank_of_needle(needle_dist: float, gallery_dists) -> int:
    """Needle position among gallery-plus-needle, pessimistic on ties.

    Returns 1 + (gallery distances strictly below the needle's) + (gallery
    distances exactly equal to it); range [1, len(gallery_dists) + 1].
    """
    gd = np.asarray(gallery_dists)
    nd = needle_dist
    return 1 + int(np.count_nonzero(gd < nd)) + int(np.count_nonzero(gd == nd))


@dataclass
class RankCounters:
    """Hit tallies per rank threshold plus the number of attempts."""

    attempts: int
    hits: dict[int, int]

    @classmethod
    def zero(cls, thresholds: Sequence[int]) -> "RankCounters":
        return cls(0, {int(k): 0 for k in thresholds})

    def add(self, other: "RankCounters") -> None:
        if set(self.hits) != set(other.hits):
            raise ValidationError("cannot merge counters with different thresholds")
        self.attempts += other.attempts
        for k, v in other.hits.items():
            self.hits[k] += v

    def to_json_dict(self) -> dict:
        return {"attempts": self.attempts, "hits": {str(k): v for k, v in self.hits.items()}}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RankCounters":
        return cls(int(doc["attempts"]), {int(k): int(v) for k, v in doc["hits"].items()})


def accuracies(counters: RankCounters) -> dict[int, float]:
    """Rank-k accuracy per threshold: hits / attempts."""
    if counters.attempts == 0:
        raise ValidationError("no attempts recorded; accuracies are undefined")
    return {k: h / counters.attempts for k, h in sorted(counters.hits.items())}


# --- distance kernel -------------------------------------------------------

def _augment_targets(mat: np.ndarray) -> np.ndarray:
    """Append [squared norm, 1] columns so the kernel is one matrix product."""
    n, d = mat.shape
    aug = np.empty((n, d + 2), dtype=np.float32)
    aug[:, :d] = mat
    aug[:, d] = np.einsum("ij,ij->i", mat, mat)
    aug[:, d + 1] = 1.0
    return aug


def _augment_queries(mat: np.ndarray) -> np.ndarray:
    """Append [1, squared norm] columns to -2x (the -2 scaling is exact)."""
    n, d = mat.shape
    aug = np.empty((n, d + 2), dtype=np.float32)
    np.multiply(mat, np.float32(-2.0), out=aug[:, :d])
    aug[:, d] = 1.0
    aug[:, d + 1] = np.einsum("ij,ij->i", mat, mat)
    return aug


def _distance_block(
    q_aug: np.ndarray, t_aug: np.ndarray, out: np.ndarray | None = None
) -> np.ndarray:
    """Squared distances, shape (queries, targets), clamped at zero."""
    block = np.dot(q_aug, t_aug.T, out=out)
    np.maximum(block, 0.0, out=block)
    return block


def _as_probe_matrix(identity_images, dim: int | None = None) -> np.ndarray:
    mat = np.ascontiguousarray(identity_images, dtype=np.float32)
    if mat.ndim != 2:
        raise ValidationError(f"identity images must form a 2-D matrix, got {mat.shape}")
    if mat.shape[0] < 2:
        raise ValidationError("need at least 2 images of an identity to evaluate")
    if dim is not None and mat.shape[1] != dim:
        raise ValidationError(f"dimension mismatch: images {mat.shape[1]}, gallery {dim}")
    return mat


def _gallery_kth_dists(
    q_aug: np.ndarray,
    gal_aug: np.ndarray,
    thresholds: Sequence[int],
    slab_rows: int,
) -> np.ndarray:
    """k-th smallest gallery distance per probe, +inf where k exceeds G.

    The needle scores a rank-k hit exactly when its distance is strictly
    below this value, which reproduces pessimistic tie handling without
    materializing or sorting the full distance list.
    """
    n_probes = q_aug.shape[0]
    n_gallery = gal_aug.shape[0]
    out = np.full((len(thresholds), n_probes), np.inf, dtype=np.float32)
    reachable = [k for k in thresholds if k <= n_gallery]
    if not reachable:
        return out
    kmax = max(reachable)

    if n_gallery <= slab_rows:
        block = _distance_block(q_aug, gal_aug)
        block.partition([k - 1 for k in reachable], axis=1)
        candidates = block
    else:
        parts = []
        buf = np.empty((n_probes, slab_rows), dtype=np.float32)
        for lo in range(0, n_gallery, slab_rows):
            hi = min(lo + slab_rows, n_gallery)
            # np.dot needs a C-contiguous output; the reusable buffer only
            # fits full slabs, the tail slab allocates its own block
            out = buf if hi - lo == slab_rows else None
            blk = _distance_block(q_aug, gal_aug[lo:hi], out=out)
            if hi - lo > kmax:
                blk.partition(kmax - 1, axis=1)
                parts.append(blk[:, :kmax].copy())
            else:
                parts.append(blk.copy())
        candidates = np.concatenate(parts, axis=1)
        candidates.partition([k - 1 for k in reachable], axis=1)

    for row, k in enumerate(thresholds):
        if k <= n_gallery:
            out[row] = candidates[:, k - 1]
    return out


def _counters_from_blocks(
    intra: np.ndarray, kth: np.ndarray, thresholds: Sequence[int]
) -> RankCounters:
    n = intra.shape[0]
    offdiag = ~np.eye(n, dtype=bool)
    hits = {}
    for row, k in enumerate(thresholds):
        below = intra < kth[row][:, None]  # [probe, needle]
        hits[k] = int(np.count_nonzero(below & offdiag))
    return RankCounters(attempts=n * (n - 1), hits=hits)


def _identity_counters_fast(
    probes: np.ndarray,
    gal_aug: np.ndarray,
    thresholds: Sequence[int],
    slab_rows: int,
) -> RankCounters:
    q_aug = _augment_queries(probes)
    intra = _distance_block(q_aug, _augment_targets(probes))
    kth = _gallery_kth_dists(q_aug, gal_aug, thresholds, slab_rows)
    return _counters_from_blocks(intra, kth, thresholds)


def evaluate_identity_fast(
    identity_images,
    gallery: EmbeddingSet,
    thresholds: Sequence[int] = DEFAULT_THRESHOLDS,
    slab_rows: int = DEFAULT_SLAB_ROWS,
) -> RankCounters:
    """Counters for one identity via threshold counting; no full sort.

    Gallery distances are computed once per probe image and reused across
    all candidate needles, so kernel work is O(images * gallery) instead of
    the naive O(images^2 * gallery).  Exactly equal to the naive oracle.
    """
    thresholds = check_thresholds(thresholds)
    probes = _as_probe_matrix(identity_images, gallery.dim)
    with threadpool_limits(limits=1, user_api="blas"):
        return _identity_counters_fast(
            probes, _augment_targets(gallery.vectors), thresholds, slab_rows
        )


def evaluate_identity_naive(
    identity_images,
    gallery: EmbeddingSet,
    thresholds: Sequence[int] = DEFAULT_THRESHOLDS,
) -> RankCounters:
    """Trusted oracle: insert the needle, sort everything, find its position.

    For each (needle, probe) pair the combined gallery-plus-needle distance
    list is materialized and stably sorted with the needle appended last, so
    it lands after every tied distractor.  Memory and time scale with the
    full gallery; intended for desk-scale verification.
    """
    thresholds = check_thresholds(thresholds)
    probes = _as_probe_matrix(identity_images, gallery.dim)
    n = probes.shape[0]
    with threadpool_limits(limits=1, user_api="blas"):
        q_aug = _augment_queries(probes)
        intra = _distance_block(q_aug, _augment_targets(probes))
        gallery_dists = _distance_block(q_aug, _augment_targets(gallery.vectors))

    n_gallery = gallery.count
    counters = RankCounters.zero(thresholds)
    for needle in range(n):
        for probe in range(n):
            if probe == needle:
                continue
            combined = np.append(gallery_dists[probe], intra[probe, needle])
            order = np.argsort(combined, kind="stable")
            rank = int(np.nonzero(order == n_gallery)[0][0]) + 1
            counters.attempts += 1
            for k in thresholds:
                if rank <= k:
                    counters.hits[k] += 1
    return counters


# --- probe-set evaluation --------------------------------------------------

@dataclass
class EvalResult:
    """Global and per-identity counters plus the configuration echo."""

    counters: RankCounters
    per_identity: dict[str, RankCounters]
    config_echo: dict
    manifest_summary: ManifestSummary | None = None

    def to_json_dict(self) -> dict:
        doc = {
            "config_echo": dict(self.config_echo),
            "counters": self.counters.to_json_dict(),
            "per_identity": {
                ident: c.to_json_dict() for ident, c in self.per_identity.items()
            },
        }
        if self.manifest_summary is not None:
            doc["manifest_summary"] = {
                "domain_label": self.manifest_summary.domain_label,
                "seed": self.manifest_summary.seed,
                "genders": dict(self.manifest_summary.genders),
            }
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EvalResult":
        summary = None
        if "manifest_summary" in doc:
            ms = doc["manifest_summary"]
            summary = ManifestSummary(ms["domain_label"], int(ms["seed"]), dict(ms["genders"]))
        return cls(
            counters=RankCounters.from_json_dict(doc["counters"]),
            per_identity={
                ident: RankCounters.from_json_dict(c)
                for ident, c in doc["per_identity"].items()
            },
            config_echo=dict(doc["config_echo"]),
            manifest_summary=summary,
        )


def result_to_json(result: EvalResult) -> str:
    return json.dumps(result.to_json_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def load_result(path: str | Path) -> EvalResult:
    with open(path, encoding="utf-8") as f:
        return EvalResult.from_json_dict(json.load(f))


def evaluate_probe_set(
    manifest: ProbeManifest,
    probe_embeddings: EmbeddingSet,
    gallery: EmbeddingSet,
    thresholds: Sequence[int] = DEFAULT_THRESHOLDS,
    parallelism: int = 1,
    slab_rows: int = DEFAULT_SLAB_ROWS,
    progress: Callable[[int, int], None] | None = None,
) -> EvalResult:
    """Evaluate every identity in the manifest against the gallery.

    Work is partitioned by identity across ``parallelism`` threads; the
    gallery is shared read-only and per-identity counters are merged in
    manifest order, so the result is bit-identical for any worker count.
    """
    thresholds = check_thresholds(thresholds)
    if parallelism < 1:
        raise ValidationError("parallelism must be a positive integer")
    if manifest.images_per_identity < 2:
        raise ValidationError("evaluation needs at least 2 images per identity")
    if probe_embeddings.dim != gallery.dim:
        raise ValidationError(
            f"dimension mismatch: probes {probe_embeddings.dim}, gallery {gallery.dim}"
        )

    row_of = probe_embeddings.row_index()
    gallery_ids = set(gallery.image_ids)
    entry_rows: list[np.ndarray] = []
    for entry in manifest.entries:
        rows = []
        for img in entry.image_ids:
            if img not in row_of:
                raise ValidationError(
                    f"manifest image_id {img!r} not found in probe embeddings"
                )
            if img in gallery_ids:
                raise ValidationError(
                    f"manifest image_id {img!r} collides with a gallery image_id"
                )
            rows.append(row_of[img])
        entry_rows.append(np.asarray(rows, dtype=np.intp))

    config_echo = {
        "distance_mode": "squared_l2",
        "thresholds": list(thresholds),
        "gallery_fingerprint": fingerprint(gallery),
        "probe_fingerprint": fingerprint(probe_embeddings),
        "manifest_seed": manifest.seed,
        "manifest_domain": manifest.domain_label,
    }

    total = len(manifest.entries)
    per_identity: dict[str, RankCounters] = {}
    global_counters = RankCounters.zero(thresholds)

    with ExitStack() as stack:
        stack.enter_context(threadpool_limits(limits=1, user_api="blas"))
        gal_aug = _augment_targets(gallery.vectors)

        def one_identity(rows: np.ndarray) -> RankCounters:
            probes = np.ascontiguousarray(probe_embeddings.vectors[rows])
            return _identity_counters_fast(probes, gal_aug, thresholds, slab_rows)

        if parallelism == 1:
            results: Iterable[RankCounters] = map(one_identity, entry_rows)
        else:
            pool = stack.enter_context(ThreadPoolExecutor(max_workers=parallelism))
            results = pool.map(one_identity, entry_rows)
        done = 0
        for entry, counters in zip(manifest.entries, results):
            per_identity[entry.identity_id] = counters
            global_counters.add(counters)
            done += 1
            if progress is not None:
                progress(done, total)

    return EvalResult(
        counters=global_counters,
        per_identity=per_identity,
        config_echo=config_echo,
        manifest_summary=manifest.summary(),
    )
