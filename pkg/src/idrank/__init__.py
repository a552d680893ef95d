"""Closed-set identification audit harness for embedding galleries.

Evaluates probe sets against a large distractor gallery with the
needle-insertion ranking protocol and reports rank-k identification
accuracy cross-tabulated by training-set membership and gender.
"""

from .engine import (
    DEFAULT_THRESHOLDS,
    EvalResult,
    RankCounters,
    accuracies,
    distance,
    evaluate_identity_fast,
    evaluate_identity_naive,
    evaluate_probe_set,
    rank_of_needle,
)
from .errors import (
    FormatError,
    IdrankError,
    ReportError,
    StratumShortfallError,
    ValidationError,
)
from .probes import (
    MatchResult,
    ProbeManifest,
    build_probe_manifest,
    canonicalize_name,
    match_identities,
)
from .report import GroupedReport, build_report, render
from .store import (
    EmbeddingSet,
    IdentityRecord,
    concat,
    fingerprint,
    normalize_rows,
    read_embedding_file,
    read_embedding_set,
    write_embedding_file,
    write_embedding_set,
)
from .synthetic import SyntheticSpec, generate

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_THRESHOLDS",
    "EmbeddingSet",
    "EvalResult",
    "FormatError",
    "GroupedReport",
    "IdentityRecord",
    "IdrankError",
    "MatchResult",
    "ProbeManifest",
    "RankCounters",
    "ReportError",
    "StratumShortfallError",
    "SyntheticSpec",
    "ValidationError",
    "accuracies",
    "build_probe_manifest",
    "build_report",
    "canonicalize_name",
    "concat",
    "distance",
    "evaluate_identity_fast",
    "evaluate_identity_naive",
    "evaluate_probe_set",
    "fingerprint",
    "generate",
    "match_identities",
    "normalize_rows",
    "rank_of_needle",
    "read_embedding_file",
    "read_embedding_set",
    "render",
    "write_embedding_file",
    "write_embedding_set",
]
