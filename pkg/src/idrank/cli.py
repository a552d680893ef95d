"""Command-line front-end for reproducible identification audits.

Subcommands: build-probes, gen-synthetic, evaluate, report, verify.
Outputs are written atomically (temp file + rename) and every artifact
echoes its resolved configuration and input fingerprints for provenance.
Progress goes to stderr; machine-readable output goes to stdout or files.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 validation or format
error, 1 unexpected failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import zlib
from pathlib import Path

from . import engine, probes, report, store, synthetic
from .errors import IdrankError

PARALLELISM_ENV = "IDRANK_THREADS"


def _atomic_write(path: str | Path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so failures leave no partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _atomic_write_text(path: str | Path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def _atomic_write_embeddings(path: str | Path, es: store.EmbeddingSet) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            store.write_embedding_set(es, f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _file_crc(path: str | Path) -> str:
    crc = 0
    with open(path, "rb") as f:
        while chunk := f.read(1 << 20):
            crc = zlib.crc32(chunk, crc)
    return f"crc32:{crc:08x}"


def _progress_printer(label: str):
    def tick(done: int, total: int) -> None:
        if done == total or done % 25 == 0:
            print(f"{label}: {done}/{total} identities", file=sys.stderr)

    return tick


def _default_parallelism() -> int:
    raw = os.environ.get(PARALLELISM_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise IdrankError(f"{PARALLELISM_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise IdrankError(f"{PARALLELISM_ENV} must be positive, got {value}")
    return value


def _parse_thresholds(raw: str) -> tuple[int, ...]:
    try:
        values = [int(p) for p in raw.split(",") if p.strip() != ""]
    except ValueError:
        raise IdrankError(f"thresholds must be comma-separated integers, got {raw!r}") from None
    return engine.check_thresholds(values)


def _cmd_build_probes(args: argparse.Namespace) -> int:
    source = store.read_identity_csv(args.source_identities)
    reference = store.read_identity_csv(args.reference_identities)
    embeddings = store.read_embedding_file(args.embeddings)
    match = probes.match_identities(source, reference)
    matched, unmatched = probes.split_candidates(source, match)
    candidates = matched if args.domain == "in" else unmatched
    domain_label = probes.IN_DOMAIN if args.domain == "in" else probes.OUT_OF_DOMAIN
    print(
        f"matched {len(match.matched)} source identities, "
        f"{len(match.unmatched)} unmatched, "
        f"{len(match.ambiguous)} ambiguous reference names",
        file=sys.stderr,
    )
    manifest = probes.build_probe_manifest(
        candidates=candidates,
        embeddings=embeddings,
        domain_label=domain_label,
        seed=args.seed,
        identities_per_gender=args.identities_per_gender,
        images_per_identity=args.images_per_identity,
    )
    provenance = {
        "provenance": {
            "command": "build-probes",
            "source_identities": _file_crc(args.source_identities),
            "reference_identities": _file_crc(args.reference_identities),
            "embeddings": store.fingerprint(embeddings),
            "identities_per_gender": args.identities_per_gender,
            "images_per_identity": args.images_per_identity,
            "seed": args.seed,
            "domain": domain_label,
        }
    }
    _atomic_write_text(args.out, probes.manifest_to_json(manifest, extra=provenance))
    print(f"wrote manifest: {args.out}", file=sys.stderr)
    return 0


def _cmd_gen_synthetic(args: argparse.Namespace) -> int:
    spec = synthetic.load_spec(args.spec)
    probe_set, gallery_set = synthetic.generate(spec)

    for path, es in ((args.out_probe, probe_set), (args.out_gallery, gallery_set)):
        _atomic_write_embeddings(path, es)
        print(f"wrote {es.count} x {es.dim} embeddings: {path}", file=sys.stderr)

    if args.out_manifest:
        domain_label = probes.IN_DOMAIN if args.domain == "in" else probes.OUT_OF_DOMAIN
        manifest = synthetic.synthetic_manifest(spec, probe_set, domain_label)
        provenance = {
            "provenance": {
                "command": "gen-synthetic",
                "spec": _file_crc(args.spec),
                "probe_embeddings": store.fingerprint(probe_set),
                "gallery_embeddings": store.fingerprint(gallery_set),
            }
        }
        _atomic_write_text(args.out_manifest, probes.manifest_to_json(manifest, extra=provenance))
        print(f"wrote manifest: {args.out_manifest}", file=sys.stderr)
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    manifest = probes.load_manifest(args.manifest)
    probe_embeddings = store.read_embedding_file(args.probe_embeddings)
    gallery = store.read_embedding_file(args.gallery)
    parallelism = args.parallelism if args.parallelism else _default_parallelism()
    result = engine.evaluate_probe_set(
        manifest=manifest,
        probe_embeddings=probe_embeddings,
        gallery=gallery,
        thresholds=_parse_thresholds(args.thresholds),
        parallelism=parallelism,
        progress=_progress_printer("evaluate"),
    )
    _atomic_write_text(args.out, engine.result_to_json(result))
    acc = engine.accuracies(result.counters)
    summary = ", ".join(f"rank-{k}: {100.0 * v:.2f}%" for k, v in acc.items())
    print(f"done ({summary})", file=sys.stderr)
    print(f"wrote result: {args.out}", file=sys.stderr)
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    in_result = engine.load_result(args.in_path)
    out_result = engine.load_result(args.out_of_path)
    grouped = report.build_report(in_result, out_result)
    text = report.render(grouped, args.format)
    if args.out:
        _atomic_write_text(args.out, text)
        print(f"wrote report: {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(text)
    return 0


def _verify_one(path: Path) -> str | None:
    """Returns an error message, or None if the file checks out."""
    try:
        with open(path, "rb") as f:
            head = f.read(4)
        if head == store.MAGIC:
            store.read_embedding_file(path)
            return None
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if "entries" in doc:
            probes.ProbeManifest.from_json_dict(doc)
        elif "per_identity" in doc:
            result = engine.load_result(path)
            totals = engine.RankCounters.zero(sorted(result.counters.hits))
            for counters in result.per_identity.values():
                totals.add(counters)
            if totals != result.counters:
                return "global counters do not equal the sum of per-identity counters"
        else:
            return "unrecognized JSON document (neither manifest nor result)"
        return None
    except IdrankError as exc:
        return str(exc)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        return str(exc)


def _cmd_verify(args: argparse.Namespace) -> int:
    failures = 0
    for path in args.files:
        error = _verify_one(Path(path))
        if error is None:
            print(f"ok: {path}", file=sys.stderr)
        else:
            failures += 1
            print(f"FAIL: {path}: {error}", file=sys.stderr)
    return 4 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idrank",
        description="Closed-set identification audits over embedding galleries.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-probes", help="match identity lists and sample a probe manifest")
    p.add_argument("--source-identities", required=True, metavar="CSV")
    p.add_argument("--reference-identities", required=True, metavar="CSV")
    p.add_argument("--embeddings", required=True, metavar="FILE")
    p.add_argument("--domain", required=True, choices=("in", "out"))
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--identities-per-gender", type=int, default=500)
    p.add_argument("--images-per-identity", type=int, default=50)
    p.set_defaults(func=_cmd_build_probes)

    p = sub.add_parser("gen-synthetic", help="generate synthetic probe and gallery embeddings")
    p.add_argument("--spec", required=True, metavar="FILE")
    p.add_argument("--out-probe", required=True, metavar="FILE")
    p.add_argument("--out-gallery", required=True, metavar="FILE")
    p.add_argument("--out-manifest", metavar="FILE")
    p.add_argument("--domain", choices=("in", "out"), default="in")
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("evaluate", help="run the identification protocol for one probe set")
    p.add_argument("--manifest", required=True, metavar="FILE")
    p.add_argument("--probe-embeddings", required=True, metavar="FILE")
    p.add_argument("--gallery", required=True, metavar="FILE")
    p.add_argument("--thresholds", default="1,10,100")
    p.add_argument(
        "--parallelism",
        type=int,
        default=0,
        help=f"worker threads (default: ${PARALLELISM_ENV} or 1)",
    )
    p.add_argument("--out", required=True, metavar="FILE")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="cross-tabulate two evaluation results")
    p.add_argument("--in", dest="in_path", required=True, metavar="FILE")
    p.add_argument("--out-of", dest="out_of_path", required=True, metavar="FILE")
    p.add_argument("--format", choices=report.RENDER_FORMATS, default="markdown")
    p.add_argument("--out", metavar="FILE")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("verify", help="re-check file CRCs and invariants without evaluating")
    p.add_argument("files", nargs="+", metavar="FILE")
    p.set_defaults(func=_cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IdrankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
