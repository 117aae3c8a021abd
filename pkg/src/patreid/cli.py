"""Command-line entry point.

Subcommands: synth, build-vocab, encode, query, evaluate.  Every run is a
pure function of its flags plus input files; re-running never mutates
inputs.  Exit codes: 0 success, 1 I/O or numeric failure, 2 usage or
validation error (bad flags, missing artifacts, insufficient data).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .encode import (
    embed_image,
    load_embedding_store,
    train_vocabulary,
    write_embedding_store,
)
from .geometry import GeometryError
from .ingest import (
    ManifestError,
    PatfError,
    load_entry_features,
    load_manifest,
    parse_feature_file,
)
from .reid import (
    RULES,
    CombineParams,
    DbEntry,
    MatchingParams,
    ReidDatabase,
    ReidError,
    evaluate_leave_one_out,
    evaluate_split,
    query_database,
    write_per_query_csv,
)
from .synth import SynthConfig, generate_benchmark
from .vocab import VocabError, load_vocabulary, save_vocabulary

RULE_TOKENS = {
    "app": "appearance_only",
    "geom": "geometry_only",
    "poly": "polynomial",
    "exp": "exponential",
}

# SynthConfig field -> flag, for validation messages that name the flag.
SYNTH_FLAGS = {
    "seed": "--seed",
    "n_individuals": "--individuals",
    "views_per_individual": "--views",
    "points_per_individual": "--points",
    "descriptor_dim": "--descriptor-dim",
    "descriptor_noise_sigma": "--noise",
    "dropout_rate": "--dropout",
    "clutter_rate": "--clutter",
    "max_perspective": "--max-perspective",
}


class UsageError(Exception):
    """Bad arguments, missing artifacts, or insufficient data (exit 2)."""


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _combine_params(args) -> CombineParams:
    params = CombineParams(
        rule=RULE_TOKENS[args.rule] if hasattr(args, "rule") else "exponential",
        a=args.a,
        shortlist_size=args.shortlist,
        inlier_threshold=args.inlier_thresh,
    )
    try:
        params.validate()
    except ReidError as exc:
        raise UsageError(str(exc)) from None
    return params


def _matching_params(args) -> MatchingParams:
    if not 0 < args.max_desc_dist <= 2:
        raise UsageError(f"--max-desc-dist must be in (0, 2], got {args.max_desc_dist}")
    if args.ratio is not None and not 0 < args.ratio <= 1:
        raise UsageError(f"--ratio must be in (0, 1], got {args.ratio}")
    return MatchingParams(
        mutual=args.mutual, max_distance=args.max_desc_dist, ratio=args.ratio
    )


def cmd_synth(args) -> int:
    config = SynthConfig(
        seed=args.seed,
        n_individuals=args.individuals,
        views_per_individual=args.views,
        points_per_individual=args.points,
        descriptor_dim=args.descriptor_dim,
        descriptor_noise_sigma=args.noise,
        dropout_rate=args.dropout,
        clutter_rate=args.clutter,
        max_perspective=args.max_perspective,
    )
    try:
        config.validate()
    except ValueError as exc:
        message = str(exc)
        for fld, flag in SYNTH_FLAGS.items():
            message = message.replace(fld, flag)
        raise UsageError(message) from None
    generate_benchmark(config, args.out)
    print(Path(args.out) / "manifest.csv")
    return 0


def cmd_build_vocab(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    db_entries = manifest.with_role("database")
    if not db_entries:
        raise UsageError("no database entries in manifest")
    feature_sets = [load_entry_features(manifest, e) for e in db_entries]
    kpca_dim = args.kpca_dim if args.kpca_dim > 0 else None
    try:
        vocabulary = train_vocabulary(
            feature_sets,
            gmm_k=args.gmm_k,
            pca_dim=args.pca_dim,
            kpca_dim=kpca_dim,
            alpha=args.alpha,
            whiten=args.whiten,
            seed=args.seed,
        )
    except VocabError as exc:
        raise UsageError(f"insufficient data: {exc}") from None
    save_vocabulary(vocabulary, args.out)
    print(args.out)
    return 0


def cmd_encode(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    vocabulary = load_vocabulary(_require_file(args.vocab, "vocabulary"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for role in ("database", "query"):
        entries = manifest.with_role(role)
        if not entries:
            continue
        items = []
        for entry in entries:
            features = load_entry_features(manifest, entry)
            items.append((entry.image_id, embed_image(features, vocabulary)))
        path = out_dir / f"{role}.patemb"
        write_embedding_store(items, path)
        print(path)
    return 0


def cmd_query(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    vocabulary = load_vocabulary(_require_file(args.vocab, "vocabulary"))
    query_features = parse_feature_file(_require_file(args.features, "feature file"))
    db_entries = manifest.with_role("database")
    if not db_entries:
        raise UsageError("no database entries in manifest")

    stored = {}
    if args.embeddings:
        stored = dict(load_embedding_store(_require_file(args.embeddings, "embedding store")))
    entries = []
    for e in db_entries:
        features = load_entry_features(manifest, e)
        if e.image_id in stored:
            embedding = stored[e.image_id]
        else:
            embedding = embed_image(features, vocabulary)
        entries.append(
            DbEntry(
                image_id=e.image_id,
                individual_id=e.individual_id,
                viewpoint=e.viewpoint,
                embedding=embedding,
                features=features,
            )
        )
    try:
        db = ReidDatabase(vocabulary=vocabulary, entries=entries)
    except ReidError as exc:
        raise UsageError(str(exc)) from None

    params = _combine_params(args)
    matching = _matching_params(args)
    result = query_database(
        db, query_features, params, seed=args.seed, matching=matching
    )

    best = {}
    for c in result.candidates:
        best.setdefault(c.individual_id, c)
    print(f"{'rank':>4}  {'individual':<16} {'db_image':<20} "
          f"{'d_L':>10} {'n':>5} {'omega':>8} {'d_C':>12}")
    for rank, individual in enumerate(result.individuals[: args.topk], start=1):
        c = best[individual]
        print(
            f"{rank:>4}  {individual:<16} {c.db_image_id:<20} "
            f"{c.d_L:>10.6f} {c.n:>5} {c.omega:>8.4f} {c.d_C:>12.6g}"
        )
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    vocabulary = load_vocabulary(_require_file(args.vocab, "vocabulary"))
    matching = _matching_params(args)
    geometry_cache = {}
    feature_cache = {}

    reports = {}
    for rule in RULES:
        params = CombineParams(
            rule=rule,
            a=args.a,
            shortlist_size=args.shortlist,
            inlier_threshold=args.inlier_thresh,
        )
        try:
            params.validate()
        except ReidError as exc:
            raise UsageError(str(exc)) from None
        evaluate = evaluate_split if args.protocol == "split" else evaluate_leave_one_out
        try:
            reports[rule] = evaluate(
                manifest,
                vocabulary,
                params,
                k_max=args.topk,
                seed=args.seed,
                matching=matching,
                geometry_cache=geometry_cache,
                feature_cache=feature_cache,
            )
        except ReidError as exc:
            raise UsageError(str(exc)) from None

    first = next(iter(reports.values()))
    header = "".join(f"  top-{k:<4}" for k in range(1, args.topk + 1))
    print(f"{'rule':<16}{header}")
    for rule, report in reports.items():
        cells = "".join(f"  {acc:<8.4f}" for acc in report.accuracies)
        print(f"{rule:<16}{cells}")
    print(f"queries: {first.n_queries}   excluded: {len(first.excluded)}")
    for image_id, reason in first.excluded:
        print(f"  excluded {image_id}: {reason}")

    if args.per_query_csv:
        write_per_query_csv(reports, args.per_query_csv)
        print(args.per_query_csv)
    return 0


def _add_combine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--a", type=float, default=2.0,
                   help="polynomial rule exponent")
    p.add_argument("--inlier-thresh", type=float, default=0.1,
                   help="RANSAC inlier threshold in normalized coordinates")
    p.add_argument("--shortlist", type=int, default=50,
                   help="entries geometrically verified per query (0 = all)")
    p.add_argument("--mutual", action=argparse.BooleanOptionalAction, default=True,
                   help="require mutual nearest-neighbor matches")
    p.add_argument("--max-desc-dist", type=float, default=0.9,
                   help="descriptor cosine-distance cutoff for matches")
    p.add_argument("--ratio", type=float, default=None,
                   help="Lowe-style nearest/second-nearest ratio cutoff (off by default)")
    p.add_argument("--topk", type=int, default=5, help="ranks to report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patreid",
        description="Pattern-based animal re-identification engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--individuals", type=int, required=True)
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--points", type=int, default=80)
    p.add_argument("--descriptor-dim", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.05,
                   help="descriptor Gaussian noise sigma")
    p.add_argument("--dropout", type=float, default=0.2,
                   help="per-point dropout probability in query views")
    p.add_argument("--clutter", type=float, default=0.2,
                   help="clutter points as a fraction of true points")
    p.add_argument("--max-perspective", type=float, default=0.15,
                   help="bound on homography distortion")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-vocab", help="train the appearance vocabulary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="vocabulary file to write")
    p.add_argument("--gmm-k", type=int, default=16)
    p.add_argument("--pca-dim", type=int, default=64)
    p.add_argument("--kpca-dim", type=int, default=0,
                   help="kernel-PCA dimension (0 = min(N_db - 1, 512))")
    p.add_argument("--alpha", type=float, default=0.5,
                   help="power-normalization exponent")
    p.add_argument("--whiten", action=argparse.BooleanOptionalAction, default=True,
                   help="whiten PCA projections")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("encode", help="embed manifest images into stores")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output directory for .patemb files")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("query", help="rank database individuals for one image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--features", required=True, help="query PATF file")
    p.add_argument("--embeddings", default=None,
                   help="optional database.patemb store (skips re-embedding)")
    p.add_argument("--rule", choices=sorted(RULE_TOKENS), default="exp")
    _add_combine_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="run all rules under a protocol")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--protocol", choices=("split", "loo"), default="split")
    p.add_argument("--per-query-csv", default=None)
    _add_combine_flags(p)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PatfError, ManifestError, VocabError, GeometryError, ReidError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
