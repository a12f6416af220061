"""Command-line front end.

One verb per pipeline stage plus `pipeline` (run everything, skipping
fresh stages) and `report` (turn a results tree into plot-data CSVs).
Stage verbs operate on an existing tree: they read upstream artifacts
from disk, so `quantlens causal --out runs/a` reruns just the causal
stage of that tree.

Scope flags (--subset, --bits, --alpha, --k) narrow a stage verb to a
slice of its normal work. A scoped run writes files for inspection but
drops the stage's freshness record, so the next full pipeline run redoes
the stage rather than trusting partial outputs.

Exit codes: 0 success, 2 bad usage or config, 3 a stage or lock failure.
"""

import argparse
import os
import sys
from pathlib import Path

from ..errors import (InvalidConfig, InvalidInput, LockHeld, QuantLensError,
                      StageFailure)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STAGE = 3

VERB_STAGE = {
    "gen-corpus": "gen-corpus",
    "train": "train",
    "quantize": "quantize",
    "eval": "partition-subsets",
    "probe": "probes",
    "causal": "causal",
    "diag": "diagnostics",
    "intervene": "interventions",
}

SCOPE_FLAGS = {
    "quantize": ("bits",),
    "probe": ("bits",),
    "causal": ("subset",),
    "diag": ("subset",),
    "intervene": ("subset", "bits", "alpha", "k"),
}


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, metavar="DIR",
                        help="experiment tree to read and write")
    common.add_argument("--manifest", metavar="PATH",
                        help="manifest JSON (default: the tree's own "
                             "manifest.json, else the stock experiment)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override every seed stream with N")
    common.add_argument("--threads", type=int, metavar="N",
                        help="torch thread count (default: "
                             "$QUANTLENS_THREADS or 1)")

    parser = argparse.ArgumentParser(
        prog="quantlens",
        description="Train, quantize, and diagnose a toy recall model.")
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb in VERB_STAGE:
        p = sub.add_parser(verb, parents=[common],
                           help=f"run the {VERB_STAGE[verb]} stage")
        flags = SCOPE_FLAGS.get(verb, ())
        if "subset" in flags:
            p.add_argument("--subset", choices=("robust", "failure", "all"),
                           help="fact subset the stage samples from")
        if "bits" in flags:
            p.add_argument("--bits", type=int,
                           help="restrict to one bit width")
        if "alpha" in flags:
            p.add_argument("--alpha", type=float,
                           help="restrict amplification to one alpha")
        if "k" in flags:
            p.add_argument("--k", type=int,
                           help="restrict layer sweeps to one prefix depth")

    p = sub.add_parser("pipeline", parents=[common],
                       help="run all stages, skipping fresh ones")
    p.add_argument("--force", action="store_true",
                   help="rerun every stage even when digests match")

    p = sub.add_parser("report",
                       help="write plot-data CSVs from a results tree")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="experiment tree to summarize")
    return parser


def _configure_threads(args):
    n = getattr(args, "threads", None)
    if n is None:
        n = int(os.environ.get("QUANTLENS_THREADS", "1"))
    if n < 1:
        raise InvalidConfig(f"thread count must be >= 1, got {n}")
    import torch
    torch.set_num_threads(n)


def _resolve_manifest(args):
    from .manifest import ExperimentManifest, default_manifest
    if args.manifest:
        manifest = ExperimentManifest.load(args.manifest)
    else:
        on_disk = Path(args.out) / "manifest.json"
        if on_disk.is_file():
            manifest = ExperimentManifest.load(on_disk)
        else:
            manifest = default_manifest(args.seed or 0)
    if args.seed is not None:
        doc = manifest.to_json()
        doc["seeds"] = {k: int(args.seed) for k in doc["seeds"]}
        manifest = ExperimentManifest.from_json(doc)
    return manifest


def _dispatch(args):
    if args.verb == "report":
        from .report import build_report
        index = build_report(args.out)
        print(f"report: {len(index['figures'])} figures under "
              f"{Path(args.out) / 'report'}")
        if index["missing"]:
            print("missing analyses: " + ", ".join(index["missing"]))
        print(f"report digest: {index['report_digest']}")
        return EXIT_OK

    _configure_threads(args)
    manifest = _resolve_manifest(args)

    if args.verb == "pipeline":
        from .pipeline import run_pipeline
        summary = run_pipeline(manifest, args.out, force=args.force)
        for stage, info in summary["stages"].items():
            print(f"{stage}: {info['status']} ({info['seconds']}s)")
        if "partition" in summary:
            counts = summary["partition"]
            print("partition: " + ", ".join(
                f"{k}={v}" for k, v in sorted(counts.items())))
        print(f"manifest digest: {summary['manifest_digest']}")
        return EXIT_OK

    from .pipeline import run_stage
    overrides = {}
    for key in ("subset", "bits", "alpha", "k"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    result = run_stage(manifest, args.out, VERB_STAGE[args.verb], overrides)
    scope = " (scoped; stage marked stale)" if overrides else ""
    print(f"{result['stage']}: wrote {len(result['files'])} files "
          f"in {result['seconds']}s{scope}")
    for rel in result["files"]:
        print(f"  {rel}")
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _dispatch(args)
    except (InvalidConfig, InvalidInput) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (StageFailure, LockHeld) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except QuantLensError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
