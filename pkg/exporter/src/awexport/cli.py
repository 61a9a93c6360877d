"""Command line: awexport export --manifest <tsv> --encoder <id> --layer <n> --out <awf>"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ExportJob, export, load_manifest, validate_alignment_passthrough


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="awexport",
        description="Dump one encoder layer's frame representations to an AWF file.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export")
    p.add_argument("--manifest", required=True, help="TSV: utt_id<TAB>audio_path")
    p.add_argument("--encoder", required=True,
                   help="transformers model directory or identifier")
    p.add_argument("--layer", type=int, required=True,
                   help="1-based transformer layer to export")
    p.add_argument("--out", required=True, help="output AWF path")
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--max-window-s", type=float, default=20.0)
    p.add_argument("--overlap-s", type=float, default=1.0)
    p.add_argument("--device", default="cpu")
    p.add_argument("--alignments", default=None,
                   help="optional alignment TSV to validate and pass through")
    p.add_argument("--alignments-out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExportJob(
            manifest=load_manifest(args.manifest),
            encoder_id=args.encoder,
            layer=args.layer,
            out_path=Path(args.out),
            sample_rate=args.sample_rate,
            max_window_s=args.max_window_s,
            overlap_s=args.overlap_s,
            device=args.device,
        )
        out = export(job)
        print(f"export: {len(job.manifest)} utterances -> {out}")
        if args.alignments is not None:
            dst = args.alignments_out or str(Path(args.out).with_suffix(".ali.tsv"))
            n = validate_alignment_passthrough(args.alignments, dst)
            print(f"alignments: {n} entries passed through -> {dst}")
        return 0
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        import traceback

        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
