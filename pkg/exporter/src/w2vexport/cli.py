"""Command-line entry point: w2vexport export --audio-list ... --checkpoint ... --out ..."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportError, ExportJob, ListFormatError, export, read_audio_list


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ListFormatError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="w2vexport",
                     description="Export encoder hidden-feature stacks for a list of audio files")
    sub = parser.add_subparsers(dest="command")
    exp = sub.add_parser("export", help="run the exporter over an audio list")
    exp.add_argument("--audio-list", required=True,
                     help="TSV of audio path, utterance id, speaker label")
    exp.add_argument("--checkpoint", required=True,
                     help="encoder checkpoint id or path ('random-base' for a seeded random init)")
    exp.add_argument("--out", required=True, help="output directory")
    exp.add_argument("--quiet", action="store_true", help="suppress progress logging")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.command != "export":
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(levelname)s %(message)s")
        items = read_audio_list(args.audio_list)
        manifest = export(ExportJob(items=items, checkpoint=args.checkpoint,
                                    out_dir=args.out))
        print(f"manifest={manifest}")
        return 0
    except ListFormatError as exc:
        print(f"w2vexport: {exc}", file=sys.stderr)
        return 1
    except (ExportError, OSError) as exc:
        print(f"w2vexport: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
