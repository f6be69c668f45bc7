"""Command-line front end: one image per spec file.

`plots render --spec fig.json` reads a JSON object with the FigureSpec
fields and writes the image. Relative paths inside the spec resolve
against the spec file's directory, so a spec can live next to the sweep
output it draws. Exit codes: 0 success, 1 usage problems, 2 schema
errors in the input files, 3 I/O errors.
"""

import argparse
import json
import sys
from pathlib import Path

from .figures import FigureSpec, SchemaError, render


def cmd_render(args):
    payload = json.loads(Path(args.spec).read_text())
    if not isinstance(payload, dict):
        raise ValueError("spec file must hold a single JSON object")
    spec = FigureSpec.from_mapping(payload, base_dir=Path(args.spec).parent)
    print(render(spec))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="plots",
        description="Regenerate figures from sweep CSV/JSON outputs.")
    subs = parser.add_subparsers(dest="command", required=True)
    p = subs.add_parser("render", help="render one figure from a JSON spec")
    p.add_argument("--spec", type=Path, required=True,
                   help="JSON file with the figure description")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"plots: schema error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, KeyError) as exc:
        print(f"plots: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"plots: i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
