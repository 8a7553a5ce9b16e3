"""Mock unpackers as a child process, following the external unpacker contract.

    python -m packval.mock_unpacker FAMILY INPUT OUTPUT

FAMILY is a key of :data:`packval.mock.MOCK_UNPACKERS`. A rejected input
exits with status 1 and writes nothing.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .mock import MOCK_UNPACKERS, WrongFamily


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="packval.mock_unpacker")
    p.add_argument("family", choices=sorted(MOCK_UNPACKERS))
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    args = p.parse_args(argv)
    try:
        out = MOCK_UNPACKERS[args.family](args.input.read_bytes())
    except WrongFamily as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return 1
    args.output.write_bytes(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
