#!/usr/bin/env python3
"""Wall-time scaling of the banded fast matvec (thin wrapper around the
`bench` subcommand; doubling N at fixed band width should roughly double
the time once past the interpreter overhead)."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from nswave.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main(["bench", "--points", "6"] + sys.argv[1:]))
