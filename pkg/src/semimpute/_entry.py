"""Console entry point.

BLAS thread counts must be pinned before numpy is first imported, so this
module must not import anything numpy-flavored at top level.  The package
__init__ is lazy for the same reason.
"""

from __future__ import annotations

import os
import sys

THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def pin_threads() -> None:
    """Default every BLAS backend to SEMIMPUTE_THREADS (itself default 1).

    Explicitly-set backend variables are respected.
    """
    n = os.environ.get("SEMIMPUTE_THREADS", "1")
    for var in THREAD_VARS:
        os.environ.setdefault(var, n)


def main(argv: list[str] | None = None) -> int:
    pin_threads()
    from .cli import run

    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(main())
