"""
python -m mino

Thread limits must be in the environment before numpy loads its BLAS, so
--threads / MINO_THREADS are applied here ahead of any numerical import.
"""

import os
import sys

from dotenv import load_dotenv

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _requested_threads(argv):
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--threads="):
            return arg.split("=", 1)[1]
    return os.getenv("MINO_THREADS")


def _apply_thread_limit(argv) -> None:
    threads = _requested_threads(argv)
    if threads and threads.isdigit() and int(threads) > 0:
        for name in THREAD_VARIABLES:
            os.environ[name] = threads


if __name__ == "__main__":
    load_dotenv()
    _apply_thread_limit(sys.argv[1:])

    from mino.cli import main

    main()
