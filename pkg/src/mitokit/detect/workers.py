"""Built-in detector workers speaking the NDJSON protocol on stdin/stdout.

Usage::

    python -m mitokit.detect.workers echo
    python -m mitokit.detect.workers oracle --index patches/index.ndjson --drop-rate 0.2 --fp-rate 2

``echo`` answers every job with one detection at the patch centre whose score
is derived from the patch id. ``oracle`` looks the patch up in a patch index
and emits noisy ground truth (see :mod:`mitokit.detect.oracle`).
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from typing import Callable, TextIO

from ..core import Point2D
from ..patchset import read_index
from .oracle import OracleParams, detect_patch
from .protocol import READY_LINE, PatchDetection, WorkerJob, WorkerResult, decode_job, encode_result


def echo_detect(job: WorkerJob) -> list[PatchDetection]:
    score = int.from_bytes(hashlib.sha256(job.patch_id.encode("utf-8")).digest()[:4], "little") / 2**32
    return [PatchDetection(job.patch_id, Point2D(job.width / 2, job.height / 2), score)]


def serve(detect: Callable[[WorkerJob], list[PatchDetection]], stdin: TextIO = sys.stdin, stdout: TextIO = sys.stdout) -> None:
    stdout.write(READY_LINE + "\n")
    stdout.flush()
    for line in stdin:
        if not line.strip():
            continue
        job = decode_job(line)
        stdout.write(encode_result(WorkerResult(job.patch_id, tuple(detect(job)))) + "\n")
        stdout.flush()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mitokit-worker")
    sub = parser.add_subparsers(dest="kind", required=True)
    sub.add_parser("echo")
    oracle = sub.add_parser("oracle")
    oracle.add_argument("--index", required=True, help="patch index NDJSON with local ground truth")
    oracle.add_argument("--jitter-sigma", type=float, default=0.0)
    oracle.add_argument("--drop-rate", type=float, default=0.0)
    oracle.add_argument("--fp-rate", type=float, default=0.0)
    oracle.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if args.kind == "echo":
        serve(echo_detect)
        return 0
    specs = {s.patch_id: s for s in read_index(args.index)}
    params = OracleParams(args.jitter_sigma, args.drop_rate, args.fp_rate, args.seed)
    serve(lambda job: detect_patch(specs[job.patch_id], params))
    return 0


if __name__ == "__main__":
    sys.exit(main())
