"""Coordinator driving a pool of external detector processes over NDJSON pipes."""

from __future__ import annotations

import json
import logging
import queue
import subprocess
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from ..patchset import PatchSpec
from .protocol import PatchDetection, ProtocolError, WorkerJob, decode_result, encode_job

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0


class DetectorPoolError(RuntimeError):
    """The run could not process every patch.

    ``unprocessed`` lists the patch ids that exhausted their retries and
    ``causes`` maps each to the last failure observed for it.
    """

    def __init__(self, message: str, unprocessed: Sequence[str] = (), causes: Mapping[str, Exception] | None = None):
        super().__init__(message)
        self.unprocessed = list(unprocessed)
        self.causes = dict(causes or {})


class WorkerFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchResult:
    patch_id: str
    slide_id: str
    detections: tuple[PatchDetection, ...] = field(default=())


class _WorkerProcess:
    def __init__(self, command: Sequence[str], timeout: float):
        self.timeout = timeout
        self.proc = subprocess.Popen(
            list(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self.lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        assert self.proc.stdout is not None
        for line in self.proc.stdout:
            self.lines.put(line)
        self.lines.put(None)

    def readline(self) -> str:
        try:
            line = self.lines.get(timeout=self.timeout)
        except queue.Empty:
            raise WorkerFailure(f"worker timed out after {self.timeout:g} s") from None
        if line is None:
            code = self.proc.wait()
            raise WorkerFailure(f"worker exited with code {code}")
        return line.rstrip("\n")

    def wait_ready(self) -> None:
        line = self.readline()
        try:
            ok = json.loads(line) == {"ready": True}
        except json.JSONDecodeError:
            ok = False
        if not ok:
            raise WorkerFailure(f"expected ready line, got {line!r}")

    def request(self, job: WorkerJob) -> str:
        assert self.proc.stdin is not None
        try:
            self.proc.stdin.write(encode_job(job) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise WorkerFailure(f"worker pipe closed: {exc}") from None
        return self.readline()

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait()
        self._close_pipes()

    def close(self) -> None:
        try:
            if self.proc.stdin:
                self.proc.stdin.close()
            self.proc.wait(timeout=self.timeout)
        except (subprocess.TimeoutExpired, OSError):
            pass
        self.kill()

    def _close_pipes(self) -> None:
        for pipe in (self.proc.stdin, self.proc.stdout):
            try:
                if pipe:
                    pipe.close()
            except OSError:
                pass


class _Dispatcher:
    """Job queue shared by worker slots; tracks retries and in-flight work."""

    def __init__(self, jobs: Sequence[WorkerJob], retry_limit: int):
        self.retry_limit = retry_limit
        self._queue = deque(jobs)
        self._inflight = 0
        self._cv = threading.Condition()
        self.attempts: dict[str, int] = {}
        self.results: dict[str, list[PatchDetection]] = {}
        self.failed: dict[str, Exception] = {}
        self.fatal: Exception | None = None

    def take(self) -> WorkerJob | None:
        with self._cv:
            while not self._queue and self._inflight and self.fatal is None:
                self._cv.wait()
            if not self._queue or self.fatal is not None:
                return None
            self._inflight += 1
            return self._queue.popleft()

    def complete(self, job: WorkerJob, detections: list[PatchDetection]) -> None:
        with self._cv:
            self._inflight -= 1
            self.results[job.patch_id] = detections
            self._cv.notify_all()

    def fail(self, job: WorkerJob, exc: Exception) -> None:
        with self._cv:
            self._inflight -= 1
            n = self.attempts[job.patch_id] = self.attempts.get(job.patch_id, 0) + 1
            if n > self.retry_limit:
                self.failed[job.patch_id] = exc
            else:
                logger.info("requeueing %s after failure %d: %s", job.patch_id, n, exc)
                self._queue.append(job)
            self._cv.notify_all()

    def abort(self, exc: Exception) -> None:
        with self._cv:
            if self.fatal is None:
                self.fatal = exc
            self._cv.notify_all()


def _slot(command: Sequence[str], timeout: float, dispatcher: _Dispatcher) -> None:
    worker: _WorkerProcess | None = None
    spawn_failures = 0
    try:
        while True:
            if worker is None:
                try:
                    worker = _WorkerProcess(command, timeout)
                    worker.wait_ready()
                    spawn_failures = 0
                except OSError as exc:
                    dispatcher.abort(DetectorPoolError(f"cannot spawn worker {list(command)!r}: {exc}"))
                    return
                except WorkerFailure as exc:
                    worker.kill()
                    worker = None
                    spawn_failures += 1
                    if spawn_failures > dispatcher.retry_limit:
                        dispatcher.abort(DetectorPoolError(f"worker failed to start {spawn_failures} times: {exc}"))
                        return
                    continue
            job = dispatcher.take()
            if job is None:
                return
            try:
                line = worker.request(job)
                result = decode_result(line, {job.patch_id: job})
            except (WorkerFailure, ProtocolError) as exc:
                worker.kill()
                worker = None
                dispatcher.fail(job, exc)
                continue
            dispatcher.complete(job, list(result.detections))
    except BaseException as exc:  # keep the coordinator from waiting forever
        dispatcher.abort(exc)
        raise
    finally:
        if worker is not None:
            worker.close()


def detection_sort_key(d: PatchDetection) -> tuple:
    return (-d.score, d.center.x, d.center.y)


def run_detector_pool(
    patches: Sequence[PatchSpec],
    worker_command: Sequence[str],
    image_dir: str | Path | None = None,
    parallelism: int = 1,
    retry_limit: int = 2,
    timeout: float = DEFAULT_TIMEOUT,
    image_paths: Mapping[str, str] | None = None,
) -> list[PatchResult]:
    """Send every patch to a pool of ``parallelism`` worker processes.

    Patch images are referenced as ``image_dir/<patch_id>.png`` unless
    ``image_paths`` gives explicit paths. A crash, malformed line or timeout
    kills the worker and requeues its job; a job failing more than
    ``retry_limit`` times fails the run. Results come back sorted by
    ``(slide_id, patch_id)`` with detections ordered by score descending,
    then x, then y, so the output does not depend on scheduling.
    """
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    if retry_limit < 0:
        raise ValueError(f"retry_limit must be >= 0, got {retry_limit}")
    ids = [p.patch_id for p in patches]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patch ids in workload")
    jobs = []
    for p in patches:
        if image_paths is not None:
            path = image_paths[p.patch_id]
        elif image_dir is not None:
            path = str(Path(image_dir) / f"{p.patch_id}.png")
        else:
            raise ValueError("either image_dir or image_paths is required")
        jobs.append(WorkerJob(p.patch_id, str(path), p.width, p.height))
    if not jobs:
        return []

    dispatcher = _Dispatcher(jobs, retry_limit)
    threads = [
        threading.Thread(target=_slot, args=(worker_command, timeout, dispatcher), name=f"detector-worker-{i}")
        for i in range(min(parallelism, len(jobs)))
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    if dispatcher.fatal is not None:
        if isinstance(dispatcher.fatal, DetectorPoolError):
            raise dispatcher.fatal
        raise DetectorPoolError(f"detector pool aborted: {dispatcher.fatal}") from dispatcher.fatal
    missing = sorted(set(ids) - set(dispatcher.results))
    if missing:
        causes = {pid: dispatcher.failed[pid] for pid in missing if pid in dispatcher.failed}
        first = causes.get(missing[0])
        raise DetectorPoolError(
            f"{len(missing)} patch(es) unprocessed after {retry_limit} retries, first {missing[0]}: {first}",
            missing,
            causes,
        )

    slide_of = {p.patch_id: p.slide_id for p in patches}
    out = [
        PatchResult(pid, slide_of[pid], tuple(sorted(dets, key=detection_sort_key)))
        for pid, dets in dispatcher.results.items()
    ]
    out.sort(key=lambda r: (r.slide_id, r.patch_id))
    return out


def flatten(results: Sequence[PatchResult]) -> list[PatchDetection]:
    return [d for r in results for d in r.detections]
