from .oracle import OracleParams, detect_patch, oracle_detector
from .pool import DetectorPoolError, PatchResult, flatten, run_detector_pool
from .protocol import (
    PatchDetection,
    ProtocolError,
    WorkerJob,
    WorkerResult,
    decode_job,
    decode_result,
    encode_job,
    encode_result,
    read_detections,
    write_detections,
)

__all__ = [
    "DetectorPoolError",
    "OracleParams",
    "PatchDetection",
    "PatchResult",
    "ProtocolError",
    "WorkerJob",
    "WorkerResult",
    "decode_job",
    "decode_result",
    "detect_patch",
    "encode_job",
    "encode_result",
    "flatten",
    "oracle_detector",
    "read_detections",
    "run_detector_pool",
    "write_detections",
]
