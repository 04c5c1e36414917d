"""Client side of the external clinical-metric adapter protocol.

Learned metrics (F1-CheXbert, F1-RadGraph, AlignScore) run in a separate
adapter process. One request and one reply are exchanged, each a single line
of JSON::

    -> {"metric": "F1RadGraph", "candidates": [...], "references": [...]}
    <- {"scores": [41.74, ...]}        or        {"error": "..."}

The adapter is reached either over ``tcp://host:port`` or by spawning a
command line and talking over its stdin/stdout.
"""

from __future__ import annotations

import json
import shlex
import socket
import subprocess
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from radkit.errors import AdapterProtocolError, AdapterUnavailable, LengthMismatch

__all__ = ["ExternalMetric", "ExternalMetricRequest", "external_metric"]


class ExternalMetric(str, Enum):
    F1_CHEXBERT = "F1CheXbert"
    F1_RADGRAPH = "F1RadGraph"
    ALIGN_SCORE = "AlignScore"


@dataclass(frozen=True)
class ExternalMetricRequest:
    """For AlignScore, ``references`` carries the input context of each output."""

    metric: ExternalMetric
    candidates: tuple[str, ...]
    references: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "metric", ExternalMetric(self.metric))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "references", tuple(self.references))
        if len(self.candidates) != len(self.references):
            raise LengthMismatch(
                f"{len(self.candidates)} candidates vs {len(self.references)} references"
            )

    def to_line(self) -> str:
        body = {
            "metric": self.metric.value,
            "candidates": list(self.candidates),
            "references": list(self.references),
        }
        return json.dumps(body, ensure_ascii=False) + "\n"


def _exchange_tcp(address: str, line: str, timeout: float) -> str:
    host, _, port = address.rpartition(":")
    try:
        with socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout) as sock:
            sock.sendall(line.encode("utf-8"))
            sock.shutdown(socket.SHUT_WR)
            chunks = []
            while True:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                chunks.append(chunk)
                if b"\n" in chunk:
                    break
    except (OSError, ValueError) as exc:
        raise AdapterUnavailable(f"cannot reach adapter at tcp://{address}: {exc}") from exc
    return b"".join(chunks).decode("utf-8")


def _exchange_process(command: str, line: str, timeout: float) -> str:
    try:
        proc = subprocess.run(
            shlex.split(command), input=line, capture_output=True, text=True, timeout=timeout
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise AdapterUnavailable(f"cannot run adapter {command!r}: {exc}") from exc
    if proc.returncode != 0 and not proc.stdout.strip():
        raise AdapterUnavailable(
            f"adapter {command!r} exited with {proc.returncode}: {proc.stderr.strip()[:200]}"
        )
    return proc.stdout


def external_metric(
    request: ExternalMetricRequest, endpoint: str, timeout: float = 600.0
) -> list[float]:
    """Send one batch to the adapter at ``endpoint`` and return its scores untouched."""
    line = request.to_line()
    if endpoint.startswith("tcp://"):
        reply = _exchange_tcp(endpoint[len("tcp://"):], line, timeout)
    else:
        reply = _exchange_process(endpoint, line, timeout)

    first = reply.strip().split("\n", 1)[0] if reply.strip() else ""
    try:
        data = json.loads(first)
    except json.JSONDecodeError as exc:
        raise AdapterProtocolError(f"adapter reply is not JSON: {first[:200]!r}") from exc
    if not isinstance(data, dict):
        raise AdapterProtocolError("adapter reply must be a JSON object")
    if "error" in data:
        raise AdapterProtocolError(f"adapter reported an error: {data['error']}")
    scores = data.get("scores")
    if not isinstance(scores, list) or not all(
        isinstance(s, (int, float)) and not isinstance(s, bool) for s in scores
    ):
        raise AdapterProtocolError("adapter reply needs a 'scores' list of numbers")
    if len(scores) != len(request.candidates):
        raise AdapterProtocolError(
            f"adapter returned {len(scores)} scores for {len(request.candidates)} candidates"
        )
    return [float(s) for s in scores]
