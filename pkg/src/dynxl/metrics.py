"""Evaluation reports: per-token losses and the aggregate metrics derived from them."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

LN2 = math.log(2.0)
REPORT_HEADER = "# dynxl eval report v1"


@dataclass
class SegmentSummary:
    start: int
    length: int
    nats: float


@dataclass
class EvalReport:
    token_losses: np.ndarray
    segments: list[SegmentSummary] = field(default_factory=list)
    label: str = ""
    config_fingerprint: str = ""
    vocab_fingerprint: str = ""
    unknown_tokens: int = 0
    floored_tokens: int = 0
    updates: int = 0

    @property
    def token_count(self) -> int:
        return int(self.token_losses.size)

    @property
    def total_nats(self) -> float:
        return math.fsum(self.token_losses.tolist())

    @property
    def mean_nats(self) -> float:
        return self.total_nats / self.token_count

    @property
    def bits_per_token(self) -> float:
        return self.mean_nats / LN2

    bpc = bits_per_token

    @property
    def perplexity(self) -> float:
        return math.exp(self.mean_nats)

    @classmethod
    def from_metric(cls, value: float, metric: str = "ppl", tokens: int = 1, **kw) -> "EvalReport":
        """A report whose aggregate metric equals ``value``, for tabulating published numbers."""
        nats = math.log(value) if metric == "ppl" else value * LN2
        return cls(np.full(tokens, nats), **kw)

    def to_text(self) -> str:
        lines = [
            REPORT_HEADER,
            f"label = {self.label}",
            f"config_fingerprint = {self.config_fingerprint}",
            f"vocab_fingerprint = {self.vocab_fingerprint}",
            f"token_count = {self.token_count}",
            f"total_nats = {self.total_nats!r}",
            f"bits_per_token = {self.bits_per_token!r}",
            f"perplexity = {self.perplexity!r}",
            f"unknown_tokens = {self.unknown_tokens}",
            f"floored_tokens = {self.floored_tokens}",
            f"updates = {self.updates}",
            f"losses_sha256 = {hashlib.sha256(self.token_losses.astype('<f8').tobytes()).hexdigest()}",
        ]
        lines += [f"segment.{i} = {s.start} {s.length} {s.nats!r}" for i, s in enumerate(self.segments)]
        return "\n".join(lines) + "\n"

    def save(self, path, losses_path=None) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")
        if losses_path is not None:
            Path(losses_path).write_bytes(self.token_losses.astype("<f8").tobytes())


def load_report(path, losses_path=None) -> EvalReport:
    """Read a report file. Without the loss dump, losses are rebuilt from segment totals."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != REPORT_HEADER:
        raise FormatError(f"{path}: not an eval report")
    kv, segs = {}, []
    for line in text[1:]:
        key, _, value = line.partition(" = ")
        if key.startswith("segment."):
            start, length, nats = value.split()
            segs.append(SegmentSummary(int(start), int(length), float(nats)))
        else:
            kv[key] = value
    count = int(kv["token_count"])
    if losses_path is not None:
        losses = np.frombuffer(Path(losses_path).read_bytes(), dtype="<f8").astype(np.float64)
        if losses.size != count:
            raise FormatError(f"{losses_path}: {losses.size} losses, report says {count}")
    else:
        # Spread the total evenly; aggregate metrics survive, per-token detail does not.
        losses = np.full(count, float(kv["total_nats"]) / count)
    return EvalReport(
        losses, segs, kv.get("label", ""), kv.get("config_fingerprint", ""),
        kv.get("vocab_fingerprint", ""), int(kv.get("unknown_tokens", 0)),
        int(kv.get("floored_tokens", 0)), int(kv.get("updates", 0)),
    )
