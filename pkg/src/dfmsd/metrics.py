"""Per-step metrics records and the flat key=value log format.

Each log line is either one MetricsRecord (``step=... stage_index=... ...``)
or a stage-boundary event (``event=stage_start ...``). Floats are written
with shortest-roundtrip repr so a rewritten log is byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class MetricsRecord:
    """Loss decomposition for one optimizer step, plus optional eval results."""

    step: int
    stage_index: int
    loss_total: float
    loss_gt: float
    loss_distill: float
    loss_me: float
    loss_sfa: float = 0.0
    ap50: float | None = None
    mar: float | None = None

    def to_line(self) -> str:
        parts = [
            f"step={self.step}",
            f"stage_index={self.stage_index}",
            f"loss_total={self.loss_total!r}",
            f"loss_gt={self.loss_gt!r}",
            f"loss_distill={self.loss_distill!r}",
            f"loss_me={self.loss_me!r}",
            f"loss_sfa={self.loss_sfa!r}",
        ]
        if self.ap50 is not None:
            parts.append(f"ap50={self.ap50!r}")
        if self.mar is not None:
            parts.append(f"mar={self.mar!r}")
        return " ".join(parts)

    @staticmethod
    def from_line(line: str) -> "MetricsRecord":
        kv = _parse_kv(line)
        return MetricsRecord(
            step=int(kv["step"]),
            stage_index=int(kv["stage_index"]),
            loss_total=float(kv["loss_total"]),
            loss_gt=float(kv["loss_gt"]),
            loss_distill=float(kv["loss_distill"]),
            loss_me=float(kv["loss_me"]),
            loss_sfa=float(kv.get("loss_sfa", 0.0)),
            ap50=float(kv["ap50"]) if "ap50" in kv else None,
            mar=float(kv["mar"]) if "mar" in kv else None,
        )


def _parse_kv(line: str) -> dict[str, str]:
    out = {}
    for token in line.split():
        key, _, value = token.partition("=")
        out[key] = value
    return out


def event_line(name: str, **fields) -> str:
    parts = [f"event={name}"] + [f"{k}={v}" for k, v in fields.items()]
    return " ".join(parts)


class MetricsLog:
    """Append-only metrics writer; flushes per line so aborted runs keep
    their partial history."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[MetricsRecord] = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w")

    def append(self, record: MetricsRecord) -> None:
        self.records.append(record)
        self._write(record.to_line())

    def event(self, name: str, **fields) -> None:
        self._write(event_line(name, **fields))

    def _write(self, line: str) -> None:
        if self._fh is not None:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path: str | Path) -> list[MetricsRecord]:
    """Read the metric records of a log, skipping event lines."""
    records = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("event="):
            continue
        records.append(MetricsRecord.from_line(line))
    return records


def read_events(path: str | Path) -> list[dict[str, str]]:
    events = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("event="):
            events.append(_parse_kv(line))
    return events
