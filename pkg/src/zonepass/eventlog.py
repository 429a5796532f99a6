"""Append-only event log and its replay path.

One JSON record per line with fixed field order (seq, ts, kind, payload).
Sequence numbers are dense from 1; a response is only sent after its
records are flushed and fsynced.  Replaying a log reconstructs the ledger
byte-identically (canonical serialization), which doubles as the service's
crash-recovery path and as a test oracle.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .admission import accept_offer, decision_from_json, decline_offer
from .errors import CorruptLog
from .ledger import Ledger, record_decision, zone_policy_from_json

KIND_REQUEST = "REQUEST"
KIND_DECISION = "DECISION"
KIND_ACCEPT = "ACCEPT"
KIND_DECLINE = "DECLINE"
KIND_POLICY_CHANGE = "POLICY_CHANGE"
RECORD_KINDS = (KIND_REQUEST, KIND_DECISION, KIND_ACCEPT, KIND_DECLINE, KIND_POLICY_CHANGE)


@dataclass(frozen=True)
class EventRecord:
    seq: int
    ts: float
    kind: str
    payload: dict

    def to_line(self) -> str:
        return json.dumps(
            {"seq": self.seq, "ts": self.ts, "kind": self.kind, "payload": self.payload}
        )


def parse_line(line: str, lineno: int) -> EventRecord:
    try:
        doc = json.loads(line)
        return EventRecord(int(doc["seq"]), float(doc["ts"]), doc["kind"], doc["payload"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptLog(f"unparsable record at line {lineno}: {exc}", bad_seq=lineno) from exc


class EventLog:
    """Durable appender; keeps the file handle open and fsyncs every append."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._seq = 0
        if self.path.exists():
            for record in read_records(self.path):
                self._seq = record.seq
        self._fh = open(self.path, "a", encoding="utf-8")

    @property
    def last_seq(self) -> int:
        return self._seq

    def append(self, kind: str, payload: dict, ts: float | None = None) -> EventRecord:
        if kind not in RECORD_KINDS:
            raise ValueError(f"unknown record kind {kind!r}")
        self._seq += 1
        record = EventRecord(self._seq, time.time() if ts is None else ts, kind, payload)
        self._fh.write(record.to_line() + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())
        return record

    def close(self) -> None:
        self._fh.close()


def read_records(path: str | Path) -> list[EventRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                records.append(parse_line(line, lineno))
    return records


def replay(log: str | Path | Iterable[EventRecord], policy=None) -> Ledger:
    """Rebuild the ledger from a session log.

    The first record must be the POLICY_CHANGE that created the zone
    (service logs always start with one); an empty log yields an empty
    ledger for the fallback ``policy``.  Sequence numbers must be dense
    from 1; the first gap or malformed record raises CorruptLog with its
    sequence number.
    """
    records = read_records(log) if isinstance(log, (str, Path)) else list(log)
    if not records and policy is not None:
        return Ledger(policy)
    ledger: Ledger | None = None
    expected = 1
    for record in records:
        if record.seq != expected:
            raise CorruptLog(
                f"expected sequence {expected}, found {record.seq}", bad_seq=record.seq
            )
        expected += 1
        if record.kind == KIND_POLICY_CHANGE:
            policy = zone_policy_from_json(record.payload["policy"])
            if ledger is None:
                ledger = Ledger(policy)
            else:
                ledger.swap_policy(policy)
        elif ledger is None:
            raise CorruptLog(
                f"record {record.seq} precedes the initial POLICY_CHANGE", bad_seq=record.seq
            )
        elif record.kind == KIND_DECISION:
            decision = decision_from_json(record.payload, ledger.policy)
            record_decision(ledger, decision)
        elif record.kind == KIND_ACCEPT:
            accept_offer(
                ledger,
                record.payload["offer_id"],
                int(record.payload["slot_index"]),
                now=float(record.payload["now"]),
            )
        elif record.kind == KIND_DECLINE:
            decline_offer(ledger, record.payload["offer_id"])
        # KIND_REQUEST records are audit-only; the ledger does not change.
    if ledger is None:
        raise CorruptLog("log holds no POLICY_CHANGE to boot from", bad_seq=1)
    return ledger
