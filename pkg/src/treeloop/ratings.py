"""Rating records and the append-only ratings.jsonl store.

The store never rewrites history: a rating is one line, an undo is a
tombstone line referencing the undone cluster. Replaying the file from the
top reconstructs the exact in-memory state, which is how the rating server
survives restarts and how a labeling session stays auditable.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path


class RatingClass(IntEnum):
    SINGLE = 0
    MULTI = 1
    NON_TREE = 2


CLASS_NAMES = {RatingClass.SINGLE: "single",
               RatingClass.MULTI: "multi",
               RatingClass.NON_TREE: "non_tree"}
NAME_CLASSES = {v: k for k, v in CLASS_NAMES.items()}


@dataclass
class RatingRecord:
    cluster_id: int
    rating: RatingClass
    source: str                # {"human", "model"}
    confidence: float = 1.0    # softmax max for model ratings, 1.0 for human
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be within [0, 1]")
        if self.source not in ("human", "model"):
            raise ValueError(f"unknown rating source {self.source!r}")

    def to_json(self) -> str:
        return json.dumps({
            "cluster_id": self.cluster_id,
            "class": CLASS_NAMES[self.rating],
            "source": self.source,
            "confidence": round(float(self.confidence), 6),
            "ts": self.timestamp,
        })

    @classmethod
    def from_dict(cls, data: dict) -> "RatingRecord":
        return cls(
            cluster_id=int(data["cluster_id"]),
            rating=NAME_CLASSES[data["class"]],
            source=data.get("source", "human"),
            confidence=float(data.get("confidence", 1.0)),
            timestamp=float(data.get("ts", 0.0)),
        )


class RatingStore:
    """Single-writer JSONL store of human ratings with tombstone undo.

    One active record per cluster; re-rating a cluster appends a new line that
    supersedes the old one. Corrupt lines are quarantined (kept on disk,
    skipped on replay, counted).
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[int, RatingRecord] = {}
        self._order: list[int] = []   # rating event order for undo
        self.quarantined = 0
        if self.path.exists():
            self._replay()

    def _replay(self) -> None:
        for line in self.path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                if "undo_cluster_id" in data:
                    self._apply_undo(int(data["undo_cluster_id"]))
                else:
                    self._apply_rating(RatingRecord.from_dict(data))
            except (ValueError, KeyError):
                self.quarantined += 1

    def _apply_rating(self, record: RatingRecord) -> None:
        if record.cluster_id in self._records:
            self._order.remove(record.cluster_id)
        self._records[record.cluster_id] = record
        self._order.append(record.cluster_id)

    def _apply_undo(self, cluster_id: int) -> None:
        if cluster_id in self._records:
            del self._records[cluster_id]
            self._order.remove(cluster_id)

    def _append_line(self, line: str) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")
            f.flush()

    def add(self, cluster_id: int, rating: RatingClass,
            source: str = "human", confidence: float = 1.0) -> RatingRecord:
        record = RatingRecord(cluster_id=cluster_id, rating=rating, source=source,
                              confidence=confidence, timestamp=time.time())
        with self._lock:
            self._append_line(record.to_json())
            self._apply_rating(record)
        return record

    def undo(self) -> int | None:
        """Undo the most recent rating; returns its cluster id, None if empty."""
        with self._lock:
            if not self._order:
                return None
            cluster_id = self._order[-1]
            self._append_line(json.dumps(
                {"undo_cluster_id": cluster_id, "ts": time.time()}))
            self._apply_undo(cluster_id)
            return cluster_id

    def get(self, cluster_id: int) -> RatingRecord | None:
        return self._records.get(cluster_id)

    def rated_ids(self) -> set[int]:
        return set(self._records)

    def records(self) -> dict[int, RatingRecord]:
        return dict(self._records)

    def __len__(self) -> int:
        return len(self._records)
