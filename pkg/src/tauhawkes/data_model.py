"""Match logs, segment tables and their file formats."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError
from .process_model import Segment

SIDES = ("home", "away")
RAW_COLUMNS = ("X1", "X2", "X3", "X4")  # second half, score difference, starts from goal, start time


def format_float(x: float) -> str:
    """Shortest round-tripping decimal with at least three fractional digits."""
    return np.format_float_positional(float(x), unique=True, trim="k", min_digits=3)


# --------------------------------------------------------------------------
# raw match logs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchLog:
    """Time-stamped events of one match on the match clock (minutes)."""

    match_id: str
    halves: tuple[tuple[float, float], ...]
    goals: tuple[tuple[float, str], ...] = ()
    corners: tuple[tuple[float, str], ...] = ()

    def __post_init__(self):
        halves = tuple((float(a), float(b)) for a, b in self.halves)
        object.__setattr__(self, "halves", halves)
        object.__setattr__(self, "goals", tuple(sorted((float(t), str(s)) for t, s in self.goals)))
        object.__setattr__(self, "corners", tuple(sorted((float(t), str(s)) for t, s in self.corners)))
        if not halves:
            raise InvalidInputError(f"match {self.match_id}: no halves")
        for k, (a, b) in enumerate(halves):
            if not (np.isfinite(a) and np.isfinite(b) and 0 <= a < b):
                raise InvalidInputError(f"match {self.match_id}: half {k + 1} has bad bounds ({a}, {b})")
            if k and a < halves[k - 1][1]:
                raise InvalidInputError(f"match {self.match_id}: half {k + 1} overlaps half {k}")
        for kind, items in (("goal", self.goals), ("corner", self.corners)):
            for t, side in items:
                if side not in SIDES:
                    raise InvalidInputError(f"match {self.match_id}: {kind} at {t} has side {side!r}")
                h = self.half_of(t)
                if h is None:
                    raise InvalidInputError(f"match {self.match_id}: {kind} at {t} lies outside every half")
                if kind == "goal" and t == halves[h][1]:
                    raise InvalidInputError(f"match {self.match_id}: goal at {t} coincides with a half end")

    def half_of(self, t: float) -> int | None:
        """Index of the half whose interval ``(start, end]`` contains ``t``."""
        for k, (a, b) in enumerate(self.halves):
            if a < t <= b:
                return k
        return None


# --------------------------------------------------------------------------
# segment tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentTable:
    """Ordered segments with raw covariates named by ``columns``."""

    segments: tuple[Segment, ...] = ()
    columns: tuple[str, ...] = RAW_COLUMNS

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "columns", tuple(self.columns))
        seen = set()
        for seg in self.segments:
            if len(seg.covariates) != len(self.columns):
                raise InvalidInputError(f"segment {seg.key}: expected {len(self.columns)} covariates")
            if seg.key in seen:
                raise InvalidInputError(f"duplicate segment {seg.key}")
            seen.add(seg.key)

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    @property
    def n_events(self) -> int:
        return sum(s.n_events for s in self.segments)

    def design_matrix(self, columns: Sequence[str]) -> np.ndarray:
        """Covariate columns by name; ``A*B`` or ``A:B`` is the product of two raw columns."""
        raw = np.array([s.covariates for s in self.segments], dtype=float).reshape(len(self), len(self.columns))
        cols = []
        for name in columns:
            parts = name.replace("*", ":").split(":")
            col = np.ones(len(self))
            for p in parts:
                p = p.strip()
                if p not in self.columns:
                    raise InvalidInputError(f"unknown covariate column {p!r}")
                col = col * raw[:, self.columns.index(p)]
            cols.append(col)
        return np.column_stack(cols) if cols else np.empty((len(self), 0))

    def design(self, columns: Sequence[str]) -> list[Segment]:
        """Segments carrying the selected design columns as covariates."""
        x = self.design_matrix(columns)
        return [Segment(s.end, s.events, tuple(row), s.match_id, s.index) for s, row in zip(self.segments, x)]

    def by_match(self) -> dict[str, list[Segment]]:
        out: dict[str, list[Segment]] = {}
        for s in self.segments:
            out.setdefault(s.match_id, []).append(s)
        return out


def build_segments(log: MatchLog, team: str) -> SegmentTable:
    """Split a match into segments between terminal events for one team.

    Segments open at half starts and goals and close at the next goal or half
    end; times are re-zeroed at each opening. A corner at the same instant as
    a closing goal stays in the closing segment.
    """
    if team not in SIDES:
        raise InvalidInputError(f"team must be one of {SIDES}")
    segments = []
    idx = 0
    for h, (start, stop) in enumerate(log.halves):
        goals = [(t, s) for t, s in log.goals if start < t < stop]
        bounds = [start] + [t for t, _ in goals] + [stop]
        openers = [None] + goals
        for j in range(len(bounds) - 1):
            a, b = bounds[j], bounds[j + 1]
            if b <= a:
                raise InvalidInputError(f"match {log.match_id}: two goals at minute {a}")
            # score includes the goal that opens this segment
            diff = sum((1 if s == team else -1) for t, s in log.goals if t <= a)
            corners = tuple(t - a for t, s in log.corners if s == team and a < t <= b)
            cov = (float(h >= 1), float(diff), float(openers[j] is not None), a - start)
            segments.append(Segment(b - a, corners, cov, log.match_id, idx))
            idx += 1
    return SegmentTable(tuple(segments), RAW_COLUMNS)


def build_season(logs: Iterable[MatchLog], team: str) -> SegmentTable:
    segs = []
    for log in logs:
        segs.extend(build_segments(log, team).segments)
    return SegmentTable(tuple(segs), RAW_COLUMNS)


# --------------------------------------------------------------------------
# delimited text format
# --------------------------------------------------------------------------


def _header(columns: Sequence[str]) -> list[str]:
    return ["record", "match_id", "segment_index", "E", *columns, "time"]


def dumps_dataset(table: SegmentTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_header(table.columns))
    blank = [""] * len(table.columns)
    for s in table.segments:
        w.writerow(["segment", s.match_id, s.index, format_float(s.end),
                    *(format_float(v) for v in s.covariates), ""])
        for t in s.events:
            w.writerow(["event", s.match_id, s.index, "", *blank, format_float(t)])
    return buf.getvalue()


def write_dataset(table: SegmentTable, path) -> None:
    Path(path).write_text(dumps_dataset(table))


def _num(text: str, what: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise InvalidInputError(f"line {line}: {what} {text!r} is not a number") from None
    if not np.isfinite(v):
        raise InvalidInputError(f"line {line}: {what} must be finite")
    return v


def loads_dataset(text: str) -> SegmentTable:
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise InvalidInputError("line 1: missing header") from None
    if len(header) < 5 or header[:4] != ["record", "match_id", "segment_index", "E"] or header[-1] != "time":
        raise InvalidInputError("line 1: header must be record,match_id,segment_index,E,<covariates>,time")
    columns = tuple(header[4:-1])
    metas: dict[tuple[str, int], dict] = {}
    order: list[tuple[str, int]] = []
    for line, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise InvalidInputError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        kind, mid, sidx = row[0], row[1], row[2]
        try:
            key = (mid, int(sidx))
        except ValueError:
            raise InvalidInputError(f"line {line}: segment_index {sidx!r} is not an integer") from None
        if kind == "segment":
            if key in metas:
                raise InvalidInputError(f"line {line}: segment {key} declared twice")
            metas[key] = {"E": _num(row[3], "E", line),
                          "cov": tuple(_num(v, c, line) for v, c in zip(row[4:-1], columns)),
                          "events": [], "line": line}
            order.append(key)
        elif kind == "event":
            if key not in metas:
                raise InvalidInputError(f"line {line}: event before its segment {key}")
            t = _num(row[-1], "time", line)
            ev = metas[key]["events"]
            if ev and t == ev[-1]:
                raise InvalidInputError(f"line {line}: duplicate event time {t} in segment {key}")
            ev.append(t)
        else:
            raise InvalidInputError(f"line {line}: unknown record type {kind!r}")
    segs = []
    for key in order:
        m = metas[key]
        try:
            segs.append(Segment(m["E"], tuple(m["events"]), m["cov"], key[0], key[1]))
        except InvalidInputError as exc:
            raise InvalidInputError(f"line {m['line']}: {exc}") from None
    return SegmentTable(tuple(segs), columns)


def read_dataset(path) -> SegmentTable:
    """Read a segment table from delimited text (or JSON when the suffix is .json)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return table_from_json(text)
    return loads_dataset(text)


# --------------------------------------------------------------------------
# JSON mirror
# --------------------------------------------------------------------------


def table_to_json(table: SegmentTable) -> str:
    doc = {"columns": list(table.columns),
           "segments": [{"match_id": s.match_id, "segment_index": s.index, "E": s.end,
                         "covariates": list(s.covariates), "events": list(s.events)}
                        for s in table.segments]}
    return json.dumps(doc, indent=1)


def table_from_json(text: str) -> SegmentTable:
    try:
        doc = json.loads(text)
        columns = tuple(doc["columns"])
        segs = tuple(Segment(d["E"], tuple(d["events"]), tuple(d["covariates"]), d["match_id"], d["segment_index"])
                     for d in doc["segments"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed JSON dataset: {exc}") from None
    return SegmentTable(segs, columns)


def write_json(table: SegmentTable, path) -> None:
    Path(path).write_text(table_to_json(table))
