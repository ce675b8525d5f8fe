"""Raw telematics parsing and trip cleaning.

Raw records are held column-wise in a :class:`RecordTable` so that a stream of
millions of minute-level observations can be sorted and scanned with numpy.
Individual rows are still available as :class:`RawRecord` objects through
indexing.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from enum import IntEnum
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import EmptyRecordSet, NoTripsInCoverage, PolicyRejected

logger = logging.getLogger(__name__)

EPOCH = date(1970, 1, 1)
TIMESTAMP_FORMAT = "%m/%d/%Y %H:%M:%S"

# filter thresholds
MIN_DURATION_S = 180.0
AVG_SPEED_RANGE = (5.0, 150.0)
MIN_MAX_SPEED = 10.0
MAX_MATCH_ERROR_S = 60.0
MAX_DEVIATION_DAYS = 92


class EventKind(IntEnum):
    KEY_ON = 0
    KEY_OFF = 1
    POSITION_IN_TIME = 2
    FIX_GPS_OK = 3
    HARSH_ACCEL = 4
    HARSH_BRAKE = 5
    HARSH_LEFT = 6
    HARSH_RIGHT = 7
    SEVERE_HARSH = 8

    @property
    def is_harsh(self) -> bool:
        return self >= EventKind.HARSH_ACCEL

    @property
    def text(self) -> str:
        return EVENT_TEXT[self]


HARSH_KINDS = (
    EventKind.HARSH_ACCEL,
    EventKind.HARSH_BRAKE,
    EventKind.HARSH_LEFT,
    EventKind.HARSH_RIGHT,
    EventKind.SEVERE_HARSH,
)
HARSH_NAMES = ("accel", "brake", "left", "right", "severe")

EVENT_TEXT = {
    EventKind.KEY_ON: "KEY ON",
    EventKind.KEY_OFF: "KEY OFF",
    EventKind.POSITION_IN_TIME: "POSITION IN TIME",
    EventKind.FIX_GPS_OK: "FIX GPS OK",
    EventKind.HARSH_ACCEL: "HARSH ACCELERATION",
    EventKind.HARSH_BRAKE: "HARSH BRAKING",
    EventKind.HARSH_LEFT: "HARSH LEFT CORNERING",
    EventKind.HARSH_RIGHT: "HARSH RIGHT CORNERING",
    EventKind.SEVERE_HARSH: "SEVERE HARSH EVENT",
}

_EVENT_ALIASES = {
    "KEYON": EventKind.KEY_ON,
    "KEYOFF": EventKind.KEY_OFF,
    "POSITIONINTIME": EventKind.POSITION_IN_TIME,
    "POSITION": EventKind.POSITION_IN_TIME,
    "FIXGPSOK": EventKind.FIX_GPS_OK,
    "HARSHACCELERATION": EventKind.HARSH_ACCEL,
    "HARSHACCEL": EventKind.HARSH_ACCEL,
    "HARSHBRAKING": EventKind.HARSH_BRAKE,
    "HARSHBRAKE": EventKind.HARSH_BRAKE,
    "HARSHDECELERATION": EventKind.HARSH_BRAKE,
    "HARSHLEFT": EventKind.HARSH_LEFT,
    "HARSHLEFTCORNERING": EventKind.HARSH_LEFT,
    "HARSHCORNERINGLEFT": EventKind.HARSH_LEFT,
    "HARSHRIGHT": EventKind.HARSH_RIGHT,
    "HARSHRIGHTCORNERING": EventKind.HARSH_RIGHT,
    "HARSHCORNERINGRIGHT": EventKind.HARSH_RIGHT,
    "SEVEREHARSH": EventKind.SEVERE_HARSH,
    "SEVEREHARSHEVENT": EventKind.SEVERE_HARSH,
    "SEVEREEVENT": EventKind.SEVERE_HARSH,
}


def event_kind_from_text(text: str) -> EventKind | None:
    """Map an event description to its kind, ignoring case, spaces and punctuation."""
    key = "".join(ch for ch in text.upper() if ch.isalnum())
    return _EVENT_ALIASES.get(key)


# ---------------------------------------------------------------------------
# timestamps

_day_cache: dict[str, int] = {}


def parse_timestamp(text: str) -> int:
    """Parse ``MM/DD/YYYY HH:MM:SS`` (or ISO 8601) into integer epoch seconds."""
    text = text.strip()
    if len(text) == 19 and text[2] == "/" and text[5] == "/" and text[10] == " ":
        day_part = text[:10]
        days = _day_cache.get(day_part)
        if days is None:
            days = (date(int(text[6:10]), int(text[0:2]), int(text[3:5])) - EPOCH).days
            _day_cache[day_part] = days
        hh, mm, ss = int(text[11:13]), int(text[14:16]), int(text[17:19])
        if not (0 <= hh < 24 and 0 <= mm < 60 and 0 <= ss < 60) or text[13] != ":" or text[16] != ":":
            raise ValueError(f"bad time of day: {text!r}")
        return days * 86400 + hh * 3600 + mm * 60 + ss
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return int((dt - datetime(1970, 1, 1)).total_seconds())


def format_timestamp(seconds: int) -> str:
    return (datetime(1970, 1, 1) + timedelta(seconds=int(seconds))).strftime(TIMESTAMP_FORMAT)


def to_datetime(seconds: int) -> datetime:
    return datetime(1970, 1, 1) + timedelta(seconds=int(seconds))


def epoch_day(seconds: int) -> date:
    return EPOCH + timedelta(days=int(seconds) // 86400)


def date_to_epoch(d: date) -> int:
    return (d - EPOCH).days * 86400


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class RawRecord:
    device_id: str
    timestamp: int
    gps_direction: float
    gps_speed: float
    event_kind: EventKind
    gps_valid: bool = True

    def __post_init__(self):
        if self.gps_speed < 0:
            raise ValueError("gps_speed must be non-negative")
        if not 0 <= self.gps_direction < 360:
            raise ValueError("gps_direction must lie in [0, 360)")

    @property
    def datetime(self) -> datetime:
        return to_datetime(self.timestamp)


@dataclass
class RecordTable:
    """Column-oriented sequence of raw records.

    ``devices`` holds the distinct device ids; ``device`` stores an index into
    it for every row.
    """

    devices: list[str]
    device: np.ndarray
    timestamp: np.ndarray
    direction: np.ndarray
    speed: np.ndarray
    kind: np.ndarray
    gps_valid: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamp)

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return self.take(np.arange(len(self))[i] if isinstance(i, slice) else np.asarray(i))
        return RawRecord(
            device_id=self.devices[int(self.device[i])],
            timestamp=int(self.timestamp[i]),
            gps_direction=float(self.direction[i]),
            gps_speed=float(self.speed[i]),
            event_kind=EventKind(int(self.kind[i])),
            gps_valid=bool(self.gps_valid[i]),
        )

    def __iter__(self) -> Iterator[RawRecord]:
        for i in range(len(self)):
            yield self[i]

    def take(self, index: np.ndarray) -> RecordTable:
        return RecordTable(
            devices=self.devices,
            device=self.device[index],
            timestamp=self.timestamp[index],
            direction=self.direction[index],
            speed=self.speed[index],
            kind=self.kind[index],
            gps_valid=self.gps_valid[index],
        )

    def device_ids(self) -> np.ndarray:
        return np.asarray(self.devices, dtype=object)[self.device]

    @classmethod
    def empty(cls) -> RecordTable:
        return cls(
            devices=[],
            device=np.zeros(0, dtype=np.int32),
            timestamp=np.zeros(0, dtype=np.int64),
            direction=np.zeros(0),
            speed=np.zeros(0),
            kind=np.zeros(0, dtype=np.int8),
            gps_valid=np.zeros(0, dtype=bool),
        )

    @classmethod
    def from_records(cls, records: Iterable[RawRecord]) -> RecordTable:
        records = list(records)
        devices: dict[str, int] = {}
        for r in records:
            devices.setdefault(r.device_id, len(devices))
        return cls(
            devices=list(devices),
            device=np.array([devices[r.device_id] for r in records], dtype=np.int32),
            timestamp=np.array([r.timestamp for r in records], dtype=np.int64),
            direction=np.array([r.gps_direction for r in records], dtype=float),
            speed=np.array([r.gps_speed for r in records], dtype=float),
            kind=np.array([int(r.event_kind) for r in records], dtype=np.int8),
            gps_valid=np.array([r.gps_valid for r in records], dtype=bool),
        )

    @classmethod
    def concat(cls, tables: Sequence[RecordTable]) -> RecordTable:
        devices: dict[str, int] = {}
        codes = []
        for t in tables:
            remap = np.array([devices.setdefault(d, len(devices)) for d in t.devices], dtype=np.int32)
            codes.append(remap[t.device] if len(t) else np.zeros(0, dtype=np.int32))
        if not tables:
            return cls.empty()
        return cls(
            devices=list(devices),
            device=np.concatenate(codes),
            timestamp=np.concatenate([t.timestamp for t in tables]),
            direction=np.concatenate([t.direction for t in tables]),
            speed=np.concatenate([t.speed for t in tables]),
            kind=np.concatenate([t.kind for t in tables]),
            gps_valid=np.concatenate([t.gps_valid for t in tables]),
        )

    def for_device(self, device_id: str) -> RecordTable:
        code = self.devices.index(device_id)
        return self.take(np.flatnonzero(self.device == code))


@dataclass
class ParseDiagnostics:
    rows_read: int = 0
    malformed_rows: list[int] = field(default_factory=list)
    unknown_event_kinds: Counter = field(default_factory=Counter)

    @property
    def n_malformed(self) -> int:
        return len(self.malformed_rows)

    @property
    def n_unknown_event_kinds(self) -> int:
        return sum(self.unknown_event_kinds.values())

    def to_dict(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "malformed_rows": self.n_malformed,
            "malformed_row_indices": self.malformed_rows[:100],
            "unknown_event_kinds": self.n_unknown_event_kinds,
            "unknown_event_texts": dict(sorted(self.unknown_event_kinds.items())),
        }


_RAW_COLUMNS = {
    "device": ("deviceid", "device", "device_id"),
    "timestamp": ("timestamp", "time_stamp", "datetime", "time"),
    "direction": ("gpsdirection", "direction", "gps_direction", "heading"),
    "speed": ("gpsspeed", "speed", "gps_speed"),
    "event": ("eventdescription", "event", "event_description", "eventkind", "event_kind"),
    "valid": ("gpsvalid", "gps_valid", "valid"),
}


def _open_text(source) -> tuple[io.TextIOBase, bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", newline="", encoding="utf-8"), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8")), True
    if isinstance(source, io.TextIOBase):
        return source, False
    if hasattr(source, "read"):
        return io.TextIOWrapper(source, encoding="utf-8", newline=""), False
    raise TypeError(f"cannot read records from {type(source).__name__}")


def detect_delimiter(line: str) -> str:
    return "\t" if line.count("\t") > line.count(",") else ","


def _norm(name: str) -> str:
    return name.strip().lower().replace(" ", "")


def _header_map(fields: list[str]) -> dict[str, int] | None:
    normed = [_norm(f) for f in fields]
    found = {}
    for key, aliases in _RAW_COLUMNS.items():
        for i, name in enumerate(normed):
            if name in aliases:
                found[key] = i
                break
    required = {"device", "timestamp", "direction", "speed", "event"}
    return found if required <= found.keys() else None


def parse_raw_records(source, diagnostics: ParseDiagnostics | None = None) -> RecordTable:
    """Parse a delimited raw-record stream.

    The delimiter (comma or tab) is detected from the first line.  A header
    naming DeviceId, TimeStamp, GPSDirection, GPSSpeed and EventDescription is
    recognised; without one, columns are taken in that order.  An optional
    GPSValid column (1/0) marks invalid GPS fixes; FIX GPS OK records are always
    invalid.

    Malformed rows are skipped and their 0-based data-row index recorded in
    ``diagnostics``; unknown event descriptions become POSITION IN TIME.
    """
    diag = diagnostics if diagnostics is not None else ParseDiagnostics()
    fh, close = _open_text(source)
    try:
        first = fh.readline()
        if not first.strip():
            return RecordTable.empty()
        delim = detect_delimiter(first)
        first_fields = next(csv.reader([first], delimiter=delim, skipinitialspace=True))
        cols = _header_map(first_fields)
        pending: list[list[str]] = []
        if cols is None:
            cols = {"device": 0, "timestamp": 1, "direction": 2, "speed": 3, "event": 4}
            pending.append(first_fields)
        reader = csv.reader(fh, delimiter=delim, skipinitialspace=True)
        return _parse_rows(pending, reader, cols, diag)
    finally:
        if close:
            fh.close()


def _parse_rows(pending, reader, cols, diag: ParseDiagnostics) -> RecordTable:
    ci_dev, ci_ts, ci_dir, ci_spd, ci_evt = (cols[k] for k in ("device", "timestamp", "direction", "speed", "event"))
    ci_valid = cols.get("valid")
    devices: dict[str, int] = {}
    dev_codes: list[int] = []
    stamps: list[int] = []
    dirs: list[float] = []
    speeds: list[float] = []
    kinds: list[int] = []
    valid: list[bool] = []
    kind_cache: dict[str, int] = {}
    unknown = diag.unknown_event_kinds
    malformed = diag.malformed_rows
    position = int(EventKind.POSITION_IN_TIME)
    fix_gps = int(EventKind.FIX_GPS_OK)
    row_index = diag.rows_read

    def rows():
        yield from pending
        yield from reader

    for row in rows():
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        idx = row_index
        row_index += 1
        try:
            dev = row[ci_dev].strip()
            ts = parse_timestamp(row[ci_ts])
            direction = float(row[ci_dir])
            speed = float(row[ci_spd])
            text = row[ci_evt].strip()
            ok = True
            if ci_valid is not None and ci_valid < len(row):
                flag = row[ci_valid].strip().lower()
                ok = flag not in ("0", "false", "no", "n", "f")
            if not dev or speed < 0 or not (0.0 <= direction < 360.0) or speed != speed:
                raise ValueError
        except (ValueError, IndexError, OverflowError):
            malformed.append(idx)
            continue
        kind = kind_cache.get(text)
        if kind is None:
            ek = event_kind_from_text(text)
            if ek is None:
                unknown[text] += 1
                kind = position
            else:
                kind = int(ek)
                kind_cache[text] = kind
        code = devices.get(dev)
        if code is None:
            code = devices[dev] = len(devices)
        dev_codes.append(code)
        stamps.append(ts)
        dirs.append(direction)
        speeds.append(speed)
        kinds.append(kind)
        valid.append(ok and kind != fix_gps)
    diag.rows_read = row_index
    if diag.malformed_rows:
        logger.warning("skipped %d malformed raw-record rows", len(diag.malformed_rows))
    return RecordTable(
        devices=list(devices),
        device=np.asarray(dev_codes, dtype=np.int32),
        timestamp=np.asarray(stamps, dtype=np.int64),
        direction=np.asarray(dirs, dtype=float),
        speed=np.asarray(speeds, dtype=float),
        kind=np.asarray(kinds, dtype=np.int8),
        gps_valid=np.asarray(valid, dtype=bool),
    )


def write_raw_records(path_or_buffer, table: RecordTable, *, include_valid: bool = True) -> None:
    """Write records in the layout :func:`parse_raw_records` reads."""
    own = isinstance(path_or_buffer, (str, os.PathLike))
    fh = open(path_or_buffer, "w", newline="", encoding="utf-8") if own else path_or_buffer
    try:
        header = ["DeviceId", "TimeStamp", "GPSDirection", "GPSSpeed", "EventDescription"]
        if include_valid:
            header.append("GPSValid")
        fh.write(",".join(header) + "\n")
        texts = [EVENT_TEXT[EventKind(k)] for k in range(len(EventKind))]
        ts_cache: dict[int, str] = {}
        lines = []
        for dev, ts, d, s, k, v in zip(
            table.device.tolist(),
            table.timestamp.tolist(),
            table.direction.tolist(),
            table.speed.tolist(),
            table.kind.tolist(),
            table.gps_valid.tolist(),
        ):
            day = ts // 86400
            day_txt = ts_cache.get(day)
            if day_txt is None:
                day_txt = ts_cache[day] = (EPOCH + timedelta(days=day)).strftime("%m/%d/%Y")
            rem = ts - day * 86400
            stamp = f"{day_txt} {rem // 3600:02d}:{rem % 3600 // 60:02d}:{rem % 60:02d}"
            row = f"{table.devices[dev]},{stamp},{_fmt_num(d)},{_fmt_num(s)},{texts[k]}"
            if include_valid:
                row += ",1" if v else ",0"
            lines.append(row)
            if len(lines) >= 65536:
                fh.write("\n".join(lines) + "\n")
                lines.clear()
        if lines:
            fh.write("\n".join(lines) + "\n")
    finally:
        if own:
            fh.close()


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


# ---------------------------------------------------------------------------
# ordering


def reorder_chronological(records):
    """Sort one device's records by timestamp; ties keep their input order.

    Accepts a :class:`RecordTable` (may hold several devices, which are then
    grouped by device code first) or any sequence of :class:`RawRecord`.
    """
    if isinstance(records, RecordTable):
        if len(records.devices) <= 1:
            order = np.argsort(records.timestamp, kind="stable")
        else:
            order = np.lexsort((records.timestamp, records.device))
        return records.take(order)
    return sorted(records, key=lambda r: r.timestamp)


def device_slices(table: RecordTable) -> dict[str, slice]:
    """Contiguous row range of each device in a device-grouped table."""
    if len(table) == 0:
        return {}
    change = np.flatnonzero(np.diff(table.device)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [len(table)]])
    out = {}
    for s, e in zip(starts.tolist(), ends.tolist()):
        out[table.devices[int(table.device[s])]] = slice(s, e)
    return out


# ---------------------------------------------------------------------------
# trips


@dataclass(frozen=True)
class TripListEntry:
    device_id: str
    start_ts: int
    end_ts: int
    distance_km: float
    duration_s: float
    avg_speed: float
    max_speed: float
    roadtype_props: tuple[float, float, float, float] = (100.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.end_ts <= self.start_ts:
            raise ValueError("trip end must be after trip start")
        if self.duration_s <= 0 or self.distance_km < 0:
            raise ValueError("duration must be positive and distance non-negative")
        props = self.roadtype_props
        if len(props) != 4 or min(props) < 0 or abs(sum(props) - 100.0) > 0.5:
            raise ValueError("road type proportions must be non-negative and sum to 100")


TRIP_LIST_COLUMNS = [
    "device_id",
    "start_ts",
    "end_ts",
    "distance_km",
    "duration_s",
    "avg_speed",
    "max_speed",
    "prop_urban",
    "prop_extra_urban",
    "prop_highway",
    "prop_other",
]


def parse_trip_list(source, diagnostics: ParseDiagnostics | None = None) -> list[TripListEntry]:
    diag = diagnostics if diagnostics is not None else ParseDiagnostics()
    fh, close = _open_text(source)
    try:
        first = fh.readline()
        if not first.strip():
            return []
        delim = detect_delimiter(first)
        header = [_norm(h) for h in next(csv.reader([first], delimiter=delim, skipinitialspace=True))]
        missing = [c for c in TRIP_LIST_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"trip list is missing columns {missing}")
        pos = {c: header.index(c) for c in TRIP_LIST_COLUMNS}
        entries = []
        for idx, row in enumerate(csv.reader(fh, delimiter=delim, skipinitialspace=True)):
            if not row:
                continue
            diag.rows_read += 1
            try:
                entries.append(
                    TripListEntry(
                        device_id=row[pos["device_id"]].strip(),
                        start_ts=parse_timestamp(row[pos["start_ts"]]),
                        end_ts=parse_timestamp(row[pos["end_ts"]]),
                        distance_km=float(row[pos["distance_km"]]),
                        duration_s=float(row[pos["duration_s"]]),
                        avg_speed=float(row[pos["avg_speed"]]),
                        max_speed=float(row[pos["max_speed"]]),
                        roadtype_props=tuple(
                            float(row[pos[c]]) for c in ("prop_urban", "prop_extra_urban", "prop_highway", "prop_other")
                        ),
                    )
                )
            except (ValueError, IndexError):
                diag.malformed_rows.append(idx)
        return entries
    finally:
        if close:
            fh.close()


def write_trip_list(path_or_buffer, entries: Sequence[TripListEntry]) -> None:
    own = isinstance(path_or_buffer, (str, os.PathLike))
    fh = open(path_or_buffer, "w", newline="", encoding="utf-8") if own else path_or_buffer
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIP_LIST_COLUMNS)
        for e in entries:
            w.writerow(
                [e.device_id, format_timestamp(e.start_ts), format_timestamp(e.end_ts), f"{e.distance_km:.3f}",
                 _fmt_num(e.duration_s), f"{e.avg_speed:.3f}", _fmt_num(e.max_speed)]
                + [f"{p:.2f}" for p in e.roadtype_props]
            )
    finally:
        if own:
            fh.close()


@dataclass(frozen=True)
class HarshCounts:
    accel: int = 0
    brake: int = 0
    left: int = 0
    right: int = 0
    severe: int = 0

    @property
    def total(self) -> int:
        return self.accel + self.brake + self.left + self.right + self.severe

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.accel, self.brake, self.left, self.right, self.severe)


@dataclass(frozen=True)
class Trip:
    """A trip-list entry matched onto a device's chronologically sorted records.

    ``span_start`` and ``span_end`` are inclusive row indices into that sorted
    sequence.  ``inverted`` marks trips whose end matched before their start.
    """

    trip_list: TripListEntry
    span_start: int
    span_end: int
    harsh_counts: HarshCounts
    observed_max_speed: float
    match_error_start: float
    match_error_end: float
    inverted: bool = False

    @property
    def record_span(self) -> range:
        return range(self.span_start, self.span_end + 1)

    @property
    def start_ts(self) -> int:
        return self.trip_list.start_ts

    @property
    def end_ts(self) -> int:
        return self.trip_list.end_ts


def _nearest_index(ts: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Earliest index attaining min |ts - target| for each target (ts sorted)."""
    n = len(ts)
    right = np.searchsorted(ts, targets, side="left")
    left = right - 1
    r = np.clip(right, 0, n - 1)
    l = np.clip(left, 0, n - 1)
    d_right = np.where(right < n, ts[r] - targets, np.iinfo(np.int64).max)
    d_left = np.where(left >= 0, targets - ts[l], np.iinfo(np.int64).max)
    idx = np.where(d_left <= d_right, l, r)
    idx = np.searchsorted(ts, ts[idx], side="left")
    return idx, np.minimum(d_left, d_right).astype(float)


def match_trips(entries: Sequence[TripListEntry], records: RecordTable) -> list[Trip]:
    """Match many trip-list entries of one device against its sorted records."""
    if len(records) == 0:
        raise EmptyRecordSet("no raw records to match trips against", stage="ingest")
    if not entries:
        return []
    ts = records.timestamp
    starts = np.array([e.start_ts for e in entries], dtype=np.int64)
    ends = np.array([e.end_ts for e in entries], dtype=np.int64)
    i0, err0 = _nearest_index(ts, starts)
    i1, err1 = _nearest_index(ts, ends)

    harsh = np.zeros((len(records) + 1, 5), dtype=np.int64)
    for j, kind in enumerate(HARSH_KINDS):
        harsh[1:, j] = np.cumsum(records.kind == kind)
    speed_valid = np.where(records.gps_valid, records.speed, 0.0)

    trips = []
    for e, s, t, es, ee in zip(entries, i0.tolist(), i1.tolist(), err0.tolist(), err1.tolist()):
        if t < s:
            counts, vmax, inverted = HarshCounts(), 0.0, True
        else:
            counts = HarshCounts(*(int(c) for c in harsh[t + 1] - harsh[s]))
            vmax, inverted = float(speed_valid[s : t + 1].max()), False
        trips.append(Trip(e, s, t, counts, vmax, es, ee, inverted))
    return trips


def match_trip_boundaries(entry: TripListEntry, records: RecordTable | Sequence[RawRecord]) -> Trip:
    """Locate a trip's start and end records by minimal absolute time difference.

    Ties go to the earlier record.  A trip whose end record precedes its start
    record is returned with ``inverted=True`` rather than dropped.
    """
    if not isinstance(records, RecordTable):
        records = RecordTable.from_records(records)
    return match_trips([entry], records)[0]


FILTER_CRITERIA = ("duration", "avg_speed", "max_speed", "match_error", "inverted_span")


def trip_rejections(trip: Trip) -> list[str]:
    e = trip.trip_list
    reasons = []
    if e.duration_s < MIN_DURATION_S:
        reasons.append("duration")
    if not AVG_SPEED_RANGE[0] <= e.avg_speed <= AVG_SPEED_RANGE[1]:
        reasons.append("avg_speed")
    if e.max_speed < MIN_MAX_SPEED:
        reasons.append("max_speed")
    if max(trip.match_error_start, trip.match_error_end) > MAX_MATCH_ERROR_S:
        reasons.append("match_error")
    if trip.inverted:
        reasons.append("inverted_span")
    return reasons


def filter_trips(trips: Iterable[Trip], tally: Counter | None = None) -> list[Trip]:
    """Keep trips lasting at least 3 minutes, averaging 5-150 km/h, peaking at
    10 km/h or more, and matched to raw records within a minute at both ends.

    Every failed criterion of a rejected trip is added to ``tally``.
    """
    kept = []
    for trip in trips:
        reasons = trip_rejections(trip)
        if reasons:
            if tally is not None:
                tally.update(reasons)
                tally["rejected"] += 1
        else:
            kept.append(trip)
    return kept


@dataclass
class PolicyTrips:
    policy_id: object
    coverage_start: date
    coverage_end: date
    trips: list[Trip]
    deviation_days: int
    cancelled: bool = False
    excluded_trips: int = 0


def assign_trips_to_policy(
    trips: Sequence[Trip],
    coverage_start: date,
    coverage_end: date,
    cancelled: bool = False,
    *,
    policy_id=None,
    max_deviation_days: int = MAX_DEVIATION_DAYS,
) -> PolicyTrips:
    """Attach the trips starting inside a coverage window to a policy.

    ``coverage_end`` is the effective end date (already shortened for
    cancelled policies) and is inclusive.  Raises :class:`PolicyRejected` when
    the telematics span falls short of coverage by more than
    ``max_deviation_days`` in total.
    """
    lo = date_to_epoch(coverage_start)
    hi = date_to_epoch(coverage_end) + 86400
    kept = [t for t in trips if lo <= t.start_ts < hi]
    if not kept:
        raise NoTripsInCoverage(
            f"policy {policy_id}: no trips within coverage", reason="no_trips_in_coverage", policy_id=policy_id
        )
    kept.sort(key=lambda t: t.start_ts)
    first = epoch_day(kept[0].start_ts)
    last = epoch_day(kept[-1].start_ts)
    deviation = max((first - coverage_start).days, 0) + max((coverage_end - last).days, 0)
    if deviation > max_deviation_days:
        raise PolicyRejected(
            f"policy {policy_id}: telematics span deviates {deviation} days from coverage",
            reason="coverage_deviation",
            policy_id=policy_id,
        )
    return PolicyTrips(
        policy_id=policy_id,
        coverage_start=coverage_start,
        coverage_end=coverage_end,
        trips=kept,
        deviation_days=deviation,
        cancelled=bool(cancelled),
        excluded_trips=len(trips) - len(kept),
    )
