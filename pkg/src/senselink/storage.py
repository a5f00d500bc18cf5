"""Pluggable persistence: sessions, sensor rows, and interned access points.

Two backends behind one synchronous interface: :class:`MemoryStorage` for
tests and simulations, :class:`SqliteStorage` (single file, WAL) as the
default. Schema rules shared by both:

* every row is timestamped in unix seconds; asynchronous sensors add a
  milliseconds column (required for gps and obd rows)
* the natural key (session_id, stream, ts, ms, idx) is unique, so replayed
  writes are idempotent and retransmission is safe
* accel/gyro/mag rows pack one second of samples each, as 16-bit triplets
* wifi rows intern their (mac, essid) pair into a shared auxiliary table
  and store only the surrogate ap_id
* the users table is written only through the auth path (upsert_session)
  and is never exposed by row reads or stats
"""

from __future__ import annotations

import json
import sqlite3
import struct
import threading
import time
from typing import Iterable

MOTION_STREAMS = ("accel", "gyro", "mag")
ROW_TABLES = ("gps", "motion", "wifi", "bt", "pressure", "obd", "events")
SCHEMA_VERSION = 1

# logical per-row storage cost in bytes, the unit the rate figures use
FIXED_ROW_BYTES = {"gps": 47, "wifi": 17, "bt": 16, "pressure": 12, "obd": 14}
MOTION_ROW_BASE = 8
MOTION_SAMPLE_BYTES = 6  # three 16-bit axes
EVENT_ROW_BASE = 8


class StorageError(Exception):
    pass


class UnknownSessionId(StorageError):
    def __init__(self, session_id: int):
        super().__init__(f"unknown session {session_id}")
        self.session_id = session_id


def logical_row_bytes(stream: str, row: dict) -> int:
    if stream in FIXED_ROW_BYTES:
        return FIXED_ROW_BYTES[stream]
    if stream in MOTION_STREAMS:
        return MOTION_ROW_BASE + MOTION_SAMPLE_BYTES * len(row["samples"])
    if stream == "events":
        detail = row.get("detail") or ""
        return EVENT_ROW_BASE + len(row["kind"].encode()) + len(detail.encode())
    raise ValueError(f"unknown stream {stream!r}")


def batch_logical_bytes(streams: dict[str, list[dict]]) -> int:
    return sum(logical_row_bytes(s, r) for s, rows in streams.items() for r in rows)


def _identifiers_text(identifiers: dict | None) -> str | None:
    if not identifiers:
        return None
    return json.dumps(identifiers, sort_keys=True, separators=(",", ":"))


def _pack_samples(samples: list) -> bytes:
    flat = [v for triple in samples for v in triple]
    return struct.pack(f"<{len(flat)}h", *flat)


def _unpack_samples(blob: bytes) -> list[list[int]]:
    flat = struct.unpack(f"<{len(blob) // 2}h", blob)
    return [list(flat[i:i + 3]) for i in range(0, len(flat), 3)]


def _row_key(row: dict) -> tuple[int, int, int]:
    # ms -1 encodes "absent" so the natural key stays total (NULLs would
    # compare unequal and break idempotent replays)
    return row["ts"], row.get("ms", -1), row.get("idx", 0)


def _common_out(ts: int, ms: int, idx: int) -> dict:
    out: dict = {"ts": ts}
    if ms >= 0:
        out["ms"] = ms
    if idx:
        out["idx"] = idx
    return out


class MemoryStorage:
    """Dict-backed reference backend; fully synchronized, nothing persisted."""

    def __init__(self):
        self._lock = threading.RLock()
        self._users: dict[str, int] = {}
        self._session_ids: dict[tuple[int, int], int] = {}  # (user_id, start_time)
        self._sessions: dict[int, dict] = {}
        self._next_session_id = 1
        self._aps: dict[tuple[str, str], int] = {}
        self._ap_pairs: dict[int, tuple[str, str]] = {}
        self._rows: dict[str, dict[tuple, dict]] = {s: {} for s in
                                                    ("gps", "accel", "gyro", "mag", "wifi",
                                                     "bt", "pressure", "obd", "events")}

    def upsert_session(self, user_hash: str, start_time: int, key: bytes,
                       version: int = 1, identifiers: dict | None = None,
                       created_at: int | None = None) -> int:
        with self._lock:
            user_id = self._users.setdefault(user_hash, len(self._users) + 1)
            sid = self._session_ids.get((user_id, start_time))
            if sid is None:
                sid = self._next_session_id
                self._next_session_id += 1
                self._session_ids[(user_id, start_time)] = sid
                self._sessions[sid] = {
                    "user_hash": user_hash,
                    "start_time": start_time,
                    "created_at": int(time.time()) if created_at is None else created_at,
                }
            rec = self._sessions[sid]
            rec["key"] = bytes(key)
            rec["version"] = version
            rec["identifiers"] = dict(identifiers) if identifiers else None
            return sid

    def lookup_session_key(self, session_id: int):
        with self._lock:
            rec = self._sessions.get(session_id)
            if rec is None:
                return None
            return rec["key"], rec["user_hash"], rec["start_time"]

    def intern_auxiliary(self, mac: str, essid: str) -> int:
        with self._lock:
            ap_id = self._aps.get((mac, essid))
            if ap_id is None:
                ap_id = len(self._aps) + 1
                self._aps[(mac, essid)] = ap_id
                self._ap_pairs[ap_id] = (mac, essid)
            return ap_id

    def write_rows(self, session_id: int, streams: dict[str, list[dict]]) -> int:
        with self._lock:
            if session_id not in self._sessions:
                raise UnknownSessionId(session_id)
            count = 0
            for stream in sorted(streams):
                table = self._rows[stream]
                for row in streams[stream]:
                    stored = dict(row)
                    if stream == "wifi" and "ap_id" not in stored:
                        stored["ap_id"] = self.intern_auxiliary(stored.pop("mac"),
                                                                stored.pop("essid"))
                    table.setdefault((session_id, *_row_key(row)), stored)
                    count += 1
            return count

    def read_session_rows(self, session_id: int, streams: Iterable[str] | None = None,
                          start_ts: int | None = None, end_ts: int | None = None
                          ) -> dict[str, list[dict]]:
        with self._lock:
            out: dict[str, list[dict]] = {}
            for stream in streams or self._rows:
                picked = []
                for (sid, ts, ms, idx), row in self._rows[stream].items():
                    if sid != session_id:
                        continue
                    if start_ts is not None and ts < start_ts:
                        continue
                    if end_ts is not None and ts >= end_ts:
                        continue
                    shaped = _common_out(ts, ms, idx)
                    payload = {k: v for k, v in row.items() if k not in ("ts", "ms", "idx")}
                    if stream == "wifi":
                        pair = self._ap_pairs.get(payload["ap_id"])
                        if pair:
                            payload["mac"], payload["essid"] = pair
                    shaped.update(payload)
                    picked.append(((ts, ms, idx), shaped))
                if picked:
                    picked.sort(key=lambda item: item[0])
                    out[stream] = [shaped for _, shaped in picked]
            return out

    def storage_stats(self) -> dict:
        with self._lock:
            rows = {}
            logical = {}
            for stream, table in self._rows.items():
                if not table:
                    continue
                rows[stream] = len(table)
                logical[stream] = sum(logical_row_bytes(stream, r) for r in table.values())
            return {
                "sessions": len(self._sessions),
                "access_points": len(self._aps),
                "rows": rows,
                "logical_bytes": logical,
                "total_rows": sum(rows.values()),
                "total_logical_bytes": sum(logical.values()),
            }

    def flush(self):
        pass

    def close(self):
        pass


_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta(
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS users(
    user_id INTEGER PRIMARY KEY,
    user_hash TEXT NOT NULL UNIQUE
);
CREATE TABLE IF NOT EXISTS sessions(
    session_id INTEGER PRIMARY KEY,
    user_id INTEGER NOT NULL,
    start_time INTEGER NOT NULL,
    key BLOB NOT NULL,
    version INTEGER NOT NULL,
    identifiers TEXT,
    created_at INTEGER NOT NULL,
    UNIQUE(user_id, start_time)
);
CREATE TABLE IF NOT EXISTS access_points(
    ap_id INTEGER PRIMARY KEY,
    mac TEXT NOT NULL,
    essid TEXT NOT NULL,
    UNIQUE(mac, essid)
);
CREATE TABLE IF NOT EXISTS gps_rows(
    session_id INTEGER NOT NULL, ts INTEGER NOT NULL,
    ms INTEGER NOT NULL, idx INTEGER NOT NULL,
    lat REAL NOT NULL, lon REAL NOT NULL, alt REAL NOT NULL,
    speed REAL NOT NULL, accuracy REAL NOT NULL, device_ts INTEGER NOT NULL,
    PRIMARY KEY(session_id, ts, ms, idx)
);
CREATE TABLE IF NOT EXISTS motion_rows(
    session_id INTEGER NOT NULL, stream TEXT NOT NULL, ts INTEGER NOT NULL,
    ms INTEGER NOT NULL, idx INTEGER NOT NULL,
    rate REAL NOT NULL, n INTEGER NOT NULL, samples BLOB NOT NULL,
    PRIMARY KEY(session_id, stream, ts, ms, idx)
);
CREATE TABLE IF NOT EXISTS wifi_rows(
    session_id INTEGER NOT NULL, ts INTEGER NOT NULL,
    ms INTEGER NOT NULL, idx INTEGER NOT NULL,
    ap_id INTEGER NOT NULL, rssi INTEGER NOT NULL,
    PRIMARY KEY(session_id, ts, ms, idx)
);
CREATE TABLE IF NOT EXISTS bt_rows(
    session_id INTEGER NOT NULL, ts INTEGER NOT NULL,
    ms INTEGER NOT NULL, idx INTEGER NOT NULL,
    device_id TEXT NOT NULL, rssi INTEGER NOT NULL,
    PRIMARY KEY(session_id, ts, ms, idx)
);
CREATE TABLE IF NOT EXISTS pressure_rows(
    session_id INTEGER NOT NULL, ts INTEGER NOT NULL,
    ms INTEGER NOT NULL, idx INTEGER NOT NULL,
    hpa REAL NOT NULL,
    PRIMARY KEY(session_id, ts, ms, idx)
);
CREATE TABLE IF NOT EXISTS obd_rows(
    session_id INTEGER NOT NULL, ts INTEGER NOT NULL,
    ms INTEGER NOT NULL, idx INTEGER NOT NULL,
    pid INTEGER NOT NULL, value REAL NOT NULL,
    PRIMARY KEY(session_id, ts, ms, idx)
);
CREATE TABLE IF NOT EXISTS event_rows(
    session_id INTEGER NOT NULL, ts INTEGER NOT NULL,
    ms INTEGER NOT NULL, idx INTEGER NOT NULL,
    kind TEXT NOT NULL, detail TEXT,
    PRIMARY KEY(session_id, ts, ms, idx)
);
"""


class SqliteStorage:
    """Single-file backend. All calls serialize on one connection; each
    write_rows call is one transaction, committed (hence durable against a
    process kill) before it returns."""

    def __init__(self, path: str):
        self._lock = threading.RLock()
        self._path = path
        self._db = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
        self._db.execute("PRAGMA journal_mode=WAL")
        self._db.execute("PRAGMA synchronous=NORMAL")
        self._db.execute("PRAGMA foreign_keys=ON")
        with self._lock:
            self._db.executescript(_SCHEMA)
            self._db.execute("BEGIN IMMEDIATE")
            try:
                row = self._db.execute(
                    "SELECT value FROM meta WHERE key='schema_version'").fetchone()
                if row is None:
                    self._db.execute(
                        "INSERT INTO meta VALUES('schema_version', ?)", (str(SCHEMA_VERSION),))
                    self._db.execute("INSERT INTO meta VALUES('next_session_id', '1')")
                elif int(row[0]) != SCHEMA_VERSION:
                    raise StorageError(f"unsupported schema version {row[0]}")
                self._db.execute("COMMIT")
            except BaseException:
                self._db.execute("ROLLBACK")
                raise

    def _next_session_id(self) -> int:
        sid = int(self._db.execute(
            "SELECT value FROM meta WHERE key='next_session_id'").fetchone()[0])
        self._db.execute(
            "UPDATE meta SET value=? WHERE key='next_session_id'", (str(sid + 1),))
        return sid

    def upsert_session(self, user_hash: str, start_time: int, key: bytes,
                       version: int = 1, identifiers: dict | None = None,
                       created_at: int | None = None) -> int:
        with self._lock:
            self._db.execute("BEGIN IMMEDIATE")
            try:
                row = self._db.execute(
                    "SELECT user_id FROM users WHERE user_hash=?", (user_hash,)).fetchone()
                if row is None:
                    cur = self._db.execute(
                        "INSERT INTO users(user_hash) VALUES(?)", (user_hash,))
                    user_id = cur.lastrowid
                else:
                    user_id = row[0]
                row = self._db.execute(
                    "SELECT session_id FROM sessions WHERE user_id=? AND start_time=?",
                    (user_id, start_time)).fetchone()
                if row is None:
                    sid = self._next_session_id()
                    self._db.execute(
                        "INSERT INTO sessions(session_id, user_id, start_time, key, "
                        "version, identifiers, created_at) VALUES(?,?,?,?,?,?,?)",
                        (sid, user_id, start_time, key, version,
                         _identifiers_text(identifiers),
                         int(time.time()) if created_at is None else created_at))
                else:
                    sid = row[0]
                    self._db.execute(
                        "UPDATE sessions SET key=?, version=?, identifiers=? "
                        "WHERE session_id=?",
                        (key, version, _identifiers_text(identifiers), sid))
                self._db.execute("COMMIT")
                return sid
            except BaseException:
                self._db.execute("ROLLBACK")
                raise

    def lookup_session_key(self, session_id: int):
        with self._lock:
            row = self._db.execute(
                "SELECT s.key, u.user_hash, s.start_time FROM sessions s "
                "JOIN users u ON u.user_id = s.user_id WHERE s.session_id=?",
                (session_id,)).fetchone()
            if row is None:
                return None
            return bytes(row[0]), row[1], row[2]

    def intern_auxiliary(self, mac: str, essid: str) -> int:
        with self._lock:
            return self._intern(mac, essid)

    def _intern(self, mac: str, essid: str) -> int:
        row = self._db.execute(
            "SELECT ap_id FROM access_points WHERE mac=? AND essid=?",
            (mac, essid)).fetchone()
        if row is not None:
            return row[0]
        cur = self._db.execute(
            "INSERT INTO access_points(mac, essid) VALUES(?,?)", (mac, essid))
        return cur.lastrowid

    def write_rows(self, session_id: int, streams: dict[str, list[dict]]) -> int:
        with self._lock:
            if self.lookup_session_key(session_id) is None:
                raise UnknownSessionId(session_id)
            self._db.execute("BEGIN IMMEDIATE")
            try:
                count = 0
                for stream in sorted(streams):
                    for row in streams[stream]:
                        self._insert_row(session_id, stream, row)
                        count += 1
                self._db.execute("COMMIT")
                return count
            except BaseException:
                self._db.execute("ROLLBACK")
                raise

    def _insert_row(self, sid: int, stream: str, row: dict):
        ts, ms, idx = _row_key(row)
        if stream == "gps":
            self._db.execute(
                "INSERT OR IGNORE INTO gps_rows VALUES(?,?,?,?,?,?,?,?,?,?)",
                (sid, ts, ms, idx, row["lat"], row["lon"], row["alt"],
                 row["speed"], row["accuracy"], row["device_ts"]))
        elif stream in MOTION_STREAMS:
            samples = row["samples"]
            self._db.execute(
                "INSERT OR IGNORE INTO motion_rows VALUES(?,?,?,?,?,?,?,?)",
                (sid, stream, ts, ms, idx, row["rate"], len(samples),
                 _pack_samples(samples)))
        elif stream == "wifi":
            ap_id = row.get("ap_id")
            if ap_id is None:
                ap_id = self._intern(row["mac"], row["essid"])
            self._db.execute(
                "INSERT OR IGNORE INTO wifi_rows VALUES(?,?,?,?,?,?)",
                (sid, ts, ms, idx, ap_id, row["rssi"]))
        elif stream == "bt":
            self._db.execute(
                "INSERT OR IGNORE INTO bt_rows VALUES(?,?,?,?,?,?)",
                (sid, ts, ms, idx, row["device_id"], row["rssi"]))
        elif stream == "pressure":
            self._db.execute(
                "INSERT OR IGNORE INTO pressure_rows VALUES(?,?,?,?,?)",
                (sid, ts, ms, idx, row["hpa"]))
        elif stream == "obd":
            self._db.execute(
                "INSERT OR IGNORE INTO obd_rows VALUES(?,?,?,?,?,?)",
                (sid, ts, ms, idx, row["pid"], row["value"]))
        elif stream == "events":
            self._db.execute(
                "INSERT OR IGNORE INTO event_rows VALUES(?,?,?,?,?,?)",
                (sid, ts, ms, idx, row["kind"], row.get("detail")))
        else:
            raise StorageError(f"unknown stream {stream!r}")

    def read_session_rows(self, session_id: int, streams: Iterable[str] | None = None,
                          start_ts: int | None = None, end_ts: int | None = None
                          ) -> dict[str, list[dict]]:
        wanted = tuple(streams) if streams else (
            "gps", "accel", "gyro", "mag", "wifi", "bt", "pressure", "obd", "events")
        bounds = ""
        args: list = []
        if start_ts is not None:
            bounds += " AND ts >= ?"
            args.append(start_ts)
        if end_ts is not None:
            bounds += " AND ts < ?"
            args.append(end_ts)
        out: dict[str, list[dict]] = {}
        with self._lock:
            for stream in wanted:
                rows = self._read_stream(session_id, stream, bounds, args)
                if rows:
                    out[stream] = rows
        return out

    def _read_stream(self, sid: int, stream: str, bounds: str, args: list) -> list[dict]:
        order = " ORDER BY ts, ms, idx"
        shaped = []
        if stream == "gps":
            query = ("SELECT ts, ms, idx, lat, lon, alt, speed, accuracy, device_ts "
                     "FROM gps_rows WHERE session_id=?" + bounds + order)
            for ts, ms, idx, lat, lon, alt, speed, accuracy, device_ts in \
                    self._db.execute(query, (sid, *args)):
                row = _common_out(ts, ms, idx)
                row.update(lat=lat, lon=lon, alt=alt, speed=speed,
                           accuracy=accuracy, device_ts=device_ts)
                shaped.append(row)
        elif stream in MOTION_STREAMS:
            query = ("SELECT ts, ms, idx, rate, samples FROM motion_rows "
                     "WHERE session_id=? AND stream=?" + bounds + order)
            for ts, ms, idx, rate, blob in self._db.execute(query, (sid, stream, *args)):
                row = _common_out(ts, ms, idx)
                row["samples"] = _unpack_samples(blob)
                row["rate"] = rate
                shaped.append(row)
        elif stream == "wifi":
            query = ("SELECT w.ts, w.ms, w.idx, w.ap_id, w.rssi, a.mac, a.essid "
                     "FROM wifi_rows w LEFT JOIN access_points a ON a.ap_id = w.ap_id "
                     "WHERE w.session_id=?" + bounds.replace("ts", "w.ts") +
                     " ORDER BY w.ts, w.ms, w.idx")
            for ts, ms, idx, ap_id, rssi, mac, essid in self._db.execute(query, (sid, *args)):
                row = _common_out(ts, ms, idx)
                row.update(rssi=rssi, ap_id=ap_id)
                if mac is not None:
                    row.update(mac=mac, essid=essid)
                shaped.append(row)
        elif stream == "bt":
            query = ("SELECT ts, ms, idx, device_id, rssi FROM bt_rows "
                     "WHERE session_id=?" + bounds + order)
            for ts, ms, idx, device_id, rssi in self._db.execute(query, (sid, *args)):
                row = _common_out(ts, ms, idx)
                row.update(device_id=device_id, rssi=rssi)
                shaped.append(row)
        elif stream == "pressure":
            query = ("SELECT ts, ms, idx, hpa FROM pressure_rows "
                     "WHERE session_id=?" + bounds + order)
            for ts, ms, idx, hpa in self._db.execute(query, (sid, *args)):
                row = _common_out(ts, ms, idx)
                row["hpa"] = hpa
                shaped.append(row)
        elif stream == "obd":
            query = ("SELECT ts, ms, idx, pid, value FROM obd_rows "
                     "WHERE session_id=?" + bounds + order)
            for ts, ms, idx, pid, value in self._db.execute(query, (sid, *args)):
                row = _common_out(ts, ms, idx)
                row.update(pid=pid, value=value)
                shaped.append(row)
        elif stream == "events":
            query = ("SELECT ts, ms, idx, kind, detail FROM event_rows "
                     "WHERE session_id=?" + bounds + order)
            for ts, ms, idx, kind, detail in self._db.execute(query, (sid, *args)):
                row = _common_out(ts, ms, idx)
                row["kind"] = kind
                if detail is not None:
                    row["detail"] = detail
                shaped.append(row)
        return shaped

    def storage_stats(self) -> dict:
        sums = {
            "gps": "47 * COUNT(*)",
            "wifi": "17 * COUNT(*)",
            "bt": "16 * COUNT(*)",
            "pressure": "12 * COUNT(*)",
            "obd": "14 * COUNT(*)",
            "events": "SUM(8 + LENGTH(CAST(kind AS BLOB)) "
                      "+ IFNULL(LENGTH(CAST(detail AS BLOB)), 0))",
        }
        tables = {"gps": "gps_rows", "wifi": "wifi_rows", "bt": "bt_rows",
                  "pressure": "pressure_rows", "obd": "obd_rows", "events": "event_rows"}
        rows: dict[str, int] = {}
        logical: dict[str, int] = {}
        with self._lock:
            for stream, table in tables.items():
                n, total = self._db.execute(
                    f"SELECT COUNT(*), {sums[stream]} FROM {table}").fetchone()
                if n:
                    rows[stream] = n
                    logical[stream] = int(total)
            for stream in MOTION_STREAMS:
                n, total = self._db.execute(
                    "SELECT COUNT(*), SUM(8 + 6 * n) FROM motion_rows WHERE stream=?",
                    (stream,)).fetchone()
                if n:
                    rows[stream] = n
                    logical[stream] = int(total)
            sessions = self._db.execute("SELECT COUNT(*) FROM sessions").fetchone()[0]
            aps = self._db.execute("SELECT COUNT(*) FROM access_points").fetchone()[0]
        return {
            "sessions": sessions,
            "access_points": aps,
            "rows": rows,
            "logical_bytes": logical,
            "total_rows": sum(rows.values()),
            "total_logical_bytes": sum(logical.values()),
        }

    def flush(self):
        with self._lock:
            self._db.execute("PRAGMA wal_checkpoint(TRUNCATE)")

    def close(self):
        with self._lock:
            self._db.close()


def open_storage(selector: str):
    """'memory', 'sqlite:<path>', or a bare filesystem path."""
    if selector == "memory":
        return MemoryStorage()
    path = selector[len("sqlite:"):] if selector.startswith("sqlite:") else selector
    if not path:
        raise ValueError("empty storage selector")
    return SqliteStorage(path)
