"""RBS-side agent and central collector for measurement reports.

The agent consolidates raw MR events per UE over tumbling windows,
replaces UE identities by salted hash tokens and ships batches to the
collector over a length-prefixed framing::

    +-----------------+---------+------+-----------------------+
    | length (u32 BE) | version | kind | payload (length bytes) |
    +-----------------+---------+------+-----------------------+

Payloads are canonical JSON (UTF-8, sorted keys, no whitespace), so two
equal messages always encode to the same bytes.
"""
from __future__ import annotations

import asyncio
import csv
import enum
import hashlib
import io
import json
import logging
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .grid import GeoPoint, ParseError, RawSample, Source

log = logging.getLogger("arcade.collector")

WIRE_VERSION = 0x01
HEADER = struct.Struct(">IBB")
MAX_PAYLOAD = 16 * 1024 * 1024
TOKEN_HEX_CHARS = 32
EVENTS_HEADER = ("ue_id", "pci", "rsrp_dbm", "timestamp_ms")


# --- identities and consolidation ------------------------------------------------------

def anonymize(ue_id: Union[str, bytes], salt: bytes) -> str:
    """Salted SHA-256 token: lowercase hex of the first 16 digest bytes."""
    raw = ue_id.encode("utf-8") if isinstance(ue_id, str) else bytes(ue_id)
    return hashlib.sha256(bytes(salt) + raw).hexdigest()[:TOKEN_HEX_CHARS]


@dataclass(frozen=True)
class AgentConfig:
    agent_id: str
    window_ms: int = 1000
    salt: bytes = b""
    max_batch: int = 100

    def __post_init__(self):
        if self.window_ms <= 0:
            raise ValueError("window_ms must be > 0")
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if not re.fullmatch(r"[A-Za-z0-9_.-]{1,64}", self.agent_id):
            raise ValueError(f"agent_id {self.agent_id!r} must match [A-Za-z0-9_.-]{{1,64}}")


class MrEvent(NamedTuple):
    ue_id: str
    pci: int
    rsrp_dbm: float
    timestamp_ms: int


class Reading(NamedTuple):
    pci: int
    mean_rsrp_dbm: float
    count: int


@dataclass(frozen=True)
class ConsolidatedRecord:
    ue_token: str
    window_start_ms: int
    readings: Tuple[Reading, ...]

    def __post_init__(self):
        if not self.readings:
            raise ValueError("a consolidated record needs at least one reading")
        pcis = [r.pci for r in self.readings]
        if len(set(pcis)) != len(pcis):
            raise ValueError(f"duplicate PCI in record readings: {pcis}")
        if any(r.count < 1 for r in self.readings):
            raise ValueError("reading counts must be >= 1")

    @property
    def count(self) -> int:
        return sum(r.count for r in self.readings)

    def key(self, agent_id: str) -> Tuple[str, int, str]:
        return (agent_id, self.window_start_ms, self.ue_token)

    def to_dict(self) -> dict:
        return {"ue_token": self.ue_token, "window_start_ms": self.window_start_ms,
                "readings": [[r.pci, r.mean_rsrp_dbm, r.count] for r in self.readings]}

    @classmethod
    def from_dict(cls, d) -> "ConsolidatedRecord":
        try:
            readings = tuple(Reading(int(p), float(v), int(c)) for p, v, c in d["readings"])
            return cls(str(d["ue_token"]), int(d["window_start_ms"]), readings)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedPayload(f"bad record: {exc}") from exc


def _window_start(t_ms: int, window_ms: int) -> int:
    return (t_ms // window_ms) * window_ms


class Consolidator:
    """Streaming per-UE tumbling-window consolidation.

    Events must be time-ordered per UE. A UE's record is emitted as soon as
    one of its events falls into a later window; :meth:`flush` closes the rest.
    """

    def __init__(self, cfg: AgentConfig):
        self.cfg = cfg
        self._open: Dict[str, Tuple[int, Dict[int, List[float]]]] = {}

    def _close(self, ue_id: str) -> ConsolidatedRecord:
        start, per_pci = self._open.pop(ue_id)
        readings = tuple(Reading(p, math.fsum(v) / len(v), len(v)) for p, v in sorted(per_pci.items()))
        return ConsolidatedRecord(anonymize(ue_id, self.cfg.salt), start, readings)

    def push(self, ev: MrEvent) -> List[ConsolidatedRecord]:
        start = _window_start(int(ev.timestamp_ms), self.cfg.window_ms)
        out = []
        cur = self._open.get(ev.ue_id)
        if cur is not None and cur[0] != start:
            if start < cur[0]:
                raise ValueError(f"events for UE {ev.ue_id!r} are not time-ordered")
            out.append(self._close(ev.ue_id))
        _, per_pci = self._open.setdefault(ev.ue_id, (start, {}))
        per_pci.setdefault(int(ev.pci), []).append(float(ev.rsrp_dbm))
        return out

    def flush(self) -> List[ConsolidatedRecord]:
        return [self._close(ue) for ue in sorted(self._open)]


def consolidate(events: Iterable[MrEvent], cfg: AgentConfig) -> List[ConsolidatedRecord]:
    """Consolidate a finite event stream; output is ordered by (window, token)."""
    evs = sorted((MrEvent(*e) for e in events), key=lambda e: (e.ue_id, e.timestamp_ms))
    c = Consolidator(cfg)
    out = []
    for ev in evs:
        out.extend(c.push(ev))
    out.extend(c.flush())
    out.sort(key=lambda r: (r.window_start_ms, r.ue_token))
    return out


def events_from_mr(reports: Sequence[Tuple[str, Sequence[RawSample]]]) -> List[MrEvent]:
    """Flatten simulator MR output ``[(ue_id, samples)]`` into events."""
    return [MrEvent(ue, s.pci, s.rsrp_dbm, s.timestamp_ms) for ue, samples in reports for s in samples]


def write_events_csv(events: Iterable[MrEvent], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENTS_HEADER)
        for e in events:
            w.writerow([e.ue_id, e.pci, repr(float(e.rsrp_dbm)), int(e.timestamp_ms)])


def read_events_csv(path) -> List[MrEvent]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != EVENTS_HEADER:
        raise ParseError(1, 1, f"expected header {','.join(EVENTS_HEADER)}")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(EVENTS_HEADER):
            raise ParseError(n, 1, f"expected {len(EVENTS_HEADER)} fields, got {len(row)}")
        try:
            out.append(MrEvent(row[0], int(row[1]), float(row[2]), int(row[3])))
        except ValueError as exc:
            raise ParseError(n, 1, str(exc)) from exc
    return out


# --- wire format ---------------------------------------------------------------------

class WireError(ValueError):
    """Base class of framing errors."""


class LengthOverflow(WireError):
    pass


class UnknownVersion(WireError):
    pass


class TruncatedFrame(WireError):
    pass


class MalformedPayload(WireError):
    pass


class UnknownKind(WireError):
    pass


class TransportError(ConnectionError):
    """Session failed: peer gone, protocol violated or retries exhausted."""


class Kind(enum.IntEnum):
    HELLO = 0
    BATCH = 1
    ACK = 2
    BYE = 3


@dataclass(frozen=True)
class WireMessage:
    kind: Kind
    payload: bytes = b""
    version: int = WIRE_VERSION

    def body(self):
        return json.loads(self.payload.decode("utf-8")) if self.payload else None


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


def message(kind: Kind, body=None) -> WireMessage:
    return WireMessage(Kind(kind), b"" if body is None else canonical_json(body))


def hello(agent_id: str) -> WireMessage:
    return message(Kind.HELLO, {"agent_id": agent_id})


def batch(seq: int, records: Sequence[ConsolidatedRecord]) -> WireMessage:
    return message(Kind.BATCH, {"seq": seq, "records": [r.to_dict() for r in records]})


def ack(seq: int, stored: int, duplicates: int) -> WireMessage:
    return message(Kind.ACK, {"seq": seq, "stored": stored, "duplicates": duplicates})


def bye() -> WireMessage:
    return message(Kind.BYE)


def encode(msg: WireMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise LengthOverflow(f"payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD}")
    if msg.version != WIRE_VERSION:
        raise UnknownVersion(f"cannot encode version {msg.version}")
    return HEADER.pack(len(msg.payload), msg.version, int(msg.kind)) + bytes(msg.payload)


def _check_header(length: int, version: int, kind: int) -> Kind:
    if version != WIRE_VERSION:
        raise UnknownVersion(f"unknown wire version 0x{version:02x}")
    if length > MAX_PAYLOAD:
        raise LengthOverflow(f"declared payload length {length} exceeds {MAX_PAYLOAD}")
    try:
        return Kind(kind)
    except ValueError:
        raise UnknownKind(f"unknown message kind {kind}") from None


def _check_payload(payload: bytes) -> None:
    if not payload:
        return
    try:
        json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"payload is not UTF-8 JSON: {exc}") from exc


def decode(data: bytes) -> WireMessage:
    """Decode exactly one frame."""
    data = bytes(data)
    if len(data) < HEADER.size:
        raise TruncatedFrame(f"frame header needs {HEADER.size} bytes, got {len(data)}")
    length, version, kind = HEADER.unpack_from(data)
    k = _check_header(length, version, kind)
    end = HEADER.size + length
    if len(data) < end:
        raise TruncatedFrame(f"payload needs {length} bytes, got {len(data) - HEADER.size}")
    if len(data) > end:
        raise MalformedPayload(f"{len(data) - end} trailing bytes after frame")
    payload = data[HEADER.size:end]
    _check_payload(payload)
    return WireMessage(k, payload, version)


async def read_message(reader: asyncio.StreamReader) -> Optional[WireMessage]:
    """Next frame from a stream, or None on a clean end of stream."""
    try:
        head = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise TruncatedFrame("stream ended inside a frame header") from exc
    length, version, kind = HEADER.unpack(head)
    k = _check_header(length, version, kind)
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError as exc:
        raise TruncatedFrame("stream ended inside a payload") from exc
    _check_payload(payload)
    return WireMessage(k, payload, version)


async def write_message(writer: asyncio.StreamWriter, msg: WireMessage) -> None:
    writer.write(encode(msg))
    await writer.drain()


# --- collector -------------------------------------------------------------------------

class RecordStore:
    """Deduplicating record store, one JSON-lines file per agent.

    With ``directory=None`` records are kept in memory only. An existing
    directory is re-read on construction so dedup survives restarts.
    """

    def __init__(self, directory: Optional[Union[str, Path]] = None):
        self.directory = Path(directory) if directory is not None else None
        self.records: Dict[str, List[ConsolidatedRecord]] = {}
        self._keys: Set[Tuple[str, int, str]] = set()
        self._lock = asyncio.Lock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            for path in sorted(self.directory.glob("*.jsonl")):
                agent = path.stem
                with open(path, encoding="utf-8") as fh:
                    for line in fh:
                        if line.strip():
                            rec = ConsolidatedRecord.from_dict(json.loads(line))
                            self.records.setdefault(agent, []).append(rec)
                            self._keys.add(rec.key(agent))

    def path_for(self, agent_id: str) -> Optional[Path]:
        return None if self.directory is None else self.directory / f"{agent_id}.jsonl"

    async def add(self, agent_id: str, records: Sequence[ConsolidatedRecord]) -> Tuple[int, int]:
        """Store new records; returns (stored, duplicates)."""
        async with self._lock:
            fresh = []
            for r in records:
                k = r.key(agent_id)
                if k not in self._keys:
                    self._keys.add(k)
                    fresh.append(r)
            if fresh:
                self.records.setdefault(agent_id, []).extend(fresh)
                path = self.path_for(agent_id)
                if path is not None:
                    with open(path, "a", encoding="utf-8", newline="\n") as fh:
                        for r in fresh:
                            fh.write(canonical_json(r.to_dict()).decode("utf-8") + "\n")
            return len(fresh), len(records) - len(fresh)

    def count(self, agent_id: Optional[str] = None) -> int:
        """Stored record count (one agent or all)."""
        if agent_id is not None:
            return len(self.records.get(agent_id, []))
        return sum(len(v) for v in self.records.values())

    def event_count(self) -> int:
        """Sum of reading counts over all stored records."""
        return sum(r.count for recs in self.records.values() for r in recs)


@dataclass
class SessionTranscript:
    agent_id: Optional[str] = None
    batches: int = 0
    stored: int = 0
    duplicates: int = 0
    clean_close: bool = False
    error: Optional[str] = None


AckFilter = Callable[[str, int], bool]


class Collector:
    """Accepts concurrent agent sessions and feeds one :class:`RecordStore`.

    ``drop_ack(agent_id, seq)`` returning True suppresses that Ack; tests use
    it to simulate transport loss.
    """

    def __init__(self, store: Optional[RecordStore] = None, *, drop_ack: Optional[AckFilter] = None):
        self.store = store if store is not None else RecordStore()
        self.drop_ack = drop_ack
        self.transcripts: List[SessionTranscript] = []
        self.sessions_done = asyncio.Event()
        self._server: Optional[asyncio.AbstractServer] = None

    async def handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        tr = SessionTranscript()
        self.transcripts.append(tr)
        try:
            first = await read_message(reader)
            if first is None or first.kind != Kind.HELLO:
                raise TransportError("session must start with Hello")
            tr.agent_id = str(first.body()["agent_id"])
            AgentConfig(tr.agent_id)  # validates the id before it names a file
            while True:
                msg = await read_message(reader)
                if msg is None:
                    raise TransportError("stream closed before Bye")
                if msg.kind == Kind.BYE:
                    tr.clean_close = True
                    break
                if msg.kind != Kind.BATCH:
                    raise TransportError(f"unexpected {msg.kind.name} from agent")
                body = msg.body()
                seq = int(body["seq"])
                recs = [ConsolidatedRecord.from_dict(r) for r in body["records"]]
                stored, dup = await self.store.add(tr.agent_id, recs)
                tr.batches += 1
                tr.stored += stored
                tr.duplicates += dup
                if self.drop_ack is not None and self.drop_ack(tr.agent_id, seq):
                    log.debug("dropping ack %s/%d", tr.agent_id, seq)
                    continue
                await write_message(writer, ack(seq, stored, dup))
        except (WireError, TransportError, KeyError, TypeError, ValueError, ConnectionError) as exc:
            tr.error = f"{type(exc).__name__}: {exc}"
            log.warning("session %s failed: %s", tr.agent_id, tr.error)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass
            self.sessions_done.set()

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> Tuple[str, int]:
        self._server = await asyncio.start_server(self.handle, host, port)
        addr = self._server.sockets[0].getsockname()
        return addr[0], addr[1]

    async def wait_sessions(self, n: int) -> None:
        while sum(1 for t in self.transcripts if t.clean_close or t.error) < n:
            self.sessions_done.clear()
            await self.sessions_done.wait()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()


async def collector_serve(host: str, port: int, store: RecordStore, *, max_sessions: Optional[int] = None,
                          ready: Optional[Callable[[str, int], None]] = None) -> List[SessionTranscript]:
    """Serve until ``max_sessions`` sessions have ended (forever if None)."""
    c = Collector(store)
    h, p = await c.start(host, port)
    if ready is not None:
        ready(h, p)
    try:
        if max_sessions is None:
            await asyncio.Event().wait()
        else:
            await c.wait_sessions(max_sessions)
    finally:
        await c.close()
    return c.transcripts


# --- agent -----------------------------------------------------------------------------

@dataclass
class AgentTranscript:
    agent_id: str
    records: int = 0
    events: int = 0
    batches: int = 0
    retries: int = 0
    acks: List[dict] = field(default_factory=list)


def batches_of(records: Sequence[ConsolidatedRecord], max_batch: int) -> List[List[ConsolidatedRecord]]:
    return [list(records[i:i + max_batch]) for i in range(0, len(records), max_batch)]


async def send_records(records: Sequence[ConsolidatedRecord], cfg: AgentConfig, host: str, port: int, *,
                       ack_timeout_s: float = 2.0, retries: int = 3) -> AgentTranscript:
    """Run one agent session: Hello, Batch/Ack (window of 1), Bye."""
    tr = AgentTranscript(cfg.agent_id, records=len(records), events=sum(r.count for r in records))
    try:
        reader, writer = await asyncio.open_connection(host, port)
    except OSError as exc:
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
    try:
        await write_message(writer, hello(cfg.agent_id))
        for seq, chunk in enumerate(batches_of(records, cfg.max_batch)):
            frame = batch(seq, chunk)
            for attempt in range(retries + 1):
                await write_message(writer, frame)
                try:
                    reply = await asyncio.wait_for(_next_ack(reader, seq), ack_timeout_s)
                    break
                except asyncio.TimeoutError:
                    if attempt == retries:
                        raise TransportError(f"no Ack for batch {seq} after {retries} retries") from None
                    tr.retries += 1
                    log.info("agent %s: retrying batch %d", cfg.agent_id, seq)
            tr.batches += 1
            tr.acks.append(reply)
        await write_message(writer, bye())
    except (ConnectionError, WireError) as exc:
        if isinstance(exc, TransportError):
            raise
        raise TransportError(f"session with {host}:{port} failed: {exc}") from exc
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except ConnectionError:
            pass
    return tr


async def _next_ack(reader: asyncio.StreamReader, seq: int) -> dict:
    while True:
        msg = await read_message(reader)
        if msg is None:
            raise TransportError("collector closed the connection")
        if msg.kind != Kind.ACK:
            raise TransportError(f"expected Ack, got {msg.kind.name}")
        body = msg.body()
        # Acks of earlier attempts can arrive late; skip them.
        if int(body["seq"]) == seq:
            return body


async def agent_run(events: Iterable[MrEvent], cfg: AgentConfig, host: str, port: int,
                    **kwargs) -> AgentTranscript:
    """Consolidate and anonymize events, then ship them to the collector."""
    return await send_records(consolidate(events, cfg), cfg, host, port, **kwargs)


# --- geolocation -----------------------------------------------------------------------

@dataclass(frozen=True)
class GeolocationTally:
    records: int
    readings_dropped: int
    records_dropped: int
    dropped_pcis: Dict[int, int]


def geolocate_batch(records: Sequence[ConsolidatedRecord], locator) -> Tuple[List[RawSample], GeolocationTally]:
    """Position consolidated MR records with a trained locator.

    Readings of PCIs outside the locator's cluster are dropped and tallied;
    a record left without readings is dropped as well.
    """
    known = set(locator.pcis)
    dropped: Counter = Counter()
    kept: List[Tuple[ConsolidatedRecord, List[Reading]]] = []
    for rec in records:
        rs = [r for r in rec.readings if r.pci in known]
        dropped.update(r.pci for r in rec.readings if r.pci not in known)
        if rs:
            kept.append((rec, rs))
    samples: List[RawSample] = []
    if kept:
        fps = np.stack([locator.fingerprint({r.pci: r.mean_rsrp_dbm for r in rs}) for _, rs in kept])
        pos_m = locator.locate_m(fps)
        for (rec, rs), (east, north) in zip(kept, pos_m):
            where: GeoPoint = locator.spec.to_geo(float(east), float(north))
            samples.extend(RawSample(r.pci, r.mean_rsrp_dbm, where, rec.window_start_ms, Source.MR, rec.ue_token)
                           for r in rs)
    tally = GeolocationTally(len(records), sum(dropped.values()), len(records) - len(kept),
                             dict(sorted(dropped.items())))
    return samples, tally


def records_from_jsonl(text: str) -> List[ConsolidatedRecord]:
    return [ConsolidatedRecord.from_dict(json.loads(line)) for line in io.StringIO(text) if line.strip()]
