"""Append-only hash-chained ledger for small control-plane records.

Consensus is collapsed to a single deterministic sequencer: submissions
queue up, commit_round orders them by (arrival time, submitter, dedup
nonce) and appends hash-chained entries. What the rest of the stack
relies on is exactly what this gives: tamper evidence, total order,
replica determinism, and latest-record-wins state queries.

Payloads are capped at 4 KiB; the chain carries registrations, identity
associations, topology updates, and token ownership, nothing bulkier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .hashing import TAG_ENTRY, TAG_LEDGER_STATE, TAG_PAYLOAD, owf, u64
from .wire import Reader, WireError, pack_bytes, pack_str, pack_u8, pack_u32, pack_u64

ADDRESS_SIZE = 32
GENESIS_PREV = bytes(ADDRESS_SIZE)
MAX_PAYLOAD_BYTES = 4096

REGISTRATION_KINDS = ("overlay-node", "user", "app-server", "legacy-aaa")

CHAIN_MAGIC = b"OVNCHAIN1"


class InvalidTx(Exception):
    """Submission rejected; the message carries the reason."""


# ---------------------------------------------------------------------------
# Payload types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegistrationTx:
    """Identity or service registration.

    app-server registrations must either list access-control entries
    (NFT token ids and/or legacy server addresses) or mark themselves
    open-access explicitly.
    """

    kind: str
    subject: bytes  # BCADD address or APPID id
    public_key: bytes
    epoch: int = 0
    access_control: tuple[bytes | str, ...] = ()
    open_access: bool = False

    def validate(self) -> None:
        if self.kind not in REGISTRATION_KINDS:
            raise InvalidTx(f"unknown registration kind {self.kind!r}")
        if len(self.subject) != ADDRESS_SIZE:
            raise InvalidTx("subject must be 32 bytes")
        if self.kind == "app-server" and not self.access_control and not self.open_access:
            raise InvalidTx("app-server registration needs access_control or open_access")
        for item in self.access_control:
            if isinstance(item, bytes):
                if len(item) != ADDRESS_SIZE:
                    raise InvalidTx("token ids must be 32 bytes")
            elif not isinstance(item, str) or not item:
                raise InvalidTx("access_control entries are token ids or server addresses")

    def to_bytes(self) -> bytes:
        acl = pack_u32(len(self.access_control))
        for item in self.access_control:
            if isinstance(item, bytes):
                acl += pack_u8(0) + item
            else:
                acl += pack_u8(1) + pack_str(item)
        return (
            pack_str(self.kind)
            + self.subject
            + pack_bytes(self.public_key)
            + u64(self.epoch)
            + acl
            + pack_u8(1 if self.open_access else 0)
        )

    @classmethod
    def read(cls, r: Reader) -> "RegistrationTx":
        kind = r.str_()
        subject = r.take(ADDRESS_SIZE)
        public_key = r.bytes_()
        epoch = r.u64()
        acl: list[bytes | str] = []
        for _ in range(r.u32()):
            tag = r.u8()
            if tag == 0:
                acl.append(r.take(ADDRESS_SIZE))
            elif tag == 1:
                acl.append(r.str_())
            else:
                raise WireError(f"bad access_control tag {tag}")
        open_access = bool(r.u8())
        return cls(kind, subject, public_key, epoch, tuple(acl), open_access)


@dataclass(frozen=True)
class AssociationRecord:
    """Binding of a subject address to its serving access point.

    seq is 0 at submission and carries the ledger sequence once
    committed; the highest-seq record per subject is live.
    """

    subject: bytes
    attachment: str  # access point id
    segment: int
    epoch: int = 0
    seq: int = 0

    def validate(self) -> None:
        if len(self.subject) != ADDRESS_SIZE:
            raise InvalidTx("subject must be 32 bytes")
        if not self.attachment:
            raise InvalidTx("attachment must be non-empty")
        if self.segment < 0:
            raise InvalidTx("segment must be non-negative")

    def to_bytes(self) -> bytes:
        return (
            self.subject
            + pack_str(self.attachment)
            + pack_u64(self.segment)
            + u64(self.epoch)
            + u64(self.seq)
        )

    @classmethod
    def read(cls, r: Reader) -> "AssociationRecord":
        return cls(
            subject=r.take(ADDRESS_SIZE),
            attachment=r.str_(),
            segment=r.u64(),
            epoch=r.u64(),
            seq=r.u64(),
        )


@dataclass(frozen=True)
class TopologyUpdate:
    """Inter-segment links reported by an access point."""

    links: tuple[tuple[int, int, int], ...]
    origin: str

    def validate(self) -> None:
        for a, b, cost in self.links:
            if a == b:
                raise InvalidTx(f"self-loop link on segment {a}")
            if cost < 1:
                raise InvalidTx("hop-cost must be >= 1")

    def to_bytes(self) -> bytes:
        body = pack_u32(len(self.links))
        for a, b, cost in self.links:
            body += pack_u64(a) + pack_u64(b) + pack_u64(cost)
        return body + pack_str(self.origin)

    @classmethod
    def read(cls, r: Reader) -> "TopologyUpdate":
        links = tuple((r.u64(), r.u64(), r.u64()) for _ in range(r.u32()))
        return cls(links=links, origin=r.str_())


@dataclass(frozen=True)
class NftOwnership:
    """Token ownership record; a later record for the same token is a
    transfer and supersedes the earlier one."""

    token_id: bytes
    owner: bytes  # BCADD address
    seq: int = 0

    def validate(self) -> None:
        if len(self.token_id) != ADDRESS_SIZE:
            raise InvalidTx("token_id must be 32 bytes")
        if len(self.owner) != ADDRESS_SIZE:
            raise InvalidTx("owner must be 32 bytes")

    def to_bytes(self) -> bytes:
        return self.token_id + self.owner + u64(self.seq)

    @classmethod
    def read(cls, r: Reader) -> "NftOwnership":
        return cls(token_id=r.take(ADDRESS_SIZE), owner=r.take(ADDRESS_SIZE), seq=r.u64())


Payload = RegistrationTx | AssociationRecord | TopologyUpdate | NftOwnership

_PAYLOAD_TAGS: dict[type, int] = {
    RegistrationTx: 1,
    AssociationRecord: 2,
    TopologyUpdate: 3,
    NftOwnership: 4,
}
_PAYLOAD_READERS = {
    1: RegistrationTx.read,
    2: AssociationRecord.read,
    3: TopologyUpdate.read,
    4: NftOwnership.read,
}


def encode_payload(payload: Payload) -> bytes:
    tag = _PAYLOAD_TAGS.get(type(payload))
    if tag is None:
        raise InvalidTx(f"unsupported payload type {type(payload).__name__}")
    return pack_u8(tag) + payload.to_bytes()


def decode_payload(data: bytes) -> Payload:
    r = Reader(data)
    reader = _PAYLOAD_READERS.get(r.u8())
    if reader is None:
        raise WireError("unknown payload tag")
    payload = reader(r)
    r.expect_end()
    return payload


# ---------------------------------------------------------------------------
# Entries and chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    prev_hash: bytes
    payload: Payload
    payload_hash: bytes
    entry_hash: bytes

    def to_bytes(self) -> bytes:
        return (
            u64(self.seq)
            + self.prev_hash
            + pack_bytes(encode_payload(self.payload))
            + self.payload_hash
            + self.entry_hash
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "LedgerEntry":
        r = Reader(data)
        seq = r.u64()
        prev_hash = r.take(32)
        payload = decode_payload(r.bytes_())
        payload_hash = r.take(32)
        entry_hash = r.take(32)
        r.expect_end()
        return cls(seq, prev_hash, payload, payload_hash, entry_hash)


def _payload_hash(payload: Payload) -> bytes:
    return owf(TAG_PAYLOAD, encode_payload(payload))


def _entry_hash(seq: int, prev_hash: bytes, payload_hash: bytes) -> bytes:
    return owf(TAG_ENTRY, u64(seq), prev_hash, payload_hash)


def make_entry(seq: int, prev_hash: bytes, payload: Payload) -> LedgerEntry:
    payload_hash = _payload_hash(payload)
    return LedgerEntry(
        seq=seq,
        prev_hash=prev_hash,
        payload=payload,
        payload_hash=payload_hash,
        entry_hash=_entry_hash(seq, prev_hash, payload_hash),
    )


def verify_chain(entries: Sequence[LedgerEntry]) -> bool:
    """True iff the chain links from genesis and every hash recomputes."""
    prev = GENESIS_PREV
    for index, entry in enumerate(entries):
        try:
            if entry.seq != index or entry.prev_hash != prev:
                return False
            if _payload_hash(entry.payload) != entry.payload_hash:
                return False
            if _entry_hash(entry.seq, entry.prev_hash, entry.payload_hash) != entry.entry_hash:
                return False
        except (InvalidTx, WireError, TypeError):
            return False
        prev = entry.entry_hash
    return True


@dataclass(frozen=True)
class Receipt:
    """Submission acknowledgement carrying the client's dedup nonce."""

    nonce: bytes
    submitter: str
    duplicate: bool = False


@dataclass(frozen=True)
class _Pending:
    time: int
    submitter: str
    nonce: bytes
    payload: Payload

    def sort_key(self):
        return (self.time, self.submitter, self.nonce)


class Ledger:
    """Sequencer-side ledger: queue, chain, and derived state.

    State mutates only in commit_round / apply_entries; queries are pure
    reads of the latest committed state.
    """

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._queue: list[_Pending] = []
        self._receipts: dict[tuple[str, bytes], Receipt] = {}
        self._registrations: dict[bytes, tuple[int, RegistrationTx]] = {}
        self._associations: dict[bytes, AssociationRecord] = {}
        self._owners: dict[bytes, tuple[int, bytes]] = {}
        self._topology: list[tuple[int, TopologyUpdate]] = []

    # -- write path ---------------------------------------------------------

    def submit(self, payload: Payload, *, submitter: str, at_time: int, nonce: bytes) -> Receipt:
        """Queue a transaction. Idempotent per (submitter, nonce)."""
        seen = self._receipts.get((submitter, bytes(nonce)))
        if seen is not None:
            return replace(seen, duplicate=True)
        payload.validate()
        encoded = encode_payload(payload)
        if len(encoded) > MAX_PAYLOAD_BYTES:
            raise InvalidTx(
                f"payload is {len(encoded)} bytes; the ledger carries small data only "
                f"(cap {MAX_PAYLOAD_BYTES})"
            )
        receipt = Receipt(nonce=bytes(nonce), submitter=submitter)
        self._receipts[(submitter, bytes(nonce))] = receipt
        self._queue.append(_Pending(at_time, submitter, bytes(nonce), payload))
        return receipt

    def commit_round(self) -> list[LedgerEntry]:
        """Drain the queue in (time, submitter, nonce) order.

        Registrations conflicting on subject within one round commit
        first-writer-wins: the loser is dropped, never chained, so state
        stays a pure function of the entry stream.
        """
        pending = sorted(self._queue, key=_Pending.sort_key)
        self._queue.clear()
        committed: list[LedgerEntry] = []
        round_subjects: set[bytes] = set()
        for item in pending:
            if isinstance(item.payload, RegistrationTx):
                if item.payload.subject in round_subjects:
                    continue  # first-writer-wins inside the round
                round_subjects.add(item.payload.subject)
            committed.append(self._append(item.payload))
        return committed

    def _append(self, payload: Payload) -> LedgerEntry:
        seq = len(self._entries)
        prev = self._entries[-1].entry_hash if self._entries else GENESIS_PREV
        entry = make_entry(seq, prev, payload)
        self._entries.append(entry)
        self._apply(entry)
        return entry

    def apply_entries(self, entries: Iterable[LedgerEntry]) -> None:
        """Replica path: verify each entry extends the chain, then apply.

        Raises ValueError on any hash or linkage mismatch.
        """
        for entry in entries:
            seq = len(self._entries)
            prev = self._entries[-1].entry_hash if self._entries else GENESIS_PREV
            if entry.seq != seq or entry.prev_hash != prev:
                raise ValueError(f"entry {entry.seq} does not extend the chain at {seq}")
            if _payload_hash(entry.payload) != entry.payload_hash:
                raise ValueError(f"payload hash mismatch at seq {seq}")
            if _entry_hash(seq, prev, entry.payload_hash) != entry.entry_hash:
                raise ValueError(f"entry hash mismatch at seq {seq}")
            self._entries.append(entry)
            self._apply(entry)

    def _apply(self, entry: LedgerEntry) -> None:
        payload = entry.payload
        if isinstance(payload, RegistrationTx):
            self._registrations[payload.subject] = (entry.seq, payload)
        elif isinstance(payload, AssociationRecord):
            self._associations[payload.subject] = replace(payload, seq=entry.seq)
        elif isinstance(payload, NftOwnership):
            self._owners[payload.token_id] = (entry.seq, payload.owner)
        elif isinstance(payload, TopologyUpdate):
            self._topology.append((entry.seq, payload))

    # -- read path ----------------------------------------------------------

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    @property
    def head_seq(self) -> int:
        return len(self._entries) - 1

    def pending_count(self) -> int:
        return len(self._queue)

    def query_registration(self, subject: bytes) -> RegistrationTx | None:
        found = self._registrations.get(bytes(subject))
        return found[1] if found else None

    def query_owner(self, token_id: bytes) -> bytes | None:
        found = self._owners.get(bytes(token_id))
        return found[1] if found else None

    def query_association(self, subject: bytes) -> AssociationRecord | None:
        return self._associations.get(bytes(subject))

    def query_topology(self) -> list[tuple[int, TopologyUpdate]]:
        """All committed topology updates with their ledger seqs, in order."""
        return list(self._topology)

    def state_hash(self) -> bytes:
        """Canonical digest of the derived state, for replica comparison."""
        blob = b""
        for subject in sorted(self._registrations):
            seq, tx = self._registrations[subject]
            blob += u64(seq) + pack_bytes(encode_payload(tx))
        for subject in sorted(self._associations):
            blob += pack_bytes(encode_payload(self._associations[subject]))
        for token in sorted(self._owners):
            seq, owner = self._owners[token]
            blob += token + u64(seq) + owner
        for seq, update in self._topology:
            blob += u64(seq) + pack_bytes(encode_payload(update))
        return owf(TAG_LEDGER_STATE, blob)

    # -- export / import ----------------------------------------------------

    def export_chain(self) -> bytes:
        """Canonical binary chain: magic, entry count, length-prefixed
        entries (layout documented in docs/wire-format.md)."""
        blob = CHAIN_MAGIC + pack_u32(len(self._entries))
        for entry in self._entries:
            blob += pack_bytes(entry.to_bytes())
        return blob

    @classmethod
    def import_chain(cls, blob: bytes) -> "Ledger":
        """Parse and verify an exported chain. Raises ValueError if the
        bytes are malformed or the chain does not verify."""
        r = Reader(blob)
        if r.take(len(CHAIN_MAGIC)) != CHAIN_MAGIC:
            raise ValueError("not a chain export")
        count = r.u32()
        entries = []
        for _ in range(count):
            entries.append(LedgerEntry.from_bytes(r.bytes_()))
        r.expect_end()
        ledger = cls()
        ledger.apply_entries(entries)
        return ledger

    def dump_jsonl(self) -> str:
        """Human-readable chain dump, one JSON object per line."""
        lines = []
        for entry in self._entries:
            lines.append(json.dumps({
                "seq": entry.seq,
                "prev_hash": entry.prev_hash.hex(),
                "payload_kind": type(entry.payload).__name__,
                "payload_hash": entry.payload_hash.hex(),
                "entry_hash": entry.entry_hash.hex(),
            }, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + ("\n" if lines else "")
