"""Payload codecs for the client/server conversation.

Two payload families: JSON for the negotiation messages (session init and
the published parameters) where extensibility matters, and tight binary
for the bulk ciphertext batches where size matters.  Integers inside
binary payloads are big-endian throughout.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

from .. import exact, lsh
from ..crypto import ot
from ..crypto.paillier import (
    Ciphertext,
    PublicKey,
    ciphertext_from_bytes,
    ciphertext_to_bytes,
    public_key_from_dict,
    public_key_to_dict,
)

PROTOCOL_VERSION = 1

MODE_EXACT = "exact"
MODE_APPROX = "approx"


class MessageType(enum.IntEnum):
    """Wire codes, stable across versions."""

    SESSION_INIT = 1
    PUBLIC_PARAMS = 2
    OT_QUERY_BATCH = 3
    OT_REPLY_BATCH = 4
    SORT_PAIRS = 5
    SORT_OUTCOMES = 6
    SESSION_CLOSE = 7
    ERROR = 8

# OT batch stage tags
STAGE_ANONYMIZE = 1
STAGE_FETCH = 2
STAGE_DEANONYMIZE = 3
_STAGES = (STAGE_ANONYMIZE, STAGE_FETCH, STAGE_DEANONYMIZE)


def pack_bits(bits: Sequence[bool]) -> bytes:
    """MSB-first bit packing, zero-padded to whole bytes."""
    out = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        if b:
            out[i >> 3] |= 0x80 >> (i & 7)
    return bytes(out)


def unpack_bits(data: bytes, count: int) -> tuple[bool, ...]:
    if len(data) < (count + 7) // 8:
        raise ValueError("bit array shorter than its count")
    return tuple(bool(data[i >> 3] & (0x80 >> (i & 7))) for i in range(count))


@dataclass(frozen=True)
class ClientHello:
    """SESSION_INIT payload: protocol version, requested mode, and the
    client's oblivious-lookup public key."""

    mode: str
    client_pk: PublicKey
    version: int = PROTOCOL_VERSION


def hello_to_bytes(hello: ClientHello) -> bytes:
    doc = {
        "version": hello.version,
        "mode": hello.mode,
        "client_pk": public_key_to_dict(hello.client_pk),
    }
    return json.dumps(doc, separators=(",", ":")).encode()


def hello_from_bytes(data: bytes) -> ClientHello:
    doc = json.loads(data.decode())
    if doc.get("version") != PROTOCOL_VERSION:
        raise ValueError(f"unsupported protocol version {doc.get('version')!r}")
    mode = doc.get("mode")
    if mode not in (MODE_EXACT, MODE_APPROX):
        raise ValueError(f"unknown mode {mode!r}")
    return ClientHello(mode, public_key_from_dict(doc["client_pk"]), doc["version"])


def _hash_to_pair(h: exact.UniversalHash) -> list[str]:
    return [str(h.a), str(h.b)]


def _hash_from_pair(pair: Sequence[str], range_: int) -> exact.UniversalHash:
    return exact.UniversalHash(int(pair[0]), int(pair[1]), range_)


@dataclass(frozen=True)
class ApproxParams:
    """Approximate-mode extras: the signature schedule, the shared bank
    seed, and the per-map key prefixes."""

    widths: tuple[int, ...]
    reps: tuple[int, ...]
    bank_seed: int
    prefixes: tuple[bytes, ...]

    @property
    def lsh_params(self) -> lsh.LshParams:
        return lsh.LshParams(self.widths, self.reps, self.bank_seed)


@dataclass(frozen=True)
class PublicParams:
    """Everything the server publishes for one session.

    The weight ciphertexts are encrypted under the server's own key, one
    per rule id in id order; holding them client-side never reveals a
    weight.  `fetch_dims` fixes the OT geometry so transcripts for
    different keys are shaped identically.
    """

    mode: str
    universe_size: int
    server_pk: PublicKey
    weight_cts: tuple[Ciphertext, ...]
    default_items: tuple[int, ...]
    anon_dims: tuple[int, ...]
    table_records: int
    table_buckets: int
    outer: exact.UniversalHash
    inner: exact.UniversalHash
    table_prefix: bytes
    fingerprint_bits: int
    fingerprint_mode: str
    fetch_dims: tuple[int, ...]
    n_chunks: int
    capacity: int
    approx: Optional[ApproxParams] = None

    @property
    def anon_table_size(self) -> int:
        return self.universe_size + 1

    def table_view(self) -> exact.TwoLevelTable:
        """Slotless client-side view for index and fingerprint math."""
        config = exact.TableConfig(
            fingerprint_bits=self.fingerprint_bits,
            fingerprint_mode=self.fingerprint_mode,
        )
        return exact.TwoLevelTable(
            self.table_records,
            self.outer,
            self.inner,
            self.table_prefix,
            config,
            {},
            exact.BuildStats(),
        )


def params_to_bytes(params: PublicParams) -> bytes:
    doc = {
        "version": PROTOCOL_VERSION,
        "mode": params.mode,
        "universe_size": params.universe_size,
        "server_pk": public_key_to_dict(params.server_pk),
        "weights": [
            ciphertext_to_bytes(params.server_pk, ct).hex() for ct in params.weight_cts
        ],
        "default_items": list(params.default_items),
        "anon_dims": list(params.anon_dims),
        "table": {
            "records": params.table_records,
            "buckets": params.table_buckets,
            "outer": _hash_to_pair(params.outer),
            "inner": _hash_to_pair(params.inner),
            "prefix": params.table_prefix.hex(),
            "fp_bits": params.fingerprint_bits,
            "fp_mode": params.fingerprint_mode,
            "dims": list(params.fetch_dims),
            "n_chunks": params.n_chunks,
            "capacity": params.capacity,
        },
    }
    if params.approx is not None:
        doc["approx"] = {
            "widths": list(params.approx.widths),
            "reps": list(params.approx.reps),
            "bank_seed": params.approx.bank_seed,
            "prefixes": [p.hex() for p in params.approx.prefixes],
        }
    return json.dumps(doc, separators=(",", ":")).encode()


def params_from_bytes(data: bytes) -> PublicParams:
    doc = json.loads(data.decode())
    if doc.get("version") != PROTOCOL_VERSION:
        raise ValueError(f"unsupported protocol version {doc.get('version')!r}")
    pk = public_key_from_dict(doc["server_pk"])
    table = doc["table"]
    approx = None
    if "approx" in doc:
        a = doc["approx"]
        approx = ApproxParams(
            tuple(a["widths"]),
            tuple(a["reps"]),
            a["bank_seed"],
            tuple(bytes.fromhex(p) for p in a["prefixes"]),
        )
    return PublicParams(
        mode=doc["mode"],
        universe_size=doc["universe_size"],
        server_pk=pk,
        weight_cts=tuple(
            ciphertext_from_bytes(pk, bytes.fromhex(w)) for w in doc["weights"]
        ),
        default_items=tuple(doc["default_items"]),
        anon_dims=tuple(doc["anon_dims"]),
        table_records=table["records"],
        table_buckets=table["buckets"],
        outer=_hash_from_pair(table["outer"], table["buckets"]),
        inner=_hash_from_pair(table["inner"], table["buckets"]),
        table_prefix=bytes.fromhex(table["prefix"]),
        fingerprint_bits=table["fp_bits"],
        fingerprint_mode=table["fp_mode"],
        fetch_dims=tuple(table["dims"]),
        n_chunks=table["n_chunks"],
        capacity=table["capacity"],
        approx=approx,
    )


def _check_stage(stage: int) -> None:
    if stage not in _STAGES:
        raise ValueError(f"unknown OT stage {stage}")


def query_batch_to_bytes(
    pk: PublicKey, stage: int, queries: Sequence[ot.OtQuery]
) -> bytes:
    _check_stage(stage)
    parts = [struct.pack(">BI", stage, len(queries))]
    for q in queries:
        blob = ot.query_to_bytes(pk, q)
        parts.append(struct.pack(">I", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def query_batch_from_bytes(pk: PublicKey, data: bytes) -> tuple[int, list[ot.OtQuery]]:
    stage, count = struct.unpack_from(">BI", data, 0)
    _check_stage(stage)
    off = 5
    queries = []
    for _ in range(count):
        (size,) = struct.unpack_from(">I", data, off)
        off += 4
        queries.append(ot.query_from_bytes(pk, data[off : off + size]))
        off += size
    if off != len(data):
        raise ValueError("trailing bytes after query batch")
    return stage, queries


def reply_batch_to_bytes(
    pk: PublicKey, stage: int, replies: Sequence[ot.OtReply]
) -> bytes:
    _check_stage(stage)
    parts = [struct.pack(">BI", stage, len(replies))]
    for r in replies:
        blob = ot.reply_to_bytes(pk, r)
        parts.append(struct.pack(">I", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def reply_batch_from_bytes(pk: PublicKey, data: bytes) -> tuple[int, list[ot.OtReply]]:
    stage, count = struct.unpack_from(">BI", data, 0)
    _check_stage(stage)
    off = 5
    replies = []
    for _ in range(count):
        (size,) = struct.unpack_from(">I", data, off)
        off += 4
        replies.append(ot.reply_from_bytes(pk, data[off : off + size]))
        off += size
    if off != len(data):
        raise ValueError("trailing bytes after reply batch")
    return stage, replies


@dataclass(frozen=True)
class SortRequest:
    """One comparison round: independent threshold pairs (left >= right?)
    plus one value list for the network sort.  All ciphertexts are under
    the server key and already randomized by the client."""

    pairs: tuple[tuple[Ciphertext, Ciphertext], ...]
    values: tuple[Ciphertext, ...]


@dataclass(frozen=True)
class SortResponse:
    """pair_bits[i]: pairs[i] holds left >= right.  outcomes: comparator
    keep-bits in network order.  adjacent_equal: sorted neighbors equal."""

    pair_bits: tuple[bool, ...]
    outcomes: tuple[bool, ...]
    adjacent_equal: tuple[bool, ...]


def sort_request_to_bytes(pk: PublicKey, req: SortRequest) -> bytes:
    parts = [struct.pack(">II", len(req.pairs), len(req.values))]
    flat = [ct for pair in req.pairs for ct in pair]
    flat.extend(req.values)
    for ct in flat:
        blob = ciphertext_to_bytes(pk, ct)
        parts.append(struct.pack(">I", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def sort_request_from_bytes(pk: PublicKey, data: bytes) -> SortRequest:
    n_pairs, n_values = struct.unpack_from(">II", data, 0)
    off = 8
    cts = []
    for _ in range(2 * n_pairs + n_values):
        (size,) = struct.unpack_from(">I", data, off)
        off += 4
        cts.append(ciphertext_from_bytes(pk, data[off : off + size]))
        off += size
    if off != len(data):
        raise ValueError("trailing bytes after sort request")
    pairs = tuple((cts[2 * i], cts[2 * i + 1]) for i in range(n_pairs))
    return SortRequest(pairs, tuple(cts[2 * n_pairs :]))


def sort_response_to_bytes(resp: SortResponse) -> bytes:
    head = struct.pack(
        ">III", len(resp.pair_bits), len(resp.outcomes), len(resp.adjacent_equal)
    )
    return (
        head
        + pack_bits(resp.pair_bits)
        + pack_bits(resp.outcomes)
        + pack_bits(resp.adjacent_equal)
    )


def sort_response_from_bytes(data: bytes) -> SortResponse:
    n_pairs, n_out, n_eq = struct.unpack_from(">III", data, 0)
    off = 12
    sizes = [(n_pairs + 7) // 8, (n_out + 7) // 8, (n_eq + 7) // 8]
    if len(data) != off + sum(sizes):
        raise ValueError("sort response length mismatch")
    pair_bits = unpack_bits(data[off : off + sizes[0]], n_pairs)
    off += sizes[0]
    outcomes = unpack_bits(data[off : off + sizes[1]], n_out)
    off += sizes[1]
    adjacent = unpack_bits(data[off : off + sizes[2]], n_eq)
    return SortResponse(pair_bits, outcomes, adjacent)
