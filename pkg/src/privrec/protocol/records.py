"""Slot payloads for the privately fetchable tables.

A fetched payload crosses the oblivious-transfer boundary as fixed-width
integer blocks.  Each block carries one chunk of the payload: a 0x01
guard byte followed by up to `capacity` payload bytes.  The guard keeps
leading zero bytes alive through the integer round trip and reserves the
integer 0 for the empty slot.  All chunks of one payload sit at the same
virtual index of parallel chunk tables, so one query serves every chunk.

Stored item ids are anonymized before they enter any payload; plaintext
ids exist only inside the server.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

from .. import exact, lsh
from ..crypto import ot
from ..crypto.paillier import PublicKey
from ..rules import RuleDatabase
from .anonymization import AnonymizationTables

# u32 rule id, u8 antecedent length, u8 consequent length
_EXACT_HEAD = struct.Struct(">IBB")
# u32 rule id, u8 antecedent length (bucket entries add lengths inline)
_ID_WIDTH = 4

DEFAULT_PREFIX_BITS = 64


def chunk_capacity(pk: PublicKey) -> int:
    """Payload bytes per OT block under `pk`, after the guard byte."""
    return ot.max_block_bits(pk) // 8 - 1


def payload_to_blocks(payload: bytes, capacity: int, n_chunks: int) -> list[int]:
    """Split a payload into guard-prefixed integer blocks, zero-padded to
    the fixed chunk count."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    if not payload:
        raise ValueError("payload must be non-empty")
    if len(payload) > capacity * n_chunks:
        raise ValueError("payload exceeds the chunk budget")
    blocks = [
        int.from_bytes(b"\x01" + payload[start : start + capacity], "big")
        for start in range(0, len(payload), capacity)
    ]
    blocks.extend(0 for _ in range(n_chunks - len(blocks)))
    return blocks


def blocks_to_payload(blocks: Sequence[int]) -> Optional[bytes]:
    """Reassemble chunk blocks; None for the all-zero (absent) case or a
    malformed chunk run.  Fingerprint checks catch deeper corruption."""
    out = bytearray()
    ended = False
    for blk in blocks:
        if blk == 0:
            ended = True
            continue
        if ended:
            return None
        raw = int(blk).to_bytes((int(blk).bit_length() + 7) // 8, "big")
        if raw[0] != 0x01:
            return None
        out += raw[1:]
    return bytes(out) if out else None


@dataclass(frozen=True)
class PrivateRecord:
    """Facts a fetch reveals about one rule, in anonymized id space.

    Weights never appear here; the client pairs `rule_id` with the
    published server-key weight ciphertext list instead.
    """

    rule_id: int
    antecedent_len: int
    consequent: tuple[int, ...]


@dataclass(frozen=True)
class BucketRule:
    """One rule inside a shared-signature bucket record.  The anonymized
    antecedent is included so the client can verify applicability."""

    rule_id: int
    antecedent: tuple[int, ...]
    consequent: tuple[int, ...]


def encode_exact_payload(
    fingerprint: int, fp_bytes: int, rule_id: int, ant_len: int, consequent: Sequence[int]
) -> bytes:
    head = fingerprint.to_bytes(fp_bytes, "big")
    head += _EXACT_HEAD.pack(rule_id, ant_len, len(consequent))
    return head + b"".join(struct.pack(">I", c) for c in consequent)


def decode_exact_payload(
    payload: bytes, fp_bytes: int
) -> Optional[tuple[int, PrivateRecord]]:
    """(fingerprint, record) or None when the bytes cannot be a record."""
    if len(payload) < fp_bytes + _EXACT_HEAD.size:
        return None
    fingerprint = int.from_bytes(payload[:fp_bytes], "big")
    rule_id, ant_len, n_cons = _EXACT_HEAD.unpack_from(payload, fp_bytes)
    off = fp_bytes + _EXACT_HEAD.size
    if len(payload) != off + _ID_WIDTH * n_cons:
        return None
    consequent = struct.unpack_from(f">{n_cons}I", payload, off) if n_cons else ()
    return fingerprint, PrivateRecord(rule_id, ant_len, tuple(consequent))


def encode_bucket_payload(
    fingerprint: int, fp_bytes: int, rules: Sequence[BucketRule]
) -> bytes:
    if len(rules) > 255:
        raise ValueError("at most 255 rules per bucket record")
    parts = [fingerprint.to_bytes(fp_bytes, "big"), struct.pack(">B", len(rules))]
    for r in rules:
        parts.append(struct.pack(">IB", r.rule_id, len(r.antecedent)))
        parts.append(b"".join(struct.pack(">I", a) for a in r.antecedent))
        parts.append(struct.pack(">B", len(r.consequent)))
        parts.append(b"".join(struct.pack(">I", c) for c in r.consequent))
    return b"".join(parts)


def decode_bucket_payload(
    payload: bytes, fp_bytes: int
) -> Optional[tuple[int, list[BucketRule]]]:
    if len(payload) < fp_bytes + 1:
        return None
    fingerprint = int.from_bytes(payload[:fp_bytes], "big")
    off = fp_bytes
    count = payload[off]
    off += 1
    rules = []
    try:
        for _ in range(count):
            rule_id, n_ant = struct.unpack_from(">IB", payload, off)
            off += 5
            ant = struct.unpack_from(f">{n_ant}I", payload, off) if n_ant else ()
            off += _ID_WIDTH * n_ant
            (n_cons,) = struct.unpack_from(">B", payload, off)
            off += 1
            cons = struct.unpack_from(f">{n_cons}I", payload, off) if n_cons else ()
            off += _ID_WIDTH * n_cons
            rules.append(BucketRule(rule_id, tuple(ant), tuple(cons)))
    except struct.error:
        return None
    if off != len(payload):
        return None
    return fingerprint, rules


def anonymized_itemset(
    items: Sequence[int], tables: AnonymizationTables
) -> Optional[tuple[int, ...]]:
    """Images of the members ascending, or None when any member is
    infrequent (such a key can never be produced by an anonymized
    client transaction)."""
    out = []
    for i in items:
        p = tables.forward[i]
        if not p:
            return None
        out.append(p)
    return tuple(sorted(out))


def build_private_table(
    db: RuleDatabase,
    tables: AnonymizationTables,
    config: exact.TableConfig = exact.TableConfig(),
) -> exact.TwoLevelTable:
    """Exact-fetch table keyed by anonymized antecedents.

    Rules with an infrequent antecedent member are dropped (no anonymized
    transaction can reach them); infrequent consequent members are
    trimmed because the reverse table cannot translate them back.
    """
    entries: dict[bytes, tuple[int, int, tuple[int, ...]]] = {}
    order: list[bytes] = []
    for rule in db.rules:
        ant = anonymized_itemset(rule.antecedent, tables)
        if ant is None:
            continue
        cons = tuple(
            sorted(p for p in (tables.forward[c] for c in rule.consequent) if p)
        )
        key = exact.encode_itemset(ant)
        entries[key] = (rule.id, len(ant), cons)
        order.append(key)

    scheme = config.scheme
    fp_bytes = config.fingerprint_bits // 8

    def payload(raw: bytes, prefix: bytes) -> bytes:
        rule_id, ant_len, cons = entries[raw]
        return encode_exact_payload(scheme(prefix + raw), fp_bytes, rule_id, ant_len, cons)

    return exact.prep_keyed(order, payload, config)


def chunks_needed(table: exact.TwoLevelTable, capacity: int) -> int:
    """Fixed chunk count covering the widest stored payload."""
    if not table.slots:
        return 1
    widest = max(len(p) for p in table.slots.values())
    return max(1, (widest + capacity - 1) // capacity)


def chunk_tables(
    table: exact.TwoLevelTable, capacity: int, n_chunks: int
) -> list[dict[int, int]]:
    """Sparse per-chunk block tables sharing the table's virtual index."""
    out: list[dict[int, int]] = [{} for _ in range(n_chunks)]
    for idx, payload in table.slots.items():
        for c, blk in enumerate(payload_to_blocks(payload, capacity, n_chunks)):
            if blk:
                out[c][idx] = blk
    return out


@dataclass(frozen=True)
class EnhancedDb:
    """Signature-keyed table for the approximate path.

    One record per occupied bucket of each signature map; keys are the
    map's random prefix followed by the packed signature.  Rules sharing
    a bucket merge into one multi-rule record, capped by the chunk
    budget (lowest rule ids kept).
    """

    table: exact.TwoLevelTable
    prefixes: tuple[bytes, ...]
    params: lsh.LshParams
    merged_duplicates: int
    dropped_overflow: int

    @property
    def n_maps(self) -> int:
        return len(self.prefixes)


def signature_map_order(params: lsh.LshParams):
    """Canonical (level, repetition) enumeration shared by build and query."""
    for m in range(params.n_levels):
        for rep in range(params.reps[m]):
            yield m, rep


def build_enhanced_db(
    db: RuleDatabase,
    tables: AnonymizationTables,
    index: lsh.LshIndex,
    *,
    prefix_bits: int = DEFAULT_PREFIX_BITS,
    config: exact.TableConfig = exact.TableConfig(),
    capacity: int,
    n_chunks: int,
    seed: Optional[int] = None,
) -> EnhancedDb:
    """Merge every signature map's buckets into one keyed table.

    `index` must be built over the same anonymized antecedents the
    matching `build_private_table` call would produce.
    """
    if prefix_bits < 64 or prefix_bits % 8:
        raise ValueError("prefix width must be >= 64 bits, whole bytes")
    import random as _random

    rng = _random.Random(seed)
    params = index.params
    n_maps = sum(params.reps)
    prefixes = tuple(rng.randbytes(prefix_bits // 8) for _ in range(n_maps))

    rules_by_id = {r.id: r for r in db.rules}
    anon_ant: dict[int, tuple[int, ...]] = {}
    anon_cons: dict[int, tuple[int, ...]] = {}
    for rid in index.rule_ids:
        rule = rules_by_id[rid]
        ant = anonymized_itemset(rule.antecedent, tables)
        if ant is None:
            raise ValueError("index covers a rule with an infrequent antecedent member")
        anon_ant[rid] = ant
        anon_cons[rid] = tuple(
            sorted(p for p in (tables.forward[c] for c in rule.consequent) if p)
        )

    budget = capacity * n_chunks
    entries: dict[bytes, list[BucketRule]] = {}
    order: list[bytes] = []
    merged = 0
    dropped = 0
    for j, (m, rep) in enumerate(signature_map_order(params)):
        for packed, ids in index.buckets[m][rep].items():
            key = prefixes[j] + packed
            kept: list[BucketRule] = []
            used = config.fingerprint_bits // 8 + 1
            for rid in sorted(ids):
                r = BucketRule(rid, anon_ant[rid], anon_cons[rid])
                need = 5 + _ID_WIDTH * len(r.antecedent) + 1 + _ID_WIDTH * len(r.consequent)
                if used + need > budget or len(kept) == 255:
                    dropped += 1
                    continue
                kept.append(r)
                used += need
            merged += len(ids) - 1
            entries[key] = kept
            order.append(key)

    scheme = config.scheme
    fp_bytes = config.fingerprint_bits // 8

    def payload(raw: bytes, prefix: bytes) -> bytes:
        return encode_bucket_payload(scheme(prefix + raw), fp_bytes, entries[raw])

    table = exact.prep_keyed(order, payload, config)
    return EnhancedDb(table, prefixes, params, merged, dropped)


def enhanced_query_keys(
    anon_transaction: Sequence[int],
    params: lsh.LshParams,
    universe_size: int,
    prefixes: Sequence[bytes],
) -> list[bytes]:
    """The client's fetch keys: one per signature map, computed over the
    anonymized transaction's indicator vector."""
    bank = lsh.GaussianBank.generate(params, universe_size)
    v = lsh.transaction_vector(anon_transaction, universe_size)
    keys = []
    for j, (m, rep) in enumerate(signature_map_order(params)):
        sig = lsh.signature(bank, m, rep, v)
        keys.append(prefixes[j] + lsh.pack_signature(sig))
    return keys
