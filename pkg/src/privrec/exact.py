"""Exact rule retrieval by two-level perfect hashing.

Antecedents are serialized to canonical key strings, reduced modulo a fixed
127-bit prime, and placed at a virtual index combining an outer bucket hash
with an inner, bucket-collision-free hash.  Lookups confirm membership with
a truncated-hash fingerprint stored in the record, so a slot hit for an
absent key is rejected rather than misread.
"""

from __future__ import annotations

import hashlib
import json
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from .rules import (
    AllAssoc,
    AnyAssoc,
    Criterion,
    ItemSet,
    OrderingFunction,
    RuleDatabase,
    Top1Assoc,
    _criterion_filters,
    ordering_value_raw,
)

# Fixed public modulus for key reduction: the Mersenne prime 2^127 - 1.
# Reducing the big-endian integer value of a key modulo this prime equals
# byte-wise Horner evaluation in base 256, so the reduction is one bigint
# operation instead of a per-byte loop.
KEY_PRIME = (1 << 127) - 1

# Outer table is this many buckets per stored record.
BUCKETS_PER_RECORD = 16

TABLE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class UniversalHash:
    """x -> ((a*x + b) mod prime) mod range_ with a in [1, prime)."""

    a: int
    b: int
    range_: int
    prime: int = KEY_PRIME

    def __post_init__(self):
        if not (1 <= self.a < self.prime and 0 <= self.b < self.prime):
            raise ValueError("hash coefficients out of range")
        if self.range_ < 1:
            raise ValueError("hash range must be >= 1")

    def __call__(self, x: int) -> int:
        return ((self.a * x + self.b) % self.prime) % self.range_


def encode_itemset(items: Iterable[int]) -> bytes:
    """Canonical key string: ascending ids joined by commas, empty -> b''."""
    return ",".join(str(i) for i in sorted(items)).encode("ascii")


def reduce_key(data: bytes) -> int:
    return int.from_bytes(data, "big") % KEY_PRIME


@dataclass(frozen=True)
class FingerprintScheme:
    """Truncated hash confirming key membership after a slot hit.

    `blake2b` is the default; `md5` mirrors older deployments and is kept
    only for compatibility, its collision weaknesses are irrelevant here
    because fingerprints defend against accidental slot reuse, not
    adversarial input.
    """

    bits: int = 64
    mode: str = "blake2b"

    def __post_init__(self):
        if self.bits < 64:
            raise ValueError("fingerprint width must be >= 64 bits")
        if self.bits % 8:
            raise ValueError("fingerprint width must be a whole number of bytes")
        if self.mode not in ("blake2b", "md5"):
            raise ValueError(f"unknown fingerprint mode {self.mode!r}")
        if self.mode == "md5" and self.bits > 128:
            raise ValueError("md5 fingerprints are at most 128 bits")

    def __call__(self, data: bytes) -> int:
        if self.mode == "md5":
            digest = hashlib.md5(data).digest()
        else:
            digest = hashlib.blake2b(data).digest()
        return int.from_bytes(digest[: self.bits // 8], "big")


@dataclass(frozen=True)
class TableConfig:
    fingerprint_bits: int = 64
    fingerprint_mode: str = "blake2b"
    prefix_len: int = 16  # bytes of random per-table key prefix
    seed: Optional[int] = None
    max_resamples: int = 64

    def __post_init__(self):
        if self.prefix_len < 16:
            raise ValueError("key prefix must be at least 16 bytes")
        scheme = FingerprintScheme(self.fingerprint_bits, self.fingerprint_mode)
        object.__setattr__(self, "_scheme", scheme)

    @property
    def scheme(self) -> FingerprintScheme:
        return self._scheme


@dataclass(frozen=True, slots=True)
class Record:
    """What a lookup returns for one stored antecedent."""

    rule_id: int
    antecedent_len: int
    weight: int
    consequent: ItemSet
    fingerprint: int


@dataclass
class BuildStats:
    outer_draws: int = 0
    inner_draws: int = 0
    squared_bucket_load: int = 0


_REC_HEAD = struct.Struct(">IBQH")  # rule id, antecedent len, weight, n consequents


def _encode_record(rec: Record, fp_bytes: int) -> bytes:
    head = rec.fingerprint.to_bytes(fp_bytes, "big") + _REC_HEAD.pack(
        rec.rule_id, rec.antecedent_len, rec.weight, len(rec.consequent)
    )
    return head + b"".join(struct.pack(">I", i) for i in rec.consequent)


def _decode_record(payload: bytes, fp_bytes: int) -> Record:
    fp = int.from_bytes(payload[:fp_bytes], "big")
    rule_id, ant_len, weight, n_cons = _REC_HEAD.unpack_from(payload, fp_bytes)
    off = fp_bytes + _REC_HEAD.size
    cons = tuple(
        struct.unpack_from(">I", payload, off + 4 * i)[0] for i in range(n_cons)
    )
    return Record(rule_id, ant_len, weight, cons, fp)


class TwoLevelTable:
    """Sparse two-level hash table over encoded antecedent keys.

    Only occupied virtual slots are stored; the virtual space has
    L² + L indices.  Payloads are kept pre-encoded so a million-record
    table stays compact.
    """

    def __init__(
        self,
        n_records: int,
        outer: UniversalHash,
        inner: UniversalHash,
        prefix: bytes,
        config: TableConfig,
        slots: dict[int, bytes],
        stats: BuildStats,
    ):
        self.n_records = n_records
        self.outer = outer
        self.inner = inner
        self.prefix = prefix
        self.config = config
        self.slots = slots
        self.stats = stats

    @property
    def bucket_count(self) -> int:
        return self.outer.range_

    @property
    def virtual_size(self) -> int:
        L = self.outer.range_
        return L * L + L

    def key_bytes(self, items: Iterable[int]) -> bytes:
        return self.prefix + encode_itemset(items)


def index_of(key: bytes, table: TwoLevelTable) -> int:
    """Virtual slot of an encoded (un-prefixed) key."""
    x = reduce_key(table.prefix + key)
    return table.outer.range_ * table.outer(x) + table.inner(x)


def _draw_hash(rng: random.Random, range_: int) -> UniversalHash:
    return UniversalHash(
        a=rng.randrange(1, KEY_PRIME), b=rng.randrange(0, KEY_PRIME), range_=range_
    )


def prep_keyed(
    raw_keys: list[bytes],
    payload_fn,
    config: TableConfig = TableConfig(),
) -> TwoLevelTable:
    """Build a table over arbitrary distinct byte keys.

    `payload_fn(key, prefix)` produces the slot payload once the session
    prefix is known; payloads typically embed a fingerprint of
    `prefix + key` so lookups can reject slot reuse by other keys.

    The outer hash is redrawn until the squared bucket loads sum to at
    most 4x the record count; the inner hash is redrawn until no two keys
    share a virtual slot.  Both succeed within a couple draws with high
    probability; `max_resamples` bounds the retry loops.
    """
    if len(set(raw_keys)) != len(raw_keys):
        raise ValueError("duplicate keys; merge entries before prep")

    rng = random.Random(config.seed)
    prefix = rng.randbytes(config.prefix_len)
    n = len(raw_keys)
    L = max(BUCKETS_PER_RECORD * n, 1)
    stats = BuildStats()

    keys = [reduce_key(prefix + raw) for raw in raw_keys]

    outer = None
    for _ in range(config.max_resamples):
        stats.outer_draws += 1
        cand = _draw_hash(rng, L)
        loads: dict[int, int] = {}
        for x in keys:
            h = cand(x)
            loads[h] = loads.get(h, 0) + 1
        squared = sum(b * b for b in loads.values())
        if squared <= 4 * n:
            outer = cand
            stats.squared_bucket_load = squared
            break
    if outer is None:
        raise RuntimeError("outer hash resampling exhausted")

    buckets = [outer(x) for x in keys]
    inner = None
    for _ in range(config.max_resamples):
        stats.inner_draws += 1
        cand = _draw_hash(rng, L)
        seen: set[int] = set()
        ok = True
        for x, b in zip(keys, buckets):
            slot = L * b + cand(x)
            if slot in seen:
                ok = False
                break
            seen.add(slot)
        if ok:
            inner = cand
            break
    if inner is None:
        # distinct keys colliding after modular reduction would loop forever
        if len(set(keys)) != len(keys):
            raise RuntimeError("key reduction collision (astronomically unlikely)")
        raise RuntimeError("inner hash resampling exhausted")

    slots: dict[int, bytes] = {}
    for raw, x, b in zip(raw_keys, keys, buckets):
        slots[L * b + inner(x)] = payload_fn(raw, prefix)

    return TwoLevelTable(n, outer, inner, prefix, config, slots, stats)


def prep(db: RuleDatabase, config: TableConfig = TableConfig()) -> TwoLevelTable:
    """Build the table for a database with distinct antecedents."""
    ants = [r.antecedent for r in db.rules]
    if len(set(ants)) != len(ants):
        raise ValueError("duplicate antecedents; merge rules before prep")

    by_key = {encode_itemset(r.antecedent): r for r in db.rules}
    scheme = config.scheme
    fp_bytes = config.fingerprint_bits // 8

    def payload(raw: bytes, prefix: bytes) -> bytes:
        rule = by_key[raw]
        rec = Record(
            rule_id=rule.id,
            antecedent_len=len(rule.antecedent),
            weight=rule.weight,
            consequent=rule.consequent,
            fingerprint=scheme(prefix + raw),
        )
        return _encode_record(rec, fp_bytes)

    return prep_keyed([encode_itemset(a) for a in ants], payload, config)


def fetch(antecedent: Iterable[int], table: TwoLevelTable) -> Optional[Record]:
    """Look up one antecedent; None when absent.

    Absence has two shapes: an empty slot, or an occupied slot whose
    fingerprint does not match (another key lives there).
    """
    key = encode_itemset(antecedent)
    payload = table.slots.get(index_of(key, table))
    if payload is None:
        return None
    fp_bytes = table.config.fingerprint_bits // 8
    rec = _decode_record(payload, fp_bytes)
    if rec.fingerprint != table.config.scheme(table.prefix + key):
        return None
    return rec


def subsets_up_to(transaction: ItemSet, max_len: int) -> Iterator[ItemSet]:
    """Non-empty subsets up to a size cap, smaller sizes first, each size
    in lexicographic order."""
    import itertools

    items = tuple(sorted(transaction))
    for size in range(1, min(max_len, len(items)) + 1):
        yield from itertools.combinations(items, size)


DEFAULT_TRANSACTION_CAP = 25


def exact_query(
    transaction: ItemSet,
    table: TwoLevelTable,
    criterion: Criterion,
    *,
    max_weight: int,
    universe_size: int,
    transaction_cap: int = DEFAULT_TRANSACTION_CAP,
) -> list[Record]:
    """Answer a criterion by fetching every admissible antecedent subset.

    Returns records in exactly the order the direct rule-scan path would
    produce (ranked criteria order by f descending with rule id breaking
    ties).  Subset enumeration is exponential in |transaction|, hence the
    hard cap.
    """
    transaction = tuple(sorted(set(transaction)))
    if len(transaction) > transaction_cap:
        raise ValueError(
            f"transaction of size {len(transaction)} exceeds cap {transaction_cap}"
        )
    min_w, max_len = _criterion_filters(criterion)
    limit = len(transaction) if max_len is None else max_len

    found: list[Record] = []
    for subset in subsets_up_to(transaction, limit):
        rec = fetch(subset, table)
        if rec is not None and rec.weight >= min_w:
            found.append(rec)

    if isinstance(criterion, AllAssoc):
        found.sort(key=lambda r: r.rule_id)
        return found
    if isinstance(criterion, AnyAssoc):
        found.sort(key=lambda r: r.rule_id)
        return found[: criterion.k]

    f: OrderingFunction = criterion.f
    found.sort(
        key=lambda r: (
            -ordering_value_raw(
                f,
                r.weight,
                r.antecedent_len,
                max_weight=max_weight,
                universe_size=universe_size,
            ),
            r.rule_id,
        )
    )
    k = 1 if isinstance(criterion, Top1Assoc) else criterion.k
    return found[:k]


# ---------------------------------------------------------------------------
# persistence


def save_table(table: TwoLevelTable, path: str) -> None:
    header = json.dumps(
        {
            "version": TABLE_FORMAT_VERSION,
            "n_records": table.n_records,
            "L": table.outer.range_,
            "outer": [table.outer.a, table.outer.b],
            "inner": [table.inner.a, table.inner.b],
            "prefix": table.prefix.hex(),
            "fingerprint_bits": table.config.fingerprint_bits,
            "fingerprint_mode": table.config.fingerprint_mode,
            "outer_draws": table.stats.outer_draws,
            "inner_draws": table.stats.inner_draws,
            "squared_bucket_load": table.stats.squared_bucket_load,
            "n_slots": len(table.slots),
        }
    ).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", len(header)))
        fh.write(header)
        for slot, payload in sorted(table.slots.items()):
            fh.write(struct.pack(">QI", slot, len(payload)))
            fh.write(payload)


def load_table(path: str) -> TwoLevelTable:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack(">I", fh.read(4))
        meta = json.loads(fh.read(hlen))
        if meta["version"] != TABLE_FORMAT_VERSION:
            raise ValueError(f"unsupported table format version {meta['version']}")
        L = meta["L"]
        config = TableConfig(
            fingerprint_bits=meta["fingerprint_bits"],
            fingerprint_mode=meta["fingerprint_mode"],
            prefix_len=max(16, len(meta["prefix"]) // 2),
        )
        slots: dict[int, bytes] = {}
        for _ in range(meta["n_slots"]):
            slot, plen = struct.unpack(">QI", fh.read(12))
            slots[slot] = fh.read(plen)
        stats = BuildStats(
            outer_draws=meta["outer_draws"],
            inner_draws=meta["inner_draws"],
            squared_bucket_load=meta["squared_bucket_load"],
        )
        return TwoLevelTable(
            n_records=meta["n_records"],
            outer=UniversalHash(meta["outer"][0], meta["outer"][1], L),
            inner=UniversalHash(meta["inner"][0], meta["inner"][1], L),
            prefix=bytes.fromhex(meta["prefix"]),
            config=config,
            slots=slots,
            stats=stats,
        )
