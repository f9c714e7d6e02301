"""Approximate best-rule retrieval by sign-random-projection hashing.

Antecedents are embedded as L1-scaled indicator vectors, lifted one
dimension so every stored point sits on the unit sphere, and bucketed by
the sign pattern of Gaussian projections.  Queries hash the raw binary
transaction vector: the lift adds a zero coordinate there, and signs are
scale-invariant, so no query-side normalization is needed.  A multi-level
schedule (wide signatures first) returns the first non-empty candidate
set; a sampling reduction answers top-k with N independently thinned
copies of the bucket tables.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .rules import (
    AssociationRule,
    ItemSet,
    OrderingFunction,
    RuleDatabase,
    Transaction,
    ordering_value,
)

DEFAULT_WIDTHS = (32, 16, 10)
DEFAULT_REPS = (32, 16, 8)

INDEX_FORMAT_VERSION = 1

# radicands below this are treated as exactly zero, so unit-norm inputs
# keep a zero lift coordinate despite rounding in ||x||^2
_RADICAND_FLOOR = 1e-12

_SIG_CHUNK = 256  # rules per vectorized signature batch


@dataclass(frozen=True)
class LshParams:
    """Hash schedule: level m uses signatures of widths[m] bits repeated
    reps[m] times.  Levels are scanned in order at query time, so earlier
    entries should be the most selective (widest)."""

    widths: tuple[int, ...] = DEFAULT_WIDTHS
    reps: tuple[int, ...] = DEFAULT_REPS
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != len(self.reps) or not self.widths:
            raise ValueError("widths and reps must be equal-length, non-empty")
        if any(k < 1 for k in self.widths) or any(l < 1 for l in self.reps):
            raise ValueError("signature widths and repetition counts must be >= 1")

    @property
    def n_levels(self) -> int:
        return len(self.widths)

    @property
    def max_width(self) -> int:
        return max(self.widths)


class GaussianBank:
    """Projection vectors for every (level, repetition, bit) triple.

    planes[m] has shape (reps[m], widths[m], d+1) where d is the universe
    size; the whole bank is a pure function of (params, universe_size).
    """

    def __init__(self, params: LshParams, universe_size: int, planes: list[np.ndarray]):
        self.params = params
        self.universe_size = universe_size
        self.planes = planes

    @classmethod
    def generate(cls, params: LshParams, universe_size: int) -> "GaussianBank":
        if universe_size < 1:
            raise ValueError("universe size must be >= 1")
        rng = np.random.default_rng(params.seed)
        planes = [
            rng.standard_normal((l, k, universe_size + 1))
            for k, l in zip(params.widths, params.reps)
        ]
        return cls(params, universe_size, planes)


def augment(x: Sequence[float]) -> np.ndarray:
    """Lift x to the unit sphere one dimension up: append sqrt(1 - ||x||^2)."""
    v = np.asarray(x, dtype=np.float64)
    norm_sq = float(v @ v)
    if norm_sq > (1.0 + 1e-9) ** 2:
        raise ValueError(f"input norm {math.sqrt(norm_sq):.12f} exceeds 1")
    radicand = 1.0 - norm_sq
    if radicand < _RADICAND_FLOOR:
        radicand = 0.0
    return np.append(v, math.sqrt(radicand))


def scaled_vector(items: ItemSet, universe_size: int) -> np.ndarray:
    """L1-scaled indicator of an antecedent: 1/|p| at each member item."""
    items = tuple(items)
    if not items:
        raise ValueError("empty itemset has no scaled vector")
    v = np.zeros(universe_size, dtype=np.float64)
    v[[i - 1 for i in items]] = 1.0 / len(items)
    return v


def transaction_vector(transaction: Transaction, universe_size: int) -> np.ndarray:
    """Binary transaction indicator with a zero lift coordinate appended."""
    v = np.zeros(universe_size + 1, dtype=np.float64)
    v[[i - 1 for i in set(transaction)]] = 1.0
    return v


def signature(bank: GaussianBank, m: int, l: int, v: Sequence[float]) -> str:
    """widths[m]-bit string; bit k is 1 iff <planes[m][l][k], v> >= 0."""
    dots = bank.planes[m][l] @ np.asarray(v, dtype=np.float64)
    return "".join("1" if d >= 0 else "0" for d in dots)


def pack_signature(sig: str) -> bytes:
    """Bucket key for a signature string: bits packed left-to-right,
    zero-padded on the right to whole bytes (the np.packbits layout)."""
    n_bytes = (len(sig) + 7) // 8
    return int(sig.ljust(n_bytes * 8, "0"), 2).to_bytes(n_bytes, "big") if sig else b""


def _check_items(items: Iterable[int], universe_size: int) -> list[int]:
    out = sorted(set(items))
    if out and (out[0] < 1 or out[-1] > universe_size):
        raise ValueError("item id outside universe")
    return out


def _stored_keys(bank: GaussianBank, antecedents: Sequence[ItemSet]) -> list[list[list[bytes]]]:
    """Packed bucket keys: result[m][pos][l] for stored antecedent pos."""
    d = bank.universe_size
    n = len(antecedents)
    out: list[list[Optional[list[bytes]]]] = [[None] * n for _ in bank.planes]

    by_len: dict[int, list[int]] = {}
    for pos, ant in enumerate(antecedents):
        if not ant:
            raise ValueError("antecedents must be non-empty")
        by_len.setdefault(len(ant), []).append(pos)

    for length, positions in by_len.items():
        lift = math.sqrt(max(0.0, 1.0 - 1.0 / length))
        for start in range(0, len(positions), _SIG_CHUNK):
            chunk = positions[start : start + _SIG_CHUNK]
            idx = np.array(
                [[i - 1 for i in sorted(antecedents[pos])] for pos in chunk],
                dtype=np.intp,
            )
            for m, G in enumerate(bank.planes):
                # (reps, width, chunk): sum over the member coordinates
                dots = G[:, :, idx].sum(axis=-1) / length + lift * G[:, :, d][:, :, None]
                packed = np.packbits(dots >= 0, axis=1)  # (reps, n_bytes, chunk)
                for j, pos in enumerate(chunk):
                    out[m][pos] = [packed[l, :, j].tobytes() for l in range(G.shape[0])]
    return out  # type: ignore[return-value]


class LshIndex:
    """Immutable bucket tables over a shared Gaussian bank.

    buckets[m][l] maps a packed signature to the rule ids stored under it;
    every id in rule_ids appears exactly once per (m, l) table.
    """

    def __init__(
        self,
        bank: GaussianBank,
        buckets: list[list[dict[bytes, list[int]]]],
        rule_ids: tuple[int, ...],
    ):
        self.bank = bank
        self.buckets = buckets
        self.rule_ids = rule_ids

    @property
    def params(self) -> LshParams:
        return self.bank.params

    @property
    def universe_size(self) -> int:
        return self.bank.universe_size


def _build_buckets(
    bank: GaussianBank,
    keys: list[list[list[bytes]]],
    positions: Sequence[int],
    ids: Sequence[int],
) -> list[list[dict[bytes, list[int]]]]:
    buckets: list[list[dict[bytes, list[int]]]] = []
    for m, reps in enumerate(bank.params.reps):
        level = [dict() for _ in range(reps)]
        for pos, rid in zip(positions, ids):
            per_rep = keys[m][pos]
            for l in range(reps):
                level[l].setdefault(per_rep[l], []).append(rid)
        buckets.append(level)
    return buckets


def prep(
    antecedents: Sequence[ItemSet],
    params: LshParams,
    universe_size: int,
    *,
    rule_ids: Optional[Sequence[int]] = None,
) -> LshIndex:
    """Index antecedents; ids default to positions 1..n."""
    for ant in antecedents:
        _check_items(ant, universe_size)
    if rule_ids is None:
        rule_ids = tuple(range(1, len(antecedents) + 1))
    bank = GaussianBank.generate(params, universe_size)
    keys = _stored_keys(bank, antecedents)
    buckets = _build_buckets(bank, keys, range(len(antecedents)), rule_ids)
    return LshIndex(bank, buckets, tuple(rule_ids))


def query_candidates(transaction: Transaction, index: LshIndex) -> set[int]:
    """Ids from the first level with any signature match.

    Within a level the repetition scan stops once more than 3x the level's
    repetition count have been collected, duplicates included.
    """
    items = _check_items(transaction, index.universe_size)
    idx = np.array([i - 1 for i in items], dtype=np.intp)
    bank = index.bank
    for m, G in enumerate(bank.planes):
        reps = G.shape[0]
        if idx.size:
            dots = G[:, :, idx].sum(axis=-1)  # query lift coordinate is 0
        else:
            dots = np.zeros(G.shape[:2])
        packed = np.packbits(dots >= 0, axis=-1)
        collected: list[int] = []
        for l in range(reps):
            collected.extend(index.buckets[m][l].get(packed[l].tobytes(), ()))
            if len(collected) > 3 * reps:
                break
        if collected:
            return set(collected)
    return set()


def query_top1(
    transaction: Transaction,
    index: LshIndex,
    db: RuleDatabase,
    f: OrderingFunction,
    *,
    default: Optional[AssociationRule] = None,
    verify: bool = True,
) -> Optional[AssociationRule]:
    """Best candidate by the ordering function, ties to the lower id.

    verify=True (the production setting) discards candidates whose
    antecedent is not contained in the transaction; verify=False scores
    raw bucket hits and exists to measure hashing accuracy in isolation.
    """
    tset = set(transaction)
    best: Optional[AssociationRule] = None
    best_val = -math.inf
    for rid in sorted(query_candidates(transaction, index)):
        rule = db.rule(rid)
        if verify and not set(rule.antecedent) <= tset:
            continue
        val = ordering_value(f, rule, max_weight=db.max_weight, universe_size=db.universe_size)
        if val > best_val:
            best, best_val = rule, val
    return best if best is not None else default


def topk_prep(
    db: RuleDatabase, k: int, params: LshParams, seed: Optional[int] = None
) -> list[LshIndex]:
    """N = ceil(k * ln|D|) indexes over Bernoulli(1/k) subsamples.

    Copies draw both their subsample and their Gaussian bank
    independently (bank seeds derive from params.seed), so a rule missed
    by one copy's hashing is retried with fresh projections in every
    other copy containing it.
    """
    n = len(db.rules)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 2:
        raise ValueError("sampling reduction needs at least 2 rules")
    n_copies = math.ceil(k * math.log(n))
    rng = np.random.default_rng(params.seed + 0x9E3779B9 if seed is None else seed)

    indexes = []
    for copy in range(n_copies):
        member = rng.random(n) < 1.0 / k
        sample = [db.rules[p] for p in np.flatnonzero(member)]
        copy_params = LshParams(params.widths, params.reps, seed=params.seed + 1 + copy)
        indexes.append(
            prep(
                [r.antecedent for r in sample],
                copy_params,
                db.universe_size,
                rule_ids=[r.id for r in sample],
            )
        )
    return indexes


def query_topk(
    transaction: Transaction,
    indexes: Sequence[LshIndex],
    db: RuleDatabase,
    f: OrderingFunction,
    k: int,
) -> list[AssociationRule]:
    """Union of per-copy winners, deduplicated, ranked by f, top k."""
    found: dict[int, AssociationRule] = {}
    for index in indexes:
        rule = query_top1(transaction, index, db, f)
        if rule is not None:
            found[rule.id] = rule
    ranked = sorted(
        found.values(),
        key=lambda r: (
            -ordering_value(f, r, max_weight=db.max_weight, universe_size=db.universe_size),
            r.id,
        ),
    )
    return ranked[:k]


# ---------------------------------------------------------------------------
# persistence


def save_index(index: LshIndex, path: str) -> None:
    header = json.dumps(
        {
            "version": INDEX_FORMAT_VERSION,
            "widths": list(index.params.widths),
            "reps": list(index.params.reps),
            "seed": index.params.seed,
            "universe_size": index.universe_size,
            "n_rules": len(index.rule_ids),
        }
    ).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", len(header)))
        fh.write(header)
        fh.write(b"".join(struct.pack(">I", rid) for rid in index.rule_ids))
        for level in index.buckets:
            for table in level:
                fh.write(struct.pack(">I", len(table)))
                for key, ids in sorted(table.items()):
                    fh.write(struct.pack(">B", len(key)))
                    fh.write(key)
                    fh.write(struct.pack(">I", len(ids)))
                    fh.write(b"".join(struct.pack(">I", rid) for rid in ids))


def load_index(path: str) -> LshIndex:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack(">I", fh.read(4))
        meta = json.loads(fh.read(hlen))
        if meta["version"] != INDEX_FORMAT_VERSION:
            raise ValueError(f"unsupported index format version {meta['version']}")
        params = LshParams(
            widths=tuple(meta["widths"]), reps=tuple(meta["reps"]), seed=meta["seed"]
        )
        n = meta["n_rules"]
        rule_ids = struct.unpack(f">{n}I", fh.read(4 * n)) if n else ()
        buckets: list[list[dict[bytes, list[int]]]] = []
        for reps in params.reps:
            level = []
            for _ in range(reps):
                (n_buckets,) = struct.unpack(">I", fh.read(4))
                table: dict[bytes, list[int]] = {}
                for _ in range(n_buckets):
                    (klen,) = struct.unpack(">B", fh.read(1))
                    key = fh.read(klen)
                    (cnt,) = struct.unpack(">I", fh.read(4))
                    table[key] = list(struct.unpack(f">{cnt}I", fh.read(4 * cnt)))
                level.append(table)
            buckets.append(level)
        bank = GaussianBank.generate(params, meta["universe_size"])
        return LshIndex(bank, buckets, tuple(rule_ids))
