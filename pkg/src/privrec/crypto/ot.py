"""1-of-n oblivious retrieval by homomorphic folding.

The index is written in mixed radix (n_1, ..., n_d) and the client sends
one encrypted unit vector per dimension.  The server folds the database
dimension by dimension: a fold raises each selector to the corresponding
block and multiplies, which homomorphically picks out one entry.

Two reply layouts:
  * layered: dimension j uses layer-j selectors, folds treat the previous
    dimension's ciphertexts as layer-j plaintexts, and the reply is one
    layer-d ciphertext (decrypted d times).  The reference layout.
  * split: every selector stays at layer 1; an intermediate ciphertext
    (a value mod n^2) is cut into its two base-n digits, each a valid
    layer-1 plaintext, so the reply is 2^(d-1) layer-1 ciphertexts.
    Much cheaper for d >= 2 because no operation ever leaves the
    mod-n^2 ring.

Blocks are non-negative integers; index positions that are absent or zero
contribute nothing to a fold (the all-zero block is the empty-slot
sentinel, rejected downstream by fingerprint checks).  Fixed (n, d,
block capacity) give transcripts of fixed shape regardless of the index.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

from gmpy2 import mpz

from .paillier import (
    Ciphertext,
    PublicKey,
    Rng,
    SecretKey,
    _default_rng,
    ciphertext_from_bytes,
    ciphertext_to_bytes,
    decrypt,
    encrypt,
    multiexp_mod,
    rerandomize,
)

LAYERED = "layered"
SPLIT = "split"

_N_PIECES = 2


def max_block_bits(pk: PublicKey) -> int:
    """Largest block width a layer-1 fold accepts (16 bits of headroom)."""
    return pk.bits - 16


def ot_dims(n: int, d: int) -> tuple[int, ...]:
    """Mixed-radix dimension sizes, all near n^(1/d), product >= n."""
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    base = int(round(n ** (1.0 / d)))
    while base**d < n:
        base += 1
    dims = [base] * d
    # shrink greedily while the product still covers n
    for j in range(d):
        while dims[j] > 1:
            dims[j] -= 1
            if math.prod(dims) < n:
                dims[j] += 1
                break
    return tuple(dims)


def plan_dims(n: int, occupied: Optional[int] = None) -> tuple[int, ...]:
    """Pick dimensions for a split-mode fetch over n virtual slots.

    Balanced dims are fine when the table is dense.  For a sparse table
    the middle fold dominates: it pays one full-width exponentiation per
    occupied slot unless many slots share a fold group, so a small last
    dimension (more slots per group, shared squarings) wins once n is
    large.  Query size grows as sum(dims); the planner weighs both.
    """
    if n <= 1500:
        return ot_dims(n, 1)
    if n <= 2_000_000:
        return ot_dims(n, 2)
    if occupied is None or occupied <= 0:
        return ot_dims(n, 3)

    def cost(side: int, last: int) -> float:
        # rough work in mod-n^2 multiplies, 1024-bit key, ~400-bit blocks
        groups = min(last, occupied)
        teams = occupied / 8 + groups  # Straus teams incl. ceil slack
        query = 85 * (2 * side + last)
        dim1 = 460 * occupied
        dim2 = 2 * (groups * 1024 + teams * 1024 + 32 * occupied)
        dim3 = 4 * ((groups / 8 + 2) * 1024 + 32 * groups)
        return query + dim1 + dim2 + dim3

    candidates = [ot_dims(n, 3)]
    for last in (32, 64, 128, 256):
        side = math.isqrt((n + last - 1) // last)
        while side * side * last < n:
            side += 1
        candidates.append((side, side, last))
    return min(candidates, key=lambda dims: cost(dims[0], dims[2]))


def _digits(i: int, dims: Sequence[int]) -> list[int]:
    out = []
    for size in dims:
        out.append(i % size)
        i //= size
    return out


@dataclass(frozen=True)
class OtQuery:
    n: int
    dims: tuple[int, ...]
    mode: str
    selectors: tuple[tuple[Ciphertext, ...], ...]  # one unit vector per dim


@dataclass(frozen=True)
class OtReply:
    d: int
    mode: str
    cts: tuple[Ciphertext, ...]  # 1 (layered) or 2^(d-1) (split)


def ot_query(
    i: int,
    n: int,
    d: int,
    pk: PublicKey,
    *,
    mode: str = SPLIT,
    dims: Optional[Sequence[int]] = None,
    rng: Optional[Rng] = None,
) -> OtQuery:
    """Encrypted mixed-radix unit vectors selecting index i.

    dims overrides the balanced ot_dims(n, d) split; both parties must
    use the same dims, so a custom plan travels in public parameters.
    """
    if not 0 <= i < n:
        raise ValueError(f"index {i} out of range for n={n}")
    if mode not in (LAYERED, SPLIT):
        raise ValueError(f"unknown OT mode {mode!r}")
    if dims is None:
        dims = ot_dims(n, d)
    else:
        dims = tuple(int(s) for s in dims)
        if len(dims) != d or any(s < 1 for s in dims) or math.prod(dims) < n:
            raise ValueError("dims must have length d and cover n")
    if mode == LAYERED and pk.max_layers < d:
        raise ValueError(f"layered d={d} needs a key with {d} layers")
    rng = rng or _default_rng()
    digits = _digits(i, dims)
    selectors = []
    for j, size in enumerate(dims):
        layer = j + 1 if mode == LAYERED else 1
        selectors.append(
            tuple(
                encrypt(pk, 1 if pos == digits[j] else 0, layer, rng=rng)
                for pos in range(size)
            )
        )
    return OtQuery(n, dims, mode, tuple(selectors))


def _split_pieces(value: int, n: int) -> tuple[int, int]:
    """Base-n digits of a mod-n^2 value; each is a layer-1 plaintext."""
    return (value % n, value // n)


def _fold(
    sel_values: Sequence[mpz],
    groups: Mapping[int, list[tuple[int, int]]],
    mod: mpz,
) -> dict[int, mpz]:
    """One dimension: per rest-index, multiply selected blocks together."""
    out: dict[int, mpz] = {}
    for rest, pairs in groups.items():
        out[rest] = multiexp_mod(
            [sel_values[digit] for digit, _ in pairs],
            [block for _, block in pairs],
            mod,
        )
    return out


def ot_reply(
    query: OtQuery,
    v: Union[Sequence[int], Mapping[int, int]],
    pk: PublicKey,
    *,
    rng: Optional[Rng] = None,
) -> OtReply:
    """Fold the database under the query's selectors.

    v is a dense sequence of length query.n or a sparse {index: block}
    mapping; omitted positions hold the zero block.
    """
    rng = rng or _default_rng()
    dims = query.dims
    d = len(dims)
    block_cap = max_block_bits(pk)
    plain_n = int(pk.n)

    if isinstance(v, Mapping):
        items = [(i, int(b)) for i, b in v.items() if b]
    else:
        if len(v) > query.n:
            raise ValueError("database larger than the query's n")
        items = [(i, int(b)) for i, b in enumerate(v) if b]
    for i, b in items:
        if not 0 <= i < query.n:
            raise ValueError("block index out of range")
        if b < 0 or b.bit_length() > block_cap:
            raise ValueError("block too large for the plaintext space")

    # dimension 1: group blocks by their remaining digits
    groups: dict[int, list[tuple[int, int]]] = {}
    for i, b in items:
        groups.setdefault(i // dims[0], []).append((i % dims[0], b))
    sel_values = [mpz(ct.value) for ct in query.selectors[0]]
    streams = [_fold(sel_values, groups, pk.ciphertext_modulus(1))]

    for j in range(1, d):
        size = dims[j]
        layer = j + 1 if query.mode == LAYERED else 1
        mod = pk.ciphertext_modulus(layer)
        sel_values = [mpz(ct.value) for ct in query.selectors[j]]
        next_streams: list[dict[int, mpz]] = []
        for stream in streams:
            if query.mode == LAYERED:
                pieces_of = [stream]
            else:
                pieces_of = [{}, {}]
                for rest, ct_value in stream.items():
                    for t, piece in enumerate(_split_pieces(int(ct_value), plain_n)):
                        if piece:
                            pieces_of[t][rest] = piece
            for piece_stream in pieces_of:
                grouped: dict[int, list[tuple[int, int]]] = {}
                for rest, value in piece_stream.items():
                    grouped.setdefault(rest // size, []).append((rest % size, int(value)))
                next_streams.append(_fold(sel_values, grouped, mod))
        streams = next_streams

    layer = d if query.mode == LAYERED else 1
    cts = tuple(
        rerandomize(pk, Ciphertext(int(stream.get(0, mpz(1))), layer), rng=rng)
        for stream in streams
    )
    return OtReply(d, query.mode, cts)


def ot_reply_many(
    query: OtQuery,
    tables: Sequence[Union[Sequence[int], Mapping[int, int]]],
    pk: PublicKey,
    *,
    rng: Optional[Rng] = None,
) -> list[OtReply]:
    """One reply per parallel table, all against the same query; used for
    records wider than one block (chunked into parallel tables)."""
    return [ot_reply(query, table, pk, rng=rng) for table in tables]


def ot_extract(reply: OtReply, sk: SecretKey, d: int) -> int:
    """Recover the selected block from a reply.

    Folds skip zero exponents, so a chain that never touched an occupied
    slot carries the integer 0 or 1 instead of a ciphertext; both stand
    for the all-zero block (1 is the blind encryption of 0).
    """
    if d != reply.d:
        raise ValueError("dimension mismatch")
    pk = sk.pk
    plain_n = int(pk.n)
    if reply.mode == LAYERED:
        if len(reply.cts) != 1:
            raise ValueError("layered reply must hold one ciphertext")
        value = int(reply.cts[0].value)
        for layer in range(d, 0, -1):
            if value <= 1:
                return 0
            value = decrypt(sk, Ciphertext(value, layer))
        return value
    if len(reply.cts) != _N_PIECES ** (d - 1):
        raise ValueError("split reply has the wrong ciphertext count")
    vals = [decrypt(sk, ct) for ct in reply.cts]
    while len(vals) > 1:
        combined = [
            vals[k] + vals[k + 1] * plain_n for k in range(0, len(vals), _N_PIECES)
        ]
        vals = [0 if c <= 1 else decrypt(sk, Ciphertext(c, 1)) for c in combined]
    return vals[0]


# ---------------------------------------------------------------------------
# wire codecs (fixed shape for fixed n, d, mode)


def query_to_bytes(pk: PublicKey, query: OtQuery) -> bytes:
    head = struct.pack(">QB", query.n, len(query.dims))
    head += struct.pack(">B", 1 if query.mode == LAYERED else 0)
    head += b"".join(struct.pack(">I", s) for s in query.dims)
    body = b"".join(
        ciphertext_to_bytes(pk, ct) for sel in query.selectors for ct in sel
    )
    return head + body


def query_from_bytes(pk: PublicKey, data: bytes) -> OtQuery:
    n, d = struct.unpack_from(">QB", data, 0)
    mode = LAYERED if data[9] else SPLIT
    dims = struct.unpack_from(f">{d}I", data, 10)
    off = 10 + 4 * d
    selectors = []
    for j, size in enumerate(dims):
        layer = j + 1 if mode == LAYERED else 1
        width = 2 + pk.ciphertext_bytes(layer)
        sel = []
        for _ in range(size):
            sel.append(ciphertext_from_bytes(pk, data[off : off + width]))
            off += width
        selectors.append(tuple(sel))
    if off != len(data):
        raise ValueError("trailing bytes in query")
    return OtQuery(n, tuple(dims), mode, tuple(selectors))


def reply_to_bytes(pk: PublicKey, reply: OtReply) -> bytes:
    head = struct.pack(">BBH", reply.d, 1 if reply.mode == LAYERED else 0, len(reply.cts))
    return head + b"".join(ciphertext_to_bytes(pk, ct) for ct in reply.cts)


def reply_from_bytes(pk: PublicKey, data: bytes) -> OtReply:
    d, layered, count = struct.unpack_from(">BBH", data, 0)
    mode = LAYERED if layered else SPLIT
    off = 4
    cts = []
    for _ in range(count):
        layer = int.from_bytes(data[off : off + 2], "big")
        width = 2 + pk.ciphertext_bytes(layer)
        cts.append(ciphertext_from_bytes(pk, data[off : off + width]))
        off += width
    if off != len(data):
        raise ValueError("trailing bytes in reply")
    return OtReply(d, mode, tuple(cts))
