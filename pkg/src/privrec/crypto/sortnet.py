"""Data-oblivious sorting support.

A sorting network is a fixed list of compare-exchange positions, so one
party can run the comparisons on values it can read while the other
replays the swap decisions blind.  Batcher's odd-even mergesort gives
O(n log^2 n) comparators, is correct for every input length, and the
comparator list depends only on n, never on data.

Masking: before shipping ciphertext pairs out for comparison, each pair
is transformed to Enc(a*w + b) with a fresh shared (a, b), a >= 1; the
map is strictly monotone, so comparisons and ties survive while the
values themselves stay hidden.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, TypeVar

from .paillier import Ciphertext, PublicKey, Rng, _default_rng, add, encrypt, scalar_mul

T = TypeVar("T")

MASK_COEFF_BITS = 32


def comparison_pairs(n: int) -> list[tuple[int, int]]:
    """Batcher odd-even mergesort comparators for n positions.

    Pairs (i, j) with i < j, in execution order; a descending network
    keeps the larger value at i.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    pairs: list[tuple[int, int]] = []
    p = 1
    while p < n:
        k = p
        while k >= 1:
            for j in range(k % p, n - k, 2 * k):
                for i in range(min(k, n - j - k)):
                    if (i + j) // (2 * p) == (i + j + k) // (2 * p):
                        pairs.append((i + j, i + j + k))
            k //= 2
        p *= 2
    return pairs


@dataclass(frozen=True)
class SortRun:
    """Outcome bits of one network execution over readable values.

    outcomes[c] is True when comparator c found its pair already in
    descending order (no swap).  adjacent_equal[i] says whether the
    final positions i and i+1 hold equal values; affine masking
    preserves both, so these bits carry over to the unmasked data.
    """

    outcomes: tuple[bool, ...]
    adjacent_equal: tuple[bool, ...]


def run_network(values: Sequence[int]) -> SortRun:
    """Execute the descending network on plaintext values."""
    work = list(values)
    outcomes = []
    for i, j in comparison_pairs(len(work)):
        keep = work[i] >= work[j]
        if not keep:
            work[i], work[j] = work[j], work[i]
        outcomes.append(keep)
    adjacent = tuple(work[i] == work[i + 1] for i in range(len(work) - 1))
    return SortRun(tuple(outcomes), adjacent)


def apply_sort(items: Sequence[T], outcomes: Sequence[bool]) -> list[T]:
    """Replay recorded swap decisions onto items without reading them."""
    pairs = comparison_pairs(len(items))
    if len(outcomes) != len(pairs):
        raise ValueError("outcome count does not match the network size")
    out = list(items)
    for (i, j), keep in zip(pairs, outcomes):
        if not keep:
            out[i], out[j] = out[j], out[i]
    return out


def mask_pair(
    pk: PublicKey,
    c1: Ciphertext,
    c2: Ciphertext,
    a: int,
    b: int,
    *,
    rng: Optional[Rng] = None,
) -> tuple[Ciphertext, Ciphertext]:
    """(Enc(a*w1 + b), Enc(a*w2 + b)) under fresh randomizers."""
    if a < 1:
        raise ValueError("multiplier must be positive to preserve order")
    rng = rng or _default_rng()
    out = []
    for c in (c1, c2):
        out.append(add(pk, scalar_mul(pk, c, a), encrypt(pk, b, c.layer, rng=rng)))
    return (out[0], out[1])


def rand_pair(
    pk: PublicKey,
    c1: Ciphertext,
    c2: Ciphertext,
    *,
    rng: Optional[Rng] = None,
    value_bound: int = 1 << 64,
) -> tuple[Ciphertext, Ciphertext]:
    """Mask a ciphertext pair with random shared (a, b).

    value_bound is the caller's bound on the underlying plaintexts;
    draws that could push a*w + b out of the plaintext space are
    rejected, and an impossible bound raises.
    """
    rng = rng or _default_rng()
    limit = int(pk.n)
    if value_bound >= limit:
        raise ValueError("value bound exceeds the plaintext space")
    for _ in range(64):
        a = rng.randrange(1, 1 << MASK_COEFF_BITS)
        b = rng.getrandbits(MASK_COEFF_BITS)
        if a * value_bound + b < limit:
            return mask_pair(pk, c1, c2, a, b, rng=rng)
    raise ValueError("could not draw an in-range mask")
