"""Item-id anonymization tables and their plaintext reference path.

The server draws one random permutation over the full item universe and
keeps it; clients learn individual images only through oblivious lookups
into the forward table.  Items below the frequency threshold map to the
sentinel 0, so a lookup neither confirms nor denies that such an item
appears anywhere in the rule set.  The reverse table undoes the mapping
for the final recommendation ids.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

from ..rules import ItemSet, RuleDatabase

# Image reserved for items below the frequency threshold; also the content
# of row 0, so the sentinel row maps to itself.
INFREQUENT = 0


@dataclass(frozen=True)
class AnonymizationTables:
    """forward[i] is the anonymized id of item i, or 0 when i is
    infrequent; reverse inverts forward exactly on frequent items.

    Both tables have universe_size + 1 rows; row 0 holds 0.
    """

    forward: tuple[int, ...]
    reverse: tuple[int, ...]
    theta: int

    def __post_init__(self):
        if len(self.forward) != len(self.reverse) or len(self.forward) < 2:
            raise ValueError("tables must be equal-sized with at least one item row")
        if self.forward[0] != 0 or self.reverse[0] != 0:
            raise ValueError("sentinel row must hold 0")
        for i, p in enumerate(self.forward):
            if p and self.reverse[p] != i:
                raise ValueError("reverse table does not invert the forward table")

    @property
    def universe_size(self) -> int:
        return len(self.forward) - 1

    @property
    def frequent_items(self) -> tuple[int, ...]:
        return tuple(i for i in range(1, len(self.forward)) if self.forward[i])


def item_frequencies(db: RuleDatabase) -> dict[int, int]:
    """Number of rules mentioning each item, antecedent or consequent."""
    counts: dict[int, int] = {}
    for r in db.rules:
        for item in set(r.antecedent) | set(r.consequent):
            counts[item] = counts.get(item, 0) + 1
    return counts


def build_anonymization(
    universe_size: int,
    frequencies: Mapping[int, int],
    theta: int = 1,
    seed: Optional[int] = None,
) -> AnonymizationTables:
    """Draw the permutation and materialize both lookup tables.

    theta=1 (the default) marks items mentioned by no rule as infrequent;
    theta=0 keeps every item.  Deterministic for a fixed seed.
    """
    if universe_size < 1:
        raise ValueError("universe size must be >= 1")
    if theta < 0:
        raise ValueError("theta must be >= 0")
    rng = random.Random(seed)
    images = list(range(1, universe_size + 1))
    rng.shuffle(images)
    forward = [0] * (universe_size + 1)
    reverse = [0] * (universe_size + 1)
    for item in range(1, universe_size + 1):
        if frequencies.get(item, 0) >= theta:
            image = images[item - 1]
            forward[item] = image
            reverse[image] = item
    return AnonymizationTables(tuple(forward), tuple(reverse), theta)


def _check_range(items: Iterable[int], size: int) -> list[int]:
    out = list(items)
    if any(i < 1 or i > size for i in out):
        raise ValueError("item id outside universe")
    return out


def anonymize_plain(items: Iterable[int], tables: AnonymizationTables) -> ItemSet:
    """Reference non-private mapping: images of the frequent members,
    ascending; infrequent members are dropped."""
    out = {tables.forward[i] for i in _check_range(items, tables.universe_size)}
    out.discard(INFREQUENT)
    return tuple(sorted(out))


def de_anonymize_plain(pids: Iterable[int], tables: AnonymizationTables) -> ItemSet:
    """Reference inverse mapping; unassigned images are dropped."""
    out = {tables.reverse[p] for p in _check_range(pids, tables.universe_size)}
    out.discard(INFREQUENT)
    return tuple(sorted(out))
