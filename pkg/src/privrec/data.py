"""Rule-file I/O and synthetic database generation.

The on-disk format is the common mined-rule text layout: antecedent item
ids, a `==>` separator, consequent item ids, then `#SUP:` and optionally
`#CONF:` annotations.  Confidences are quantized to integer weights.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rules import AssociationRule, ItemSet, RuleDatabase, itemset

# Confidence values are scaled by this factor and rounded to give integer
# rule weights.
WEIGHT_SCALE = 10_000


@dataclass
class LoadReport:
    """What happened while parsing a rule file."""

    lines: int = 0
    parsed: int = 0
    skipped: int = 0
    merged_duplicates: int = 0


def _parse_line(line: str, scale: int) -> Optional[tuple[ItemSet, ItemSet, int]]:
    if "==>" not in line:
        return None
    lhs, rhs = line.split("==>", 1)
    antecedent = itemset(int(tok) for tok in lhs.split())

    sup = None
    conf = None
    if "#SUP:" in rhs:
        rhs, _, tail = rhs.partition("#SUP:")
        tail = tail.strip()
        if "#CONF:" in tail:
            sup_part, _, conf_part = tail.partition("#CONF:")
            sup = int(sup_part.strip().split()[0])
            conf = float(conf_part.strip().split()[0])
        else:
            sup = int(tail.split()[0])
    consequent = itemset(int(tok) for tok in rhs.split())

    if conf is not None:
        weight = round(conf * scale)
    elif sup is not None:
        weight = sup
    else:
        weight = 0
    return antecedent, consequent, weight


def load_rules(
    path: str,
    *,
    scale: int = WEIGHT_SCALE,
    universe_size: Optional[int] = None,
    default_list_size: int = 3,
    strict: bool = True,
    report: Optional[LoadReport] = None,
) -> RuleDatabase:
    """Load a rule file into a database.

    Rules sharing an antecedent are merged: the merged rule keeps the
    maximum weight and the union of the consequents.  A malformed line
    raises ValueError naming the line number; pass strict=False to skip
    and count such lines instead.
    """
    rep = report if report is not None else LoadReport()
    merged: dict[ItemSet, tuple[set[int], int]] = {}
    order: list[ItemSet] = []
    for lineno, raw in enumerate(open(path, "r", encoding="utf-8"), start=1):
        line = raw.strip()
        if not line:
            continue
        rep.lines += 1
        try:
            parsed = _parse_line(line, scale)
            if parsed is not None:
                antecedent, consequent, weight = parsed
                if not antecedent or set(antecedent) & set(consequent):
                    parsed = None
        except (ValueError, IndexError):
            parsed = None
        if parsed is None:
            if strict:
                raise ValueError(f"line {lineno}: malformed rule: {line!r}")
            rep.skipped += 1
            continue
        rep.parsed += 1
        if antecedent in merged:
            cons, w = merged[antecedent]
            cons.update(consequent)
            merged[antecedent] = (cons, max(w, weight))
            rep.merged_duplicates += 1
        else:
            merged[antecedent] = (set(consequent), weight)
            order.append(antecedent)

    rules = []
    for pos, ant in enumerate(order):
        cons, weight = merged[ant]
        rules.append(
            AssociationRule(
                id=pos + 1,
                antecedent=ant,
                consequent=itemset(cons - set(ant)),
                weight=weight,
            )
        )
    if universe_size is None:
        universe_size = 1
        for r in rules:
            top = max(r.antecedent[-1], r.consequent[-1] if r.consequent else 1)
            universe_size = max(universe_size, top)
    return RuleDatabase(
        rules=rules,
        universe_size=universe_size,
        global_frequent_items=_frequent_items(rules, default_list_size),
    )


def _frequent_items(rules: list[AssociationRule], n: int) -> ItemSet:
    """Top n items by rule occurrence, smaller id on ties."""
    counts: collections.Counter[int] = collections.Counter()
    for r in rules:
        counts.update(r.antecedent)
        counts.update(r.consequent)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return itemset(item for item, _ in ranked[:n])


def save_rules(db: RuleDatabase, path: str, *, scale: int = WEIGHT_SCALE) -> None:
    """Write a database back out in the text rule format."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in db.rules:
            lhs = " ".join(str(i) for i in r.antecedent)
            rhs = " ".join(str(i) for i in r.consequent)
            conf = r.weight / scale
            fh.write(f"{lhs} ==> {rhs} #SUP: {r.weight} #CONF: {conf:.6f}\n")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for random rule generation.

    `item_dist` selects how antecedent items are drawn:

    - ("zipf", s): Zipf-like with exponent s over the whole universe,
      sampled by inverse CDF (works for any s > 0, including s <= 1 where
      the textbook rejection sampler does not apply to finite universes).
    - ("uniform", pool): uniform over the first `pool` item ids.  Useful
      for producing the strongly clustered antecedents typical of rules
      mined from real baskets.

    Antecedents are made pairwise distinct; when a length class is
    exhausted by redraws the generator widens the draw by one item, so
    very large databases over small universes stay feasible.
    """

    n_rules: int
    universe_size: int = 10_000
    antecedent_lengths: tuple[int, int] = (1, 5)
    consequent_lengths: tuple[int, int] = (1, 3)
    item_dist: tuple = ("zipf", 1.0)
    weight_range: tuple[int, int] = (1, WEIGHT_SCALE)
    seed: int = 0
    default_list_size: int = 3

    def __post_init__(self):
        if self.n_rules < 0:
            raise ValueError("n_rules must be >= 0")
        lo, hi = self.antecedent_lengths
        if not (1 <= lo <= hi <= self.universe_size):
            raise ValueError("bad antecedent length range")
        kind = self.item_dist[0]
        if kind not in ("zipf", "uniform"):
            raise ValueError(f"unknown item distribution {kind!r}")
        if kind == "uniform" and not (1 <= self.item_dist[1] <= self.universe_size):
            raise ValueError("uniform pool outside universe")


class _Buffered:
    """Vectorized draws consumed a few at a time; refills in large blocks
    so million-rule generation is not dominated by RNG call overhead."""

    def __init__(self, draw, block: int = 1 << 19):
        self._draw = draw
        self._block = block
        self._buf = draw(block)
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        if self._pos + k > len(self._buf):
            self._buf = self._draw(max(self._block, k))
            self._pos = 0
        out = self._buf[self._pos : self._pos + k]
        self._pos += k
        return out


def _item_sampler(spec: SyntheticSpec, rng: np.random.Generator) -> _Buffered:
    kind = spec.item_dist[0]
    if kind == "uniform":
        pool = int(spec.item_dist[1])
        return _Buffered(lambda count: rng.integers(1, pool + 1, size=count))
    s = float(spec.item_dist[1])
    weights = 1.0 / np.arange(1, spec.universe_size + 1, dtype=np.float64) ** s
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return _Buffered(lambda count: np.searchsorted(cdf, rng.random(count)) + 1)


def gen_synthetic(spec: SyntheticSpec) -> RuleDatabase:
    """Generate a random database with distinct antecedents."""
    rng = np.random.default_rng(spec.seed)
    draw = _item_sampler(spec, rng)
    lo, hi = spec.antecedent_lengths
    clo, chi = spec.consequent_lengths
    wlo, whi = spec.weight_range
    lengths = _Buffered(lambda c: rng.integers(lo, hi + 1, size=c))
    cons_lengths = _Buffered(lambda c: rng.integers(clo, chi + 1, size=c))
    cons_items = _Buffered(lambda c: rng.integers(1, spec.universe_size + 1, size=c))
    weights = _Buffered(lambda c: rng.integers(wlo, whi + 1, size=c))

    seen: set[ItemSet] = set()
    rules: list[AssociationRule] = []
    rule_id = 1
    while len(rules) < spec.n_rules:
        want = int(lengths.take(1)[0])
        antecedent = _draw_distinct(draw, want, spec.universe_size, rng, seen)
        seen.add(antecedent)

        n_cons = int(cons_lengths.take(1)[0])
        cons: set[int] = set()
        guard = 0
        while len(cons) < n_cons and guard < 200:
            item = int(cons_items.take(1)[0])
            if item not in antecedent:
                cons.add(item)
            guard += 1
        rules.append(
            AssociationRule(
                id=rule_id,
                antecedent=antecedent,
                consequent=itemset(cons),
                weight=int(weights.take(1)[0]),
            )
        )
        rule_id += 1

    return RuleDatabase(
        rules=rules,
        universe_size=spec.universe_size,
        global_frequent_items=_frequent_items(rules, spec.default_list_size),
    )


def _draw_distinct(
    draw: _Buffered, want: int, universe: int, rng, seen: set[ItemSet]
) -> ItemSet:
    # Redraw on duplicate antecedents; widen by one item when a length
    # class is being exhausted (32 straight collisions).
    length = want
    while True:
        for _ in range(32):
            batch = draw.take(length * 3 + 8)
            items: list[int] = []
            for it in batch:
                it = int(it)
                if it not in items:
                    items.append(it)
                    if len(items) == length:
                        break
            if len(items) < length:
                # distribution too concentrated for this length; top up
                # uniformly so the draw always terminates
                extra = rng.permutation(universe)[: length * 2] + 0
                for it in extra:
                    it = int(it)
                    if it not in items:
                        items.append(it)
                        if len(items) == length:
                            break
            candidate = itemset(items)
            if candidate not in seen:
                return candidate
        if length >= universe:
            raise ValueError("antecedent space exhausted")
        length += 1


def gen_transactions(
    n: int, length: int, universe_size: int, seed: int = 0
) -> list[ItemSet]:
    """Uniform random transactions of a fixed length."""
    if length > universe_size:
        raise ValueError("transaction longer than universe")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        picks = rng.choice(universe_size, size=length, replace=False) + 1
        out.append(itemset(int(i) for i in picks))
    return out
