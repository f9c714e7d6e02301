"""Association-rule recommendation core.

Rule model, applicability, selection criteria, ordering functions, subset
containment search, and collation of selected rules into a recommendation
list.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Union

# An itemset is canonical: strictly increasing tuple of positive item ids.
ItemSet = tuple[int, ...]

# A transaction is an itemset of the items a client currently holds.
Transaction = tuple[int, ...]

# (item id, accumulated weight) pairs, highest weight first.  Private-path
# results carry None weights because the client never learns them.
RecommendationList = list[tuple[int, Optional[int]]]


def itemset(items: Iterable[int]) -> ItemSet:
    """Normalize item ids into a canonical itemset.

    Duplicates are dropped, order is ascending.  Ids must be positive
    integers.
    """
    out = tuple(sorted(set(items)))
    for i in out:
        if not isinstance(i, int) or isinstance(i, bool) or i < 1:
            raise ValueError(f"item ids must be positive integers, got {i!r}")
    return out


@dataclass(frozen=True, slots=True)
class AssociationRule:
    """One rule: antecedent items imply consequent items, with a weight.

    Weights are non-negative integers (confidence-style scores are
    quantized upstream).  Antecedent and consequent are disjoint and the
    antecedent is never empty.  Slotted: million-rule databases are held
    in memory whole.
    """

    id: int
    antecedent: ItemSet
    consequent: ItemSet
    weight: int

    def __post_init__(self):
        object.__setattr__(self, "antecedent", itemset(self.antecedent))
        object.__setattr__(self, "consequent", itemset(self.consequent))
        if self.id < 1:
            raise ValueError(f"rule id must be >= 1, got {self.id}")
        if not self.antecedent:
            raise ValueError("antecedent must be non-empty")
        if set(self.antecedent) & set(self.consequent):
            raise ValueError("antecedent and consequent must be disjoint")
        if not isinstance(self.weight, int) or self.weight < 0:
            raise ValueError(f"weight must be a non-negative int, got {self.weight!r}")


@dataclass
class RuleDatabase:
    """A rule collection over a fixed item universe.

    Rule ids are contiguous starting at 1 (list position id-1).
    `global_frequent_items` backs the default recommendation returned when
    no rule qualifies.
    """

    rules: list[AssociationRule]
    universe_size: int
    global_frequent_items: ItemSet = ()

    def __post_init__(self):
        if self.universe_size < 1:
            raise ValueError("universe_size must be >= 1")
        for pos, rule in enumerate(self.rules):
            if rule.id != pos + 1:
                raise ValueError(
                    f"rule ids must be contiguous from 1; position {pos} has id {rule.id}"
                )
            last = rule.antecedent[-1]
            if rule.consequent:
                last = max(last, rule.consequent[-1])
            if last > self.universe_size:
                raise ValueError(
                    f"rule {rule.id} references item {last} outside universe "
                    f"of size {self.universe_size}"
                )
        self.global_frequent_items = itemset(self.global_frequent_items)
        if self.global_frequent_items and self.global_frequent_items[-1] > self.universe_size:
            raise ValueError("global_frequent_items outside universe")

    def __len__(self) -> int:
        return len(self.rules)

    def rule(self, rule_id: int) -> AssociationRule:
        return self.rules[rule_id - 1]

    @property
    def max_weight(self) -> int:
        return max((r.weight for r in self.rules), default=0)


def is_applicable(rule: AssociationRule, transaction: Iterable[int]) -> bool:
    """A rule applies to a transaction iff its antecedent is contained in it."""
    tset = transaction if isinstance(transaction, (set, frozenset)) else set(transaction)
    return all(i in tset for i in rule.antecedent)


class Ordering(enum.Enum):
    """Built-in rule ordering families."""

    WEIGHT_ONLY = "weight"
    LENGTH_ONLY = "length"
    LENGTH_THEN_WEIGHT = "length-weight"
    WEIGHT_THEN_LENGTH = "weight-length"


def _identity(x: int) -> int:
    return x


@dataclass(frozen=True)
class OrderingFunction:
    """Scores a rule for ranking; higher is better.

    The two hooks g1 (applied to weights) and g2 (applied to antecedent
    lengths) are monotone non-decreasing maps; both default to identity.
    The combined variants interleave the two so one dimension dominates:

    - LENGTH_THEN_WEIGHT: g1(w) + g1(w_max) * g2(len)  (length dominates,
      weight breaks ties within a length class; needs the database's
      maximum weight as context)
    - WEIGHT_THEN_LENGTH: g2(len) + g2(universe_size) * g1(w)  (weight
      dominates; needs the universe size as context)
    """

    variant: Ordering = Ordering.WEIGHT_ONLY
    g1: Callable[[int], int] = _identity
    g2: Callable[[int], int] = _identity


def ordering_value_raw(
    f: OrderingFunction,
    weight: int,
    length: int,
    *,
    max_weight: Optional[int] = None,
    universe_size: Optional[int] = None,
) -> int:
    """Evaluate an ordering function on bare (weight, antecedent length).

    Raises ValueError when the variant needs context that was not given.
    """
    if f.variant is Ordering.WEIGHT_ONLY:
        return f.g1(weight)
    if f.variant is Ordering.LENGTH_ONLY:
        return f.g2(length)
    if f.variant is Ordering.LENGTH_THEN_WEIGHT:
        if max_weight is None:
            raise ValueError("LENGTH_THEN_WEIGHT needs max_weight context")
        return f.g1(weight) + f.g1(max_weight) * f.g2(length)
    if f.variant is Ordering.WEIGHT_THEN_LENGTH:
        if universe_size is None:
            raise ValueError("WEIGHT_THEN_LENGTH needs universe_size context")
        return f.g2(length) + f.g2(universe_size) * f.g1(weight)
    raise ValueError(f"unknown ordering variant {f.variant!r}")


def ordering_value(
    f: OrderingFunction,
    rule: AssociationRule,
    *,
    max_weight: Optional[int] = None,
    universe_size: Optional[int] = None,
) -> int:
    """Evaluate an ordering function on one rule."""
    return ordering_value_raw(
        f,
        rule.weight,
        len(rule.antecedent),
        max_weight=max_weight,
        universe_size=universe_size,
    )


@dataclass(frozen=True)
class TopAssoc:
    """Up to k rules, weight >= min_weight, antecedent length <= max_length,
    ranked by an ordering function."""

    k: int
    min_weight: int
    max_length: int
    f: OrderingFunction


@dataclass(frozen=True)
class Top1Assoc:
    """The single best rule under an ordering function, no filters."""

    f: OrderingFunction


@dataclass(frozen=True)
class TopKAssoc:
    """The k best rules under an ordering function, no filters."""

    k: int
    f: OrderingFunction


@dataclass(frozen=True)
class AllAssoc:
    """Every applicable rule passing the weight/length filters."""

    min_weight: int
    max_length: int


@dataclass(frozen=True)
class AnyAssoc:
    """Any k applicable rules passing the filters.

    Deterministic tie-down: the k qualifying rules with the lowest ids.
    """

    k: int
    min_weight: int
    max_length: int


Criterion = Union[TopAssoc, Top1Assoc, TopKAssoc, AllAssoc, AnyAssoc]


def _criterion_filters(criterion: Criterion) -> tuple[int, Optional[int]]:
    """(min_weight, max_length or None for unbounded) for a criterion."""
    if isinstance(criterion, (TopAssoc, AllAssoc, AnyAssoc)):
        return criterion.min_weight, criterion.max_length
    return 0, None


def select_rules(
    db: RuleDatabase, transaction: Iterable[int], criterion: Criterion
) -> list[AssociationRule]:
    """Select the rules a criterion asks for, in its output order.

    Ranked criteria order by f descending with lower rule id breaking
    ties; AllAssoc returns qualifying rules in id order; AnyAssoc returns
    the k qualifying rules with the lowest ids.
    """
    tset = set(transaction)
    min_w, max_len = _criterion_filters(criterion)
    qualifying = [
        r
        for r in db.rules
        if r.weight >= min_w
        and (max_len is None or len(r.antecedent) <= max_len)
        and is_applicable(r, tset)
    ]

    if isinstance(criterion, AllAssoc):
        return qualifying
    if isinstance(criterion, AnyAssoc):
        return qualifying[: criterion.k]

    f = criterion.f
    w_max = db.max_weight
    qualifying.sort(
        key=lambda r: (
            -ordering_value(f, r, max_weight=w_max, universe_size=db.universe_size),
            r.id,
        )
    )
    k = 1 if isinstance(criterion, Top1Assoc) else criterion.k
    return qualifying[:k]


def lscs(db: RuleDatabase, transaction: Iterable[int]) -> Optional[AssociationRule]:
    """Largest contained antecedent: max overlap with the transaction among
    applicable rules, lower id on ties.  None when nothing applies."""
    tset = set(transaction)
    best = None
    best_key = None
    for r in db.rules:
        if not is_applicable(r, tset):
            continue
        # contained antecedent: overlap == antecedent length
        key = (-len(r.antecedent), r.id)
        if best_key is None or key < best_key:
            best, best_key = r, key
    return best


def gscs(
    db: RuleDatabase, transaction: Iterable[int], f: OrderingFunction
) -> Optional[AssociationRule]:
    """Generalized subset containment search.

    Maximizes f(rule) * |antecedent ∩ transaction| over applicable rules
    (the overlap equals the antecedent length once containment holds).
    Lower id wins ties; None when nothing applies.
    """
    tset = set(transaction)
    w_max = db.max_weight
    best = None
    best_key = None
    for r in db.rules:
        if not is_applicable(r, tset):
            continue
        score = ordering_value(
            f, r, max_weight=w_max, universe_size=db.universe_size
        ) * len(r.antecedent)
        key = (-score, r.id)
        if best_key is None or key < best_key:
            best, best_key = r, key
    return best


def collate_uncapacitated(rules: Iterable[AssociationRule]) -> ItemSet:
    """Union of the consequents of the selected rules."""
    out: set[int] = set()
    for r in rules:
        out.update(r.consequent)
    return tuple(sorted(out))


def collate_capacitated(
    rules: Iterable[AssociationRule], cap: int
) -> RecommendationList:
    """Top `cap` consequent items by accumulated rule weight.

    An item's accumulated weight is the sum of the weights of every
    selected rule recommending it.  Ordered by accumulated weight
    descending, smaller item id first on ties.
    """
    if cap < 0:
        raise ValueError("cap must be >= 0")
    acc: dict[int, int] = {}
    for r in rules:
        for item in r.consequent:
            acc[item] = acc.get(item, 0) + r.weight
    ranked = sorted(acc.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:cap]


def default_recommendation(db: RuleDatabase) -> RecommendationList:
    """The fallback list served when no rule qualifies.

    The configured globally-frequent items, each with a zero weight marker
    so callers can tell it apart from a scored result.
    """
    return [(item, 0) for item in db.global_frequent_items]


def recommendation_from_rules(
    rules: list[AssociationRule], db: RuleDatabase, cap: Optional[int] = None
) -> RecommendationList:
    """Collate selected rules into the final list, falling back to the
    default recommendation when the selection is empty."""
    if not rules:
        return default_recommendation(db)
    if cap is None:
        return [(item, None) for item in collate_uncapacitated(rules)]
    return collate_capacitated(rules, cap)
