"""Latency benchmarking and accuracy sweeps.

Four execution modes share one driver: the plain pipelines run in
process, the private ones run a real client/server session over an
in-process channel so the timings include every protocol message.
Timing rows land in a fixed CSV schema; the recommendation lists
produced along the way are kept on the row (not in the CSV) so runs can
be checked for determinism independently of the clock.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from . import lsh
from .data import SyntheticSpec, gen_synthetic, gen_transactions
from .protocol import (
    MODE_APPROX,
    MODE_EXACT,
    ClientSession,
    LoopbackChannel,
    MessageType,
    ServerConfig,
    ServerEngine,
    STAGE_ANONYMIZE,
    STAGE_DEANONYMIZE,
    STAGE_FETCH,
)
from .rules import (
    AllAssoc,
    OrderingFunction,
    RuleDatabase,
    default_recommendation,
    recommendation_from_rules,
    select_rules,
)

MODES = ("exact-plain", "approx-plain", "exact-private", "approx-private")
MODULUS_CHOICES = (1024, 2048)

CSV_HEADER = "mode,D,T,t,k,N,median_ms,mean_ms,stage_breakdown_json"


@dataclass(frozen=True)
class BenchConfig:
    """One benchmarking sweep: the cross product of the three ranges."""

    db_sizes: tuple[int, ...] = (1000,)
    transaction_sizes: tuple[int, ...] = (5,)
    subset_caps: tuple[int, ...] = (3,)
    k: int = 3
    modulus_bits: int = 1024
    repetitions: int = 1
    mode: str = "exact-plain"
    seed: int = 0
    universe_size: int = 10_000
    min_weight: int = 0
    sig_bits: int = 16
    sig_reps: int = 8

    def __post_init__(self):
        if not (self.db_sizes and self.transaction_sizes and self.subset_caps):
            raise ValueError("every sweep range must be non-empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.modulus_bits not in MODULUS_CHOICES:
            raise ValueError(f"modulus_bits must be one of {MODULUS_CHOICES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class BenchRow:
    """One configuration's timings plus its non-timing outputs."""

    mode: str
    db_size: int
    transaction_size: int
    subset_cap: int
    k: int
    modulus_bits: int
    median_ms: float
    mean_ms: float
    stage_ms: dict[str, float]
    results: list[list[int]] = field(default_factory=list, repr=False)

    def csv_fields(self) -> list[str]:
        breakdown = {k: round(v, 3) for k, v in sorted(self.stage_ms.items())}
        # plain modes touch no modulus; an N value there would imply
        # crypto that never ran
        n_field = str(self.modulus_bits) if self.mode.endswith("-private") else ""
        return [
            self.mode,
            str(self.db_size),
            str(self.transaction_size),
            str(self.subset_cap),
            str(self.k),
            n_field,
            f"{self.median_ms:.3f}",
            f"{self.mean_ms:.3f}",
            json.dumps(breakdown, sort_keys=True),
        ]


def rows_to_csv(rows: list[BenchRow]) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER.split(","))
    for row in rows:
        writer.writerow(row.csv_fields())
    return buf.getvalue()


def write_csv(rows: list[BenchRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows))


class _TimingChannel:
    """Attributes each protocol exchange's wall time to a named stage."""

    _STAGES = {
        STAGE_ANONYMIZE: "ot_anonymize",
        STAGE_FETCH: "ot_fetch",
        STAGE_DEANONYMIZE: "ot_deanonymize",
    }

    def __init__(self, inner):
        self.inner = inner
        self.stage_ms: dict[str, float] = {}

    def _label(self, mtype: int, payload: bytes) -> str:
        if mtype == int(MessageType.OT_QUERY_BATCH) and payload:
            return self._STAGES.get(payload[0], "ot_other")
        if mtype == int(MessageType.SORT_PAIRS):
            return "sort"
        if mtype == int(MessageType.SESSION_INIT):
            return "prep"
        return "session"

    def request(self, mtype, payload):
        label = self._label(int(mtype), payload)
        t0 = time.perf_counter()
        out = self.inner.request(mtype, payload)
        self.stage_ms[label] = self.stage_ms.get(label, 0.0) + (
            time.perf_counter() - t0
        ) * 1e3
        return out

    def close(self):
        self.inner.close()


def _timed(fn: Callable, acc: dict[str, float], label: str):
    t0 = time.perf_counter()
    out = fn()
    acc[label] = acc.get(label, 0.0) + (time.perf_counter() - t0) * 1e3
    return out


def _bench_exact_plain(config, db, trans, t, stage_ms):
    criterion = AllAssoc(min_weight=config.min_weight, max_length=t)
    samples, results = [], []
    for transaction in trans:
        t0 = time.perf_counter()
        rules = _timed(lambda: select_rules(db, transaction, criterion), stage_ms, "select")
        rec = _timed(
            lambda: recommendation_from_rules(rules, db, config.k), stage_ms, "collate"
        )
        samples.append((time.perf_counter() - t0) * 1e3)
        results.append([item for item, _ in rec])
    return samples, results


def _bench_approx_plain(config, db, trans, t, stage_ms):
    params = lsh.LshParams((config.sig_bits,), (config.sig_reps,), config.seed)
    index = _timed(
        lambda: lsh.prep([r.antecedent for r in db.rules], params, db.universe_size),
        stage_ms,
        "prep",
    )
    f = OrderingFunction()
    samples, results = [], []
    for transaction in trans:
        t0 = time.perf_counter()
        rule = _timed(
            lambda: lsh.query_top1(transaction, index, db, f), stage_ms, "select"
        )
        rec = (
            default_recommendation(db)
            if rule is None
            else [(item, None) for item in rule.consequent][: config.k]
        )
        samples.append((time.perf_counter() - t0) * 1e3)
        results.append([item for item, _ in rec])
    return samples, results


def _bench_private(config, db, trans, t, stage_ms, mode):
    server_cfg = ServerConfig(
        mode=mode,
        seed=config.seed,
        lsh_params=(
            lsh.LshParams((config.sig_bits,), (config.sig_reps,), config.seed)
            if mode == MODE_APPROX
            else None
        ),
    )
    t0 = time.perf_counter()
    engine = ServerEngine(db, server_cfg, rsa_bits=config.modulus_bits)
    channel = _TimingChannel(LoopbackChannel(engine.new_session()))
    client = ClientSession(
        channel, mode=mode, rsa_bits=config.modulus_bits, seed=config.seed + 1
    )
    client.open()
    stage_ms["prep"] = stage_ms.get("prep", 0.0) + (time.perf_counter() - t0) * 1e3

    samples, results = [], []
    for transaction in trans:
        t0 = time.perf_counter()
        spent_before = sum(channel.stage_ms.values())
        client.anonymize(transaction)
        if mode == MODE_EXACT:
            rec = client.all_assoc(w=config.min_weight, t=t, cap=config.k)
        else:
            rec = client.approx_query(cap=config.k)
        elapsed = (time.perf_counter() - t0) * 1e3
        # client-side residue: decode, verify, dedup, collate bookkeeping
        local = elapsed - (sum(channel.stage_ms.values()) - spent_before)
        stage_ms["collate"] = stage_ms.get("collate", 0.0) + local
        samples.append(elapsed)
        results.append([item for item, _ in rec])
    client.close()
    # the INIT exchange already sits inside the timed prep window
    for label, ms in channel.stage_ms.items():
        if label not in ("prep", "session"):
            stage_ms[label] = stage_ms.get(label, 0.0) + ms
    return samples, results


def synthetic_db(n_rules: int, universe_size: int, seed: int) -> RuleDatabase:
    return gen_synthetic(
        SyntheticSpec(n_rules=n_rules, universe_size=universe_size, seed=seed)
    )


def run_bench(
    config: BenchConfig,
    *,
    db: Optional[RuleDatabase] = None,
    progress: Optional[Callable[[BenchRow], None]] = None,
) -> list[BenchRow]:
    """Run the sweep; a supplied db replaces synthetic generation (the D
    column then reports its actual size)."""
    rows = []
    for n_rules in config.db_sizes:
        if db is not None:
            database, d_col = db, len(db)
        else:
            database = synthetic_db(n_rules, config.universe_size, config.seed + n_rules)
            d_col = n_rules
        for t_size in config.transaction_sizes:
            trans = gen_transactions(
                config.repetitions,
                t_size,
                database.universe_size,
                seed=config.seed * 1000003 + t_size,
            )
            for cap in config.subset_caps:
                stage_ms: dict[str, float] = {}
                if config.mode == "exact-plain":
                    samples, results = _bench_exact_plain(
                        config, database, trans, cap, stage_ms
                    )
                elif config.mode == "approx-plain":
                    samples, results = _bench_approx_plain(
                        config, database, trans, cap, stage_ms
                    )
                elif config.mode == "exact-private":
                    samples, results = _bench_private(
                        config, database, trans, cap, stage_ms, MODE_EXACT
                    )
                else:
                    samples, results = _bench_private(
                        config, database, trans, cap, stage_ms, MODE_APPROX
                    )
                row = BenchRow(
                    mode=config.mode,
                    db_size=d_col,
                    transaction_size=t_size,
                    subset_cap=cap,
                    k=config.k,
                    modulus_bits=config.modulus_bits,
                    median_ms=statistics.median(samples),
                    mean_ms=statistics.fmean(samples),
                    stage_ms=stage_ms,
                    results=results,
                )
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


# ---------------------------------------------------------------------------
# accuracy sweep


def subsample_by_weight(db: RuleDatabase, size: int) -> RuleDatabase:
    """Keep the `size` highest-weight rules (lower id wins weight ties),
    renumbered contiguously in original id order."""
    if len(db) <= size:
        return db
    keep = sorted(db.rules, key=lambda r: (-r.weight, r.id))[:size]
    keep.sort(key=lambda r: r.id)
    rules = [replace(r, id=pos + 1) for pos, r in enumerate(keep)]
    return RuleDatabase(
        rules=rules,
        universe_size=db.universe_size,
        global_frequent_items=db.global_frequent_items,
    )


def accuracy_sweep(
    db: RuleDatabase,
    *,
    widths: tuple[int, ...] = (10, 16, 32),
    reps: int = 8,
    n_queries: int = 1000,
    query_len: int = 3,
    seed: int = 0,
    query_seed: Optional[int] = None,
    query_pool: Optional[int] = None,
    verify: bool = False,
) -> dict[int, float]:
    """Top-1 accuracy per signature width, in percent.

    A query counts correct when the hashing index's top-1 equals the
    direct-scan top-1 (both None included).  Queries draw from the first
    `query_pool` item ids so hit rates stay meaningful on clustered
    rule sets; verify=False scores raw bucket hits, isolating the
    hashing from the containment filter.
    """
    from .rules import gscs

    pool = db.universe_size if query_pool is None else query_pool
    queries = gen_transactions(
        n_queries, query_len, pool, seed=seed if query_seed is None else query_seed
    )
    f = OrderingFunction()
    truths = [gscs(db, q, f) for q in queries]

    antecedents = [r.antecedent for r in db.rules]
    out: dict[int, float] = {}
    for width in widths:
        params = lsh.LshParams((width,), (reps,), seed)
        index = lsh.prep(antecedents, params, db.universe_size)
        hits = 0
        for query, truth in zip(queries, truths):
            got = lsh.query_top1(query, index, db, f, verify=verify)
            if (got is None and truth is None) or (
                got is not None and truth is not None and got.id == truth.id
            ):
                hits += 1
        out[width] = 100.0 * hits / n_queries
    return out


def accuracy_csv(accuracies: dict[int, float], db_size: int, n_queries: int) -> str:
    widths = sorted(accuracies)
    header = ["D", "queries"] + [f"A{w}" for w in widths]
    values = [str(db_size), str(n_queries)] + [f"{accuracies[w]:.1f}" for w in widths]
    return ",".join(header) + "\n" + ",".join(values) + "\n"
