"""Command-line driver: data generation, rule-file checking, serving,
querying (plain or private), and benchmarking."""

from __future__ import annotations

import argparse
import sys
import threading
from typing import Optional, Sequence

from . import bench as bench_mod
from . import lsh
from .data import (
    LoadReport,
    SyntheticSpec,
    gen_synthetic,
    load_rules,
    save_rules,
)
from .protocol import MODE_APPROX, MODE_EXACT, ServerConfig
from .rules import (
    AllAssoc,
    AnyAssoc,
    Ordering,
    OrderingFunction,
    RuleDatabase,
    Top1Assoc,
    TopAssoc,
    TopKAssoc,
    default_recommendation,
    recommendation_from_rules,
    select_rules,
)
from .transport import default_port, run_client, run_server

CRITERIA = ("all", "any", "top", "top1", "topk")
QUERY_MODES = bench_mod.MODES


def _int_pair(text: str) -> tuple[int, int]:
    lo, hi = (int(p) for p in text.split(",", 1))
    return lo, hi


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _transaction(text: str) -> tuple[int, ...]:
    items = tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    if not items:
        raise argparse.ArgumentTypeError("empty transaction")
    return items


def _item_dist(text: str) -> tuple:
    kind, _, val = text.partition(":")
    if kind == "zipf":
        return ("zipf", float(val or 1.0))
    if kind == "uniform":
        return ("uniform", int(val))
    raise argparse.ArgumentTypeError(f"unknown item distribution {text!r}")


def _ordering(name: str) -> OrderingFunction:
    return OrderingFunction(variant=Ordering(name))


def _criterion(args: argparse.Namespace):
    f = _ordering(args.ordering)
    t = args.t if args.t is not None else len(args.transaction)
    if args.criterion == "all":
        return AllAssoc(min_weight=args.w, max_length=t)
    if args.criterion == "any":
        return AnyAssoc(k=args.k, min_weight=args.w, max_length=t)
    if args.criterion == "top":
        return TopAssoc(k=args.k, min_weight=args.w, max_length=t, f=f)
    if args.criterion == "top1":
        return Top1Assoc(f=f)
    return TopKAssoc(k=args.k, f=f)


def _address(args: argparse.Namespace) -> tuple[str, int]:
    port = args.port if args.port is not None else default_port()
    return args.host, port


def _load_db(path: str, universe: Optional[int]) -> RuleDatabase:
    return load_rules(path, universe_size=universe)


def _print_list(rec) -> None:
    for item, weight in rec:
        print(f"{item},{'' if weight is None else weight}")


def cmd_gen(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        n_rules=args.n_rules,
        universe_size=args.universe,
        antecedent_lengths=args.ant_lens,
        consequent_lengths=args.cons_lens,
        item_dist=args.item_dist,
        weight_range=args.weight_range,
        seed=args.seed,
    )
    db = gen_synthetic(spec)
    save_rules(db, args.out)
    print(f"wrote {len(db)} rules over {db.universe_size} items to {args.out}")
    return 0


def cmd_load_check(args: argparse.Namespace) -> int:
    report = LoadReport()
    try:
        db = load_rules(
            args.path,
            universe_size=args.universe,
            strict=not args.lenient,
            report=report,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"lines: {report.lines}")
    print(f"parsed: {report.parsed}")
    print(f"skipped: {report.skipped}")
    print(f"merged duplicate antecedents: {report.merged_duplicates}")
    print(f"rules: {len(db)}")
    print(f"universe: {db.universe_size}")
    print(f"max weight: {db.max_weight}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    db = _load_db(args.db, args.universe)
    config = ServerConfig(
        mode=args.mode,
        theta=args.theta,
        lsh_params=(
            lsh.LshParams((args.sig_bits,), (args.sig_reps,), args.seed or 0)
            if args.mode == MODE_APPROX
            else None
        ),
        fetch_dims=args.ot_dims,
        seed=args.seed,
    )
    host, port = _address(args)
    server = run_server(
        (host, port), db, config, rsa_bits=args.rsa_bits, background=True
    )
    print(f"serving {len(db)} rules ({args.mode}) on {host}:{server.port}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    if args.mode.endswith("-private"):
        rec = run_client(
            _address(args),
            args.transaction,
            mode=MODE_EXACT if args.mode == "exact-private" else MODE_APPROX,
            w=args.w,
            t=args.t,
            cap=args.cap,
            rsa_bits=args.rsa_bits,
            seed=args.seed,
        )
        _print_list(rec)
        return 0

    if args.db is None:
        print("error: plain modes need --db", file=sys.stderr)
        return 1
    db = _load_db(args.db, args.universe)
    if args.mode == "exact-plain":
        rules = select_rules(db, args.transaction, _criterion(args))
        rec = recommendation_from_rules(rules, db, args.cap)
    else:
        params = lsh.LshParams((args.sig_bits,), (args.sig_reps,), args.seed or 0)
        index = lsh.prep([r.antecedent for r in db.rules], params, db.universe_size)
        rule = lsh.query_top1(
            args.transaction, index, db, _ordering(args.ordering)
        )
        if rule is None:
            rec = default_recommendation(db)
        else:
            rec = [(item, None) for item in rule.consequent]
        if args.cap is not None:
            rec = rec[: args.cap]
    _print_list(rec)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    db = _load_db(args.db, args.universe) if args.db else None

    if args.accuracy:
        if db is None:
            db = bench_mod.synthetic_db(args.db_sizes[0], args.universe or 10_000, args.seed or 0)
        db = bench_mod.subsample_by_weight(db, args.subsample)
        acc = bench_mod.accuracy_sweep(
            db,
            widths=args.widths,
            reps=args.sig_reps,
            n_queries=args.queries,
            query_len=args.query_len,
            seed=args.seed or 0,
            query_pool=args.query_pool,
        )
        text = bench_mod.accuracy_csv(acc, len(db), args.queries)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        print(text, end="")
        return 0

    config = bench_mod.BenchConfig(
        db_sizes=args.db_sizes,
        transaction_sizes=args.transaction_sizes,
        subset_caps=args.subset_caps,
        k=args.k,
        modulus_bits=args.rsa_bits,
        repetitions=args.reps,
        mode=args.mode,
        seed=args.seed or 0,
        universe_size=args.universe or 10_000,
        min_weight=args.w,
        sig_bits=args.sig_bits,
        sig_reps=args.sig_reps,
    )
    rows = bench_mod.run_bench(config, db=db)
    text = bench_mod.rows_to_csv(rows)
    if args.out:
        bench_mod.write_csv(rows, args.out)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privrec",
        description="association-rule recommendations, plain or private",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="generate a synthetic rule file")
    p.add_argument("--n-rules", type=int, required=True)
    p.add_argument("--universe", type=int, default=10_000)
    p.add_argument("--ant-lens", type=_int_pair, default=(1, 5))
    p.add_argument("--cons-lens", type=_int_pair, default=(1, 3))
    p.add_argument("--item-dist", type=_item_dist, default=("zipf", 1.0))
    p.add_argument("--weight-range", type=_int_pair, default=(1, 10_000))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("load-check", help="parse a rule file and report")
    p.add_argument("path")
    p.add_argument("--universe", type=int)
    p.add_argument("--lenient", action="store_true", help="skip malformed lines")
    p.set_defaults(fn=cmd_load_check)

    p = sub.add_parser("serve", help="serve private queries over TCP")
    p.add_argument("--db", required=True)
    p.add_argument("--universe", type=int)
    p.add_argument("--mode", choices=(MODE_EXACT, MODE_APPROX), default=MODE_EXACT)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, help="default: PRIVREC_PORT or 7433")
    p.add_argument("--rsa-bits", type=int, default=1024)
    p.add_argument("--theta", type=int, default=1)
    p.add_argument("--sig-bits", type=int, default=16)
    p.add_argument("--sig-reps", type=int, default=8)
    p.add_argument("--ot-dims", type=_int_tuple, help="override fetch OT geometry")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("query", help="run one query, plain or private")
    p.add_argument("--transaction", type=_transaction, required=True)
    p.add_argument("--mode", choices=QUERY_MODES, default="exact-plain")
    p.add_argument("--db", help="rule file (plain modes)")
    p.add_argument("--universe", type=int)
    p.add_argument("--criterion", choices=CRITERIA, default="all")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--w", type=int, default=0)
    p.add_argument("--t", type=int)
    p.add_argument("--cap", type=int, help="collate to this many items")
    p.add_argument(
        "--ordering",
        choices=[o.value for o in Ordering],
        default=Ordering.WEIGHT_ONLY.value,
    )
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int)
    p.add_argument("--rsa-bits", type=int, default=1024)
    p.add_argument("--sig-bits", type=int, default=16)
    p.add_argument("--sig-reps", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("bench", help="latency sweeps and accuracy tables")
    p.add_argument("--mode", choices=QUERY_MODES, default="exact-plain")
    p.add_argument("--db", help="bench this rule file instead of synthetic data")
    p.add_argument("--db-sizes", type=_int_tuple, default=(1000,))
    p.add_argument("--transaction-sizes", type=_int_tuple, default=(5,))
    p.add_argument("--subset-caps", type=_int_tuple, default=(3,))
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--w", type=int, default=0)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--rsa-bits", type=int, choices=(1024, 2048), default=1024)
    p.add_argument("--universe", type=int)
    p.add_argument("--sig-bits", type=int, default=16)
    p.add_argument("--sig-reps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the CSV here as well as stdout")
    p.add_argument("--accuracy", action="store_true", help="signature-width accuracy sweep")
    p.add_argument("--widths", type=_int_tuple, default=(10, 16, 32))
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--query-len", type=int, default=3)
    p.add_argument("--query-pool", type=int)
    p.add_argument("--subsample", type=int, default=10_000)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
