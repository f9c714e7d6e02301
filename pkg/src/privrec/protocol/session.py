"""Client and server drivers for one private recommendation session.

The server never sees a plaintext item id from the client's transaction:
transaction items travel only as oblivious-lookup selectors, rule weights
travel only as server-key ciphertexts, and the sort rounds expose nothing
but affine-masked values and comparison bits.  The client, in turn, never
sees a plaintext weight: results carry None in the weight column.

Message flow (client drives, server reacts):

    SESSION_INIT      -> PUBLIC_PARAMS       tables built, parameters out
    OT_QUERY_BATCH    -> OT_REPLY_BATCH      anonymize / fetch / de-anonymize
    SORT_PAIRS        -> SORT_OUTCOMES       threshold bits + network sort
    SESSION_CLOSE     -> SESSION_CLOSE       teardown

A repeated SESSION_INIT on the same session rebuilds every table with
fresh hashes and prefixes (rekeying); old virtual indices become useless.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass
from typing import Optional, Sequence

from .. import exact, lsh
from ..crypto import ot, paillier, sortnet
from ..rules import RecommendationList, RuleDatabase
from . import records as rec
from .anonymization import AnonymizationTables, build_anonymization, item_frequencies
from .messages import (
    MODE_APPROX,
    MODE_EXACT,
    ApproxParams,
    ClientHello,
    MessageType,
    PublicParams,
    SortRequest,
    SortResponse,
    STAGE_ANONYMIZE,
    STAGE_DEANONYMIZE,
    STAGE_FETCH,
    hello_from_bytes,
    hello_to_bytes,
    params_from_bytes,
    params_to_bytes,
    query_batch_from_bytes,
    query_batch_to_bytes,
    reply_batch_from_bytes,
    reply_batch_to_bytes,
    sort_request_from_bytes,
    sort_request_to_bytes,
    sort_response_from_bytes,
    sort_response_to_bytes,
)

# Plaintext rule weights must stay below this for the masked comparisons;
# both the quantized-confidence scale and the synthetic generator sit far
# under it.
WEIGHT_BOUND = 1 << 50

# Mirror of the exact-path lookup cap: subsets explode combinatorially
# beyond this transaction size.
TRANSACTION_CAP = exact.DEFAULT_TRANSACTION_CAP

Transcript = list[tuple[str, int, int]]  # (direction, message type, payload bytes)


class ProtocolError(RuntimeError):
    """Raised client-side on an ERROR reply or a malformed exchange."""


@dataclass(frozen=True)
class ServerConfig:
    """Server-side knobs.

    `seed` makes every session (keys aside) deterministic for tests;
    None draws fresh randomness per session.  `fetch_dims` overrides the
    planner's OT geometry.  Approximate mode stores multi-rule bucket
    records within `approx_chunks` blocks per fetch.
    """

    mode: str = MODE_EXACT
    theta: int = 1
    fingerprint_bits: int = 64
    fingerprint_mode: str = "blake2b"
    lsh_params: Optional[lsh.LshParams] = None
    prefix_bits: int = rec.DEFAULT_PREFIX_BITS
    approx_chunks: int = 2
    fetch_dims: Optional[tuple[int, ...]] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.mode not in (MODE_EXACT, MODE_APPROX):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.approx_chunks < 1:
            raise ValueError("approx_chunks must be >= 1")


@dataclass
class SessionTables:
    """Everything one session serves lookups from."""

    anonymization: AnonymizationTables
    forward: list[int]
    reverse: list[int]
    fetch_table: exact.TwoLevelTable
    fetch_chunks: list[dict[int, int]]
    capacity: int
    n_chunks: int
    enhanced: Optional[rec.EnhancedDb]


class ServerEngine:
    """Long-lived server state: the rule database, its key pair, and the
    published weight ciphertexts.  Sessions borrow all three."""

    def __init__(
        self,
        db: RuleDatabase,
        config: ServerConfig = ServerConfig(),
        *,
        keypair: Optional[paillier.KeyPair] = None,
        rsa_bits: int = 1024,
    ):
        self.db = db
        self.config = config
        self._rng = random.Random(config.seed)
        key_seed = self._rng.getrandbits(64) if config.seed is not None else None
        self.keypair = keypair or paillier.keygen(rsa_bits, seed=key_seed)
        for r in db.rules:
            if r.weight >= WEIGHT_BOUND:
                raise ValueError("rule weight too large for masked comparison")
        self._weight_cts: Optional[list[paillier.Ciphertext]] = None

    @property
    def pk(self) -> paillier.PublicKey:
        return self.keypair.pk

    @property
    def weight_cts(self) -> list[paillier.Ciphertext]:
        """Enc(weight) per rule, id order; reused across sessions (same
        plaintexts under the same key reveal nothing new)."""
        if self._weight_cts is None:
            self._weight_cts = [
                paillier.encrypt(self.pk, r.weight, rng=self._rng)
                for r in self.db.rules
            ]
        return self._weight_cts

    def new_session(self) -> "ServerSession":
        seed = self._rng.getrandbits(64) if self.config.seed is not None else None
        return ServerSession(self, seed)


class ServerSession:
    """Reactive per-session state machine; `handle` maps one request
    payload to one reply payload."""

    def __init__(self, engine: ServerEngine, seed: Optional[int] = None):
        self.engine = engine
        self.rng = random.Random(seed)
        self.client_pk: Optional[paillier.PublicKey] = None
        self.tables: Optional[SessionTables] = None
        self.closed = False
        self.transcript: Transcript = []
        self.stage_seconds: dict[str, float] = {}
        self.rekeys = 0

    def handle(self, mtype: int, payload: bytes) -> tuple[int, bytes]:
        self.transcript.append(("recv", int(mtype), len(payload)))
        try:
            reply = self._dispatch(int(mtype), payload)
        except Exception as e:  # malformed input must not kill the server
            reply = (int(MessageType.ERROR), str(e).encode())
        self.transcript.append(("send", reply[0], len(reply[1])))
        return reply

    def _dispatch(self, mtype: int, payload: bytes) -> tuple[int, bytes]:
        if self.closed:
            raise ProtocolError("session is closed")
        if mtype == MessageType.SESSION_CLOSE:
            self.closed = True
            return (int(MessageType.SESSION_CLOSE), b"")
        if mtype == MessageType.SESSION_INIT:
            return (int(MessageType.PUBLIC_PARAMS), self._init(payload))
        if self.tables is None:
            raise ProtocolError("session not initialized")
        if mtype == MessageType.OT_QUERY_BATCH:
            return (int(MessageType.OT_REPLY_BATCH), self._ot_batch(payload))
        if mtype == MessageType.SORT_PAIRS:
            return (int(MessageType.SORT_OUTCOMES), self._sort(payload))
        raise ProtocolError(f"unexpected message type {mtype}")

    # -- build ---------------------------------------------------------

    def _init(self, payload: bytes) -> bytes:
        hello = hello_from_bytes(payload)
        if hello.mode != self.engine.config.mode:
            raise ProtocolError(
                f"server runs {self.engine.config.mode!r}, client asked {hello.mode!r}"
            )
        if self.tables is not None:
            self.rekeys += 1
        start = time.perf_counter()
        self.client_pk = hello.client_pk
        self.tables = self._build()
        self.stage_seconds["build"] = (
            self.stage_seconds.get("build", 0.0) + time.perf_counter() - start
        )
        return params_to_bytes(self._params())

    def _build(self) -> SessionTables:
        engine = self.engine
        config = engine.config
        db = engine.db
        rng = self.rng
        anon = build_anonymization(
            db.universe_size,
            item_frequencies(db),
            config.theta,
            rng.getrandbits(64),
        )
        capacity = rec.chunk_capacity(self.client_pk)
        table_config = exact.TableConfig(
            fingerprint_bits=config.fingerprint_bits,
            fingerprint_mode=config.fingerprint_mode,
            seed=rng.getrandbits(64),
        )
        enhanced = None
        if config.mode == MODE_APPROX:
            params = config.lsh_params or lsh.LshParams()
            params = lsh.LshParams(params.widths, params.reps, rng.getrandbits(32))
            ants, ids = [], []
            for rule in db.rules:
                a = rec.anonymized_itemset(rule.antecedent, anon)
                if a is not None:
                    ants.append(a)
                    ids.append(rule.id)
            index = lsh.prep(ants, params, db.universe_size, rule_ids=ids)
            enhanced = rec.build_enhanced_db(
                db,
                anon,
                index,
                prefix_bits=config.prefix_bits,
                config=table_config,
                capacity=capacity,
                n_chunks=config.approx_chunks,
                seed=rng.getrandbits(64),
            )
            fetch_table = enhanced.table
            n_chunks = config.approx_chunks
        else:
            fetch_table = rec.build_private_table(db, anon, table_config)
            n_chunks = rec.chunks_needed(fetch_table, capacity)
        return SessionTables(
            anonymization=anon,
            forward=list(anon.forward),
            reverse=list(anon.reverse),
            fetch_table=fetch_table,
            fetch_chunks=rec.chunk_tables(fetch_table, capacity, n_chunks),
            capacity=capacity,
            n_chunks=n_chunks,
            enhanced=enhanced,
        )

    def _params(self) -> PublicParams:
        engine = self.engine
        config = engine.config
        t = self.tables
        table = t.fetch_table
        approx = None
        if t.enhanced is not None:
            p = t.enhanced.params
            approx = ApproxParams(p.widths, p.reps, p.seed, t.enhanced.prefixes)
        size = engine.db.universe_size + 1
        return PublicParams(
            mode=config.mode,
            universe_size=engine.db.universe_size,
            server_pk=engine.pk,
            weight_cts=tuple(engine.weight_cts),
            default_items=tuple(engine.db.global_frequent_items),
            anon_dims=ot.plan_dims(size, size),
            table_records=table.n_records,
            table_buckets=table.bucket_count,
            outer=table.outer,
            inner=table.inner,
            table_prefix=table.prefix,
            fingerprint_bits=config.fingerprint_bits,
            fingerprint_mode=config.fingerprint_mode,
            fetch_dims=config.fetch_dims
            or ot.plan_dims(table.virtual_size, max(1, len(table.slots))),
            n_chunks=t.n_chunks,
            capacity=t.capacity,
            approx=approx,
        )

    # -- serve ---------------------------------------------------------

    def _ot_batch(self, payload: bytes) -> bytes:
        stage, queries = query_batch_from_bytes(self.client_pk, payload)
        t = self.tables
        start = time.perf_counter()
        if stage == STAGE_ANONYMIZE:
            size = len(t.forward)
            self._check_sizes(queries, size)
            replies = [
                ot.ot_reply(q, t.forward, self.client_pk, rng=self.rng)
                for q in queries
            ]
            # the batch is shuffled so reply order reveals nothing about
            # which selector produced which image
            self.rng.shuffle(replies)
            label = "anonymize"
        elif stage == STAGE_FETCH:
            self._check_sizes(queries, t.fetch_table.virtual_size)
            replies = []
            for q in queries:
                replies.extend(
                    ot.ot_reply_many(q, t.fetch_chunks, self.client_pk, rng=self.rng)
                )
            label = "fetch"
        else:
            size = len(t.reverse)
            self._check_sizes(queries, size)
            replies = [
                ot.ot_reply(q, t.reverse, self.client_pk, rng=self.rng)
                for q in queries
            ]
            label = "deanonymize"
        self.stage_seconds[label] = (
            self.stage_seconds.get(label, 0.0) + time.perf_counter() - start
        )
        return reply_batch_to_bytes(self.client_pk, stage, replies)

    @staticmethod
    def _check_sizes(queries: Sequence[ot.OtQuery], size: int) -> None:
        for q in queries:
            if q.n != size:
                raise ProtocolError(f"query table size {q.n} != {size}")

    def _sort(self, payload: bytes) -> bytes:
        req = sort_request_from_bytes(self.engine.pk, payload)
        sk = self.engine.keypair.sk
        start = time.perf_counter()
        pair_bits = tuple(
            paillier.decrypt(sk, left) >= paillier.decrypt(sk, right)
            for left, right in req.pairs
        )
        values = [paillier.decrypt(sk, ct) for ct in req.values]
        run = sortnet.run_network(values)
        self.stage_seconds["sort"] = (
            self.stage_seconds.get("sort", 0.0) + time.perf_counter() - start
        )
        return sort_response_to_bytes(
            SortResponse(pair_bits, run.outcomes, run.adjacent_equal)
        )


class LoopbackChannel:
    """In-process channel: requests go straight to a server session."""

    def __init__(self, server: ServerSession):
        self.server = server

    def request(self, mtype: int, payload: bytes) -> tuple[int, bytes]:
        return self.server.handle(mtype, payload)

    def close(self) -> None:
        pass


class ClientSession:
    """Drives the conversation and performs every client-side step:
    anonymization, subset fetches, masked sorts, collation, and final
    de-anonymization."""

    def __init__(
        self,
        channel,
        *,
        mode: str = MODE_EXACT,
        rsa_bits: int = 1024,
        keypair: Optional[paillier.KeyPair] = None,
        rng: Optional[random.Random] = None,
        seed: Optional[int] = None,
    ):
        self.channel = channel
        self.mode = mode
        self.rng = rng or random.Random(seed)
        key_seed = self.rng.getrandbits(64) if seed is not None or rng else None
        self.keypair = keypair or paillier.keygen(rsa_bits, seed=key_seed)
        self.params: Optional[PublicParams] = None
        self.anonymized: Optional[tuple[int, ...]] = None
        self.transcript: Transcript = []
        self._view: Optional[exact.TwoLevelTable] = None
        self._scheme: Optional[exact.FingerprintScheme] = None

    # -- plumbing ------------------------------------------------------

    def _exchange(self, mtype: MessageType, payload: bytes, expect: MessageType) -> bytes:
        self.transcript.append(("send", int(mtype), len(payload)))
        rtype, rpayload = self.channel.request(int(mtype), payload)
        self.transcript.append(("recv", int(rtype), len(rpayload)))
        if rtype == MessageType.ERROR:
            raise ProtocolError(rpayload.decode(errors="replace"))
        if rtype != expect:
            raise ProtocolError(f"expected message {int(expect)}, got {rtype}")
        return rpayload

    def open(self) -> PublicParams:
        hello = ClientHello(self.mode, self.keypair.pk)
        payload = self._exchange(
            MessageType.SESSION_INIT, hello_to_bytes(hello), MessageType.PUBLIC_PARAMS
        )
        self.params = params_from_bytes(payload)
        if self.params.mode != self.mode:
            raise ProtocolError("server answered with a different mode")
        self.anonymized = None
        self._view = self.params.table_view()
        self._scheme = exact.FingerprintScheme(
            self.params.fingerprint_bits, self.params.fingerprint_mode
        )
        return self.params

    def rekey(self) -> PublicParams:
        """Ask the server for fresh tables; prior anonymized ids and
        virtual indices become meaningless."""
        return self.open()

    def close(self) -> None:
        if self.params is not None:
            self._exchange(MessageType.SESSION_CLOSE, b"", MessageType.SESSION_CLOSE)
        self.channel.close()

    def _require_open(self) -> PublicParams:
        if self.params is None:
            raise ProtocolError("call open() first")
        return self.params

    def _default(self) -> RecommendationList:
        return [(item, 0) for item in self._require_open().default_items]

    # -- oblivious lookups ---------------------------------------------

    def _ot_round(
        self, stage: int, indices: Sequence[int], n: int, dims: tuple[int, ...]
    ) -> list[ot.OtReply]:
        queries = [
            ot.ot_query(i, n, len(dims), self.keypair.pk, dims=dims, rng=self.rng)
            for i in indices
        ]
        payload = query_batch_to_bytes(self.keypair.pk, stage, queries)
        raw = self._exchange(
            MessageType.OT_QUERY_BATCH, payload, MessageType.OT_REPLY_BATCH
        )
        rstage, replies = reply_batch_from_bytes(self.keypair.pk, raw)
        if rstage != stage:
            raise ProtocolError("reply batch for a different stage")
        return replies

    def anonymize(self, transaction: Sequence[int]) -> tuple[int, ...]:
        """Learn the anonymized ids of the transaction's frequent items.

        The reply batch arrives shuffled, so the result is a set; the
        infrequent sentinel 0 is discarded here.
        """
        params = self._require_open()
        items = sorted(set(transaction))
        if not items:
            raise ValueError("transaction must be non-empty")
        if len(items) > TRANSACTION_CAP:
            raise ValueError(f"transaction larger than {TRANSACTION_CAP} items")
        if items[0] < 1 or items[-1] > params.universe_size:
            raise ValueError("item id outside universe")
        n = params.anon_table_size
        replies = self._ot_round(STAGE_ANONYMIZE, items, n, params.anon_dims)
        if len(replies) != len(items):
            raise ProtocolError("anonymization reply count mismatch")
        d = len(params.anon_dims)
        pids = {ot.ot_extract(r, self.keypair.sk, d) for r in replies}
        pids.discard(0)
        self.anonymized = tuple(sorted(pids))
        return self.anonymized

    def _deanonymize(self, pids: Sequence[int]) -> dict[int, int]:
        """Map anonymized ids back to real ids, one lookup per id, replies
        in query order."""
        if not pids:
            return {}
        params = self._require_open()
        n = params.anon_table_size
        replies = self._ot_round(STAGE_DEANONYMIZE, list(pids), n, params.anon_dims)
        if len(replies) != len(pids):
            raise ProtocolError("de-anonymization reply count mismatch")
        d = len(params.anon_dims)
        out = {}
        for pid, reply in zip(pids, replies):
            real = ot.ot_extract(reply, self.keypair.sk, d)
            if real == 0:
                raise ProtocolError(f"anonymized id {pid} has no reverse image")
            out[pid] = real
        return out

    def _fetch_payloads(self, keys: Sequence[bytes]) -> list[Optional[bytes]]:
        """One oblivious fetch per key against the session's virtual
        table; every fetch moves exactly n_chunks reply blocks."""
        params = self._require_open()
        indices = [exact.index_of(key, self._view) for key in keys]
        n = self._view.virtual_size
        replies = self._ot_round(STAGE_FETCH, indices, n, params.fetch_dims)
        if len(replies) != len(keys) * params.n_chunks:
            raise ProtocolError("fetch reply count mismatch")
        d = len(params.fetch_dims)
        payloads = []
        for g in range(len(keys)):
            blocks = [
                ot.ot_extract(replies[g * params.n_chunks + c], self.keypair.sk, d)
                for c in range(params.n_chunks)
            ]
            payloads.append(rec.blocks_to_payload(blocks))
        return payloads

    def fetch_record(self, anonymized_antecedent: Sequence[int]) -> Optional[rec.PrivateRecord]:
        """Exact-mode single fetch: the stored record whose key is exactly
        this anonymized itemset, or None (absent slot, or a fingerprint
        mismatch when another key occupies the slot)."""
        params = self._require_open()
        if params.mode != MODE_EXACT:
            raise ProtocolError("fetch_record requires an exact-mode session")
        key = exact.encode_itemset(anonymized_antecedent)
        (payload,) = self._fetch_payloads([key])
        return self._verify_exact(key, payload)

    def _verify_exact(
        self, key: bytes, payload: Optional[bytes]
    ) -> Optional[rec.PrivateRecord]:
        if payload is None:
            return None
        decoded = rec.decode_exact_payload(
            payload, self.params.fingerprint_bits // 8
        )
        if decoded is None:
            return None
        fingerprint, record = decoded
        if fingerprint != self._scheme(self.params.table_prefix + key):
            return None
        return record

    # -- masked comparison rounds ----------------------------------------

    def _mask_values(
        self,
        cts: Sequence[paillier.Ciphertext],
        *,
        tiebreak: bool,
        value_bound: int,
    ) -> list[paillier.Ciphertext]:
        """One shared affine mask over all values so the server's
        comparisons agree with the plaintext order.  With tiebreak, each
        value also carries a position term making earlier entries win
        ties (a stable descending order)."""
        pk = self._require_open().server_pk
        scale = len(cts) if tiebreak else 1
        a = self.rng.randrange(1, 1 << sortnet.MASK_COEFF_BITS)
        b = self.rng.randrange(0, 1 << sortnet.MASK_COEFF_BITS)
        if a * (value_bound * scale + scale) + b >= pk.n:
            raise ValueError("masked values would overflow the plaintext space")
        out = []
        for pos, ct in enumerate(cts):
            if tiebreak:
                shifted = paillier.scalar_mul(pk, ct, a * scale)
                offset = a * (scale - 1 - pos) + b
            else:
                shifted = paillier.scalar_mul(pk, ct, a)
                offset = b
            out.append(
                paillier.add(pk, shifted, paillier.encrypt(pk, offset, rng=self.rng))
            )
        return out

    def _sort_round(
        self,
        pairs: Sequence[tuple[paillier.Ciphertext, paillier.Ciphertext]],
        masked_values: Sequence[paillier.Ciphertext],
    ) -> tuple[tuple[bool, ...], SortResponse, list[int]]:
        """One request/reply: threshold pairs and the value list travel
        together, both in client-shuffled order; bits come back aligned
        to the original orders."""
        pk = self._require_open().server_pk
        pair_perm = list(range(len(pairs)))
        self.rng.shuffle(pair_perm)
        value_perm = list(range(len(masked_values)))
        self.rng.shuffle(value_perm)
        req = SortRequest(
            tuple(pairs[i] for i in pair_perm),
            tuple(masked_values[i] for i in value_perm),
        )
        raw = self._exchange(
            MessageType.SORT_PAIRS,
            sort_request_to_bytes(pk, req),
            MessageType.SORT_OUTCOMES,
        )
        resp = sort_response_from_bytes(raw)
        if len(resp.pair_bits) != len(pairs):
            raise ProtocolError("pair bit count mismatch")
        expected = len(sortnet.comparison_pairs(len(masked_values)))
        if len(resp.outcomes) != expected:
            raise ProtocolError("comparison outcome count mismatch")
        pair_bits = [False] * len(pairs)
        for sent_pos, orig in enumerate(pair_perm):
            pair_bits[orig] = resp.pair_bits[sent_pos]
        # replay the comparator outcomes over the sent order, then map
        # back to original positions
        order = sortnet.apply_sort(value_perm, resp.outcomes)
        return tuple(pair_bits), resp, list(order)

    def sort_values(
        self,
        cts: Sequence[paillier.Ciphertext],
        *,
        tiebreak: bool = True,
        value_bound: int = 1 << 50,
    ) -> tuple[int, ...]:
        """Standalone private sort: positions of `cts` in descending
        plaintext order (stable under tiebreak).  n <= 1 needs no
        exchange at all."""
        if len(cts) <= 1:
            return tuple(range(len(cts)))
        masked = self._mask_values(cts, tiebreak=tiebreak, value_bound=value_bound)
        _, _, order = self._sort_round((), masked)
        return tuple(order)

    # -- queries ---------------------------------------------------------

    def _weight_ct(self, rule_id: int) -> paillier.Ciphertext:
        cts = self._require_open().weight_cts
        if not (1 <= rule_id <= len(cts)):
            raise ProtocolError(f"rule id {rule_id} outside the published weight list")
        return cts[rule_id - 1]

    def all_assoc(
        self, w: int = 0, t: Optional[int] = None, cap: Optional[int] = None
    ) -> RecommendationList:
        """Every applicable rule with weight >= w and antecedent length
        <= t, collated into a recommendation list.

        cap=None returns the full item union ascending; an integer cap
        ranks items by accumulated weight (ties to the smaller real id)
        and truncates.  Weights in the result are None: the client never
        learns them.
        """
        params = self._require_open()
        if params.mode != MODE_EXACT:
            raise ProtocolError("all_assoc requires an exact-mode session")
        if w < 0 or w >= WEIGHT_BOUND:
            raise ValueError("threshold outside the weight range")
        if cap is not None and cap < 0:
            raise ValueError("cap must be >= 0")
        if self.anonymized is None:
            raise ProtocolError("anonymize a transaction first")
        A = self.anonymized
        if not A:
            return self._default()
        t_eff = len(A) if t is None else min(t, len(A))
        if t_eff < 1:
            return self._default()

        subsets = list(exact.subsets_up_to(A, t_eff))
        keys = [exact.encode_itemset(s) for s in subsets]
        records: list[rec.PrivateRecord] = []
        seen: set[int] = set()
        for key, payload in zip(keys, self._fetch_payloads(keys)):
            record = self._verify_exact(key, payload)
            if record is not None and record.rule_id not in seen:
                seen.add(record.rule_id)
                records.append(record)
        if not records:
            return self._default()

        # one round: a threshold bit per candidate plus the rule ordering
        enc_w = paillier.encrypt(params.server_pk, w, rng=self.rng)
        pairs = [
            sortnet.rand_pair(
                params.server_pk,
                self._weight_ct(r.rule_id),
                enc_w,
                rng=self.rng,
                value_bound=WEIGHT_BOUND,
            )
            for r in records
        ]
        masked = self._mask_values(
            [self._weight_ct(r.rule_id) for r in records],
            tiebreak=True,
            value_bound=WEIGHT_BOUND,
        )
        keep_bits, _, order = self._sort_round(pairs, masked)
        ranked = [records[i] for i in order if keep_bits[i]]
        if not ranked:
            return self._default()

        # collate: homomorphic accumulation per anonymized item
        acc: dict[int, paillier.Ciphertext] = {}
        for record in ranked:
            wct = self._weight_ct(record.rule_id)
            for pid in record.consequent:
                acc[pid] = (
                    paillier.add(params.server_pk, acc[pid], wct)
                    if pid in acc
                    else wct
                )
        if not acc:
            return self._default()
        pids = sorted(acc)

        if cap is None:
            reals = self._deanonymize(pids)
            return [(item, None) for item in sorted(reals.values())]
        if cap == 0:
            return []
        return self._ranked_items(pids, [acc[p] for p in pids], len(ranked), cap)

    def _ranked_items(
        self,
        pids: list[int],
        acc_cts: list[paillier.Ciphertext],
        n_rules: int,
        cap: int,
    ) -> RecommendationList:
        """Order accumulated items by weight descending and break ties by
        the real id, de-anonymizing only as far as the cap requires."""
        if len(pids) == 1:
            runs = [[0]]
        else:
            bound = WEIGHT_BOUND * max(1, n_rules)
            masked = self._mask_values(acc_cts, tiebreak=False, value_bound=bound)
            _, resp, order = self._sort_round((), masked)
            # equal accumulated weights form runs of adjacent sorted slots;
            # within a run the order is fixed by the real ids, so the run
            # must be de-anonymized as a whole
            runs = [[order[0]]]
            for pos in range(1, len(order)):
                if resp.adjacent_equal[pos - 1]:
                    runs[-1].append(order[pos])
                else:
                    runs.append([order[pos]])
        needed_runs = []
        count = 0
        for run in runs:
            needed_runs.append(run)
            count += len(run)
            if count >= cap:
                break
        flat = [pids[p] for run in needed_runs for p in run]
        reals = self._deanonymize(flat)
        items: list[int] = []
        for run in needed_runs:
            items.extend(sorted(reals[pids[p]] for p in run))
        return [(item, None) for item in items[:cap]]

    def approx_query(self, cap: Optional[int] = None) -> RecommendationList:
        """Approximate path: one fetch per signature map, client-side
        verification and dedup, then a private comparison picks the best
        rule (highest weight, ties to the lower rule id)."""
        params = self._require_open()
        if params.mode != MODE_APPROX or params.approx is None:
            raise ProtocolError("approx_query requires an approx-mode session")
        if self.anonymized is None:
            raise ProtocolError("anonymize a transaction first")
        A = self.anonymized
        if not A:
            return self._default()

        keys = rec.enhanced_query_keys(
            A, params.approx.lsh_params, params.universe_size, params.approx.prefixes
        )
        fp_bytes = params.fingerprint_bits // 8
        tset = set(A)
        candidates: dict[int, rec.BucketRule] = {}
        for key, payload in zip(keys, self._fetch_payloads(keys)):
            if payload is None:
                continue
            decoded = rec.decode_bucket_payload(payload, fp_bytes)
            if decoded is None:
                continue
            fingerprint, bucket = decoded
            if fingerprint != self._scheme(params.table_prefix + key):
                continue
            for rule in bucket:
                if rule.rule_id not in candidates and set(rule.antecedent) <= tset:
                    candidates[rule.rule_id] = rule
        if not candidates:
            return self._default()

        by_id = sorted(candidates)
        if len(by_id) == 1:
            best = candidates[by_id[0]]
        else:
            order = self.sort_values(
                [self._weight_ct(rid) for rid in by_id],
                tiebreak=True,
                value_bound=WEIGHT_BOUND,
            )
            best = candidates[by_id[order[0]]]
        if not best.consequent:
            return self._default()
        reals = sorted(self._deanonymize(best.consequent).values())
        if cap is not None:
            reals = reals[:cap]
        return [(item, None) for item in reals]


def run_private_query(
    db: RuleDatabase,
    transaction: Sequence[int],
    *,
    w: int = 0,
    t: Optional[int] = None,
    cap: Optional[int] = None,
    mode: str = MODE_EXACT,
    server_config: Optional[ServerConfig] = None,
    engine: Optional[ServerEngine] = None,
    client_keypair: Optional[paillier.KeyPair] = None,
    rsa_bits: int = 1024,
    seed: Optional[int] = None,
) -> RecommendationList:
    """Loopback convenience: one full private query in-process."""
    if engine is None:
        config = server_config or ServerConfig(mode=mode, seed=seed)
        engine = ServerEngine(db, config, rsa_bits=rsa_bits)
    server = engine.new_session()
    client = ClientSession(
        LoopbackChannel(server),
        mode=mode,
        rsa_bits=rsa_bits,
        keypair=client_keypair,
        seed=None if seed is None else seed + 1,
    )
    client.open()
    client.anonymize(transaction)
    if mode == MODE_APPROX:
        result = client.approx_query(cap=cap)
    else:
        result = client.all_assoc(w=w, t=t, cap=cap)
    client.close()
    return result
