"""Protocol-layer tests: anonymization tables, private table payloads,
message codecs, and the full client/server conversation over a loopback
channel at test-sized keys."""

import random

import pytest

import oracles
from privrec import exact, lsh
from privrec.crypto import ot, paillier, sortnet
from privrec.protocol import (
    INFREQUENT,
    MODE_APPROX,
    MODE_EXACT,
    STAGE_ANONYMIZE,
    STAGE_DEANONYMIZE,
    STAGE_FETCH,
    AnonymizationTables,
    BucketRule,
    ClientHello,
    ClientSession,
    LoopbackChannel,
    MessageType,
    ProtocolError,
    ServerConfig,
    ServerEngine,
    SortRequest,
    SortResponse,
    anonymize_plain,
    anonymized_itemset,
    blocks_to_payload,
    build_anonymization,
    build_enhanced_db,
    build_private_table,
    chunk_capacity,
    chunk_tables,
    chunks_needed,
    de_anonymize_plain,
    decode_bucket_payload,
    decode_exact_payload,
    encode_bucket_payload,
    encode_exact_payload,
    enhanced_query_keys,
    hello_from_bytes,
    hello_to_bytes,
    item_frequencies,
    pack_bits,
    params_from_bytes,
    params_to_bytes,
    payload_to_blocks,
    query_batch_from_bytes,
    query_batch_to_bytes,
    reply_batch_from_bytes,
    reply_batch_to_bytes,
    run_private_query,
    sort_request_from_bytes,
    sort_request_to_bytes,
    sort_response_from_bytes,
    sort_response_to_bytes,
    unpack_bits,
)
from privrec.rules import (
    AllAssoc,
    AssociationRule,
    RuleDatabase,
    recommendation_from_rules,
    select_rules,
)

BITS = 512


@pytest.fixture(scope="module")
def client_kp():
    return paillier.keygen(BITS, seed=0xA11CE)


@pytest.fixture(scope="module")
def server_kp():
    return paillier.keygen(BITS, seed=0xB0B)


TOY_DB = RuleDatabase(
    rules=(
        AssociationRule(1, (1, 2), (4, 5), 7),
        AssociationRule(2, (1,), (3,), 9),
        AssociationRule(3, (2, 3), (6,), 5),
        AssociationRule(4, (3,), (1, 6), 9),
    ),
    universe_size=8,
    global_frequent_items=(2, 6),
)

# weights 2 and 3 over consequents {4,5} and {5,6}: accumulated 4->2,
# 5->5, 6->3, so the top two are [5, 6]
COLLATE_DB = RuleDatabase(
    rules=(
        AssociationRule(1, (1,), (4, 5), 2),
        AssociationRule(2, (2,), (5, 6), 3),
    ),
    universe_size=6,
    global_frequent_items=(1,),
)


class SpyChannel:
    """Wraps a channel and keeps raw payloads for transcript assertions."""

    def __init__(self, inner):
        self.inner = inner
        self.sent = []
        self.received = []

    def request(self, mtype, payload):
        self.sent.append((int(mtype), payload))
        out = self.inner.request(mtype, payload)
        self.received.append((int(out[0]), out[1]))
        return out

    def close(self):
        self.inner.close()


def make_pair(
    db,
    client_kp,
    server_kp,
    *,
    mode=MODE_EXACT,
    seed=7,
    client_seed=99,
    config=None,
):
    cfg = config or ServerConfig(mode=mode, seed=seed)
    engine = ServerEngine(db, cfg, keypair=server_kp)
    server = engine.new_session()
    spy = SpyChannel(LoopbackChannel(server))
    client = ClientSession(spy, mode=mode, keypair=client_kp, seed=client_seed)
    return engine, server, spy, client


def sent_queries(spy, client_pk, stage):
    out = []
    for mtype, payload in spy.sent:
        if mtype == int(MessageType.OT_QUERY_BATCH):
            s, queries = query_batch_from_bytes(client_pk, payload)
            if s == stage:
                out.extend(queries)
    return out


def plain_items(db, transaction, w, t, cap):
    rules = select_rules(db, transaction, AllAssoc(min_weight=w, max_length=t))
    return [i for i, _ in recommendation_from_rules(rules, db, cap)]


class TestAnonymization:
    def test_round_trip_on_frequent_items(self):
        tables = build_anonymization(12, {i: 1 for i in range(1, 13)}, seed=3)
        for i in range(1, 13):
            assert tables.forward[i] != 0
            assert tables.reverse[tables.forward[i]] == i
        assert sorted(tables.forward[1:]) == list(range(1, 13))

    def test_sentinel_row_is_zero(self):
        tables = build_anonymization(5, {1: 1}, seed=0)
        assert tables.forward[0] == 0 and tables.reverse[0] == 0

    def test_infrequent_maps_to_sentinel(self):
        tables = build_anonymization(5, {1: 3, 2: 1}, theta=2, seed=1)
        assert tables.forward[1] != 0
        assert tables.forward[2] == 0
        assert tables.forward[3] == 0

    def test_theta_zero_keeps_every_item(self):
        tables = build_anonymization(9, {}, theta=0, seed=2)
        assert all(tables.forward[i] != 0 for i in range(1, 10))

    def test_deterministic_under_seed(self):
        a = build_anonymization(20, {i: 1 for i in range(1, 21)}, seed=11)
        b = build_anonymization(20, {i: 1 for i in range(1, 21)}, seed=11)
        assert a == b

    def test_plain_paths_invert(self):
        tables = build_anonymization(10, {i: 1 for i in range(1, 11)}, seed=4)
        pids = anonymize_plain((1, 3, 7), tables)
        assert de_anonymize_plain(pids, tables) == (1, 3, 7)

    def test_plain_path_drops_infrequent(self):
        tables = build_anonymization(6, {1: 1, 3: 1}, seed=5)
        pids = anonymize_plain((1, 2, 3), tables)
        assert len(pids) == 2
        assert de_anonymize_plain(pids, tables) == (1, 3)

    def test_item_frequencies_count_rules(self):
        freqs = item_frequencies(TOY_DB)
        assert freqs[1] == 3  # rules 1, 2, 4
        assert freqs[6] == 2  # rules 3, 4
        assert 7 not in freqs

    def test_invalid_tables_rejected(self):
        with pytest.raises(ValueError):
            AnonymizationTables((0, 2, 1), (0, 1, 2), 1)  # reverse wrong
        with pytest.raises(ValueError):
            AnonymizationTables((1, 2, 0), (0, 2, 1), 1)  # sentinel row broken

    def test_frequent_items_property(self):
        tables = build_anonymization(6, {2: 1, 5: 1}, seed=6)
        assert tables.frequent_items == (2, 5)


class TestBlocks:
    def test_round_trip_single_chunk(self):
        payload = b"\x00\x01hello\x00"
        blocks = payload_to_blocks(payload, 16, 3)
        assert len(blocks) == 3 and blocks[1] == 0 and blocks[2] == 0
        assert blocks_to_payload(blocks) == payload

    def test_round_trip_multi_chunk_exact_boundary(self):
        payload = bytes(range(32))
        blocks = payload_to_blocks(payload, 16, 2)
        assert all(b != 0 for b in blocks)
        assert blocks_to_payload(blocks) == payload

    def test_leading_zero_bytes_survive(self):
        payload = b"\x00\x00\x00\x01"
        assert blocks_to_payload(payload_to_blocks(payload, 8, 1)) == payload

    def test_all_zero_blocks_mean_absent(self):
        assert blocks_to_payload([0, 0, 0]) is None

    def test_gap_or_bad_guard_is_malformed(self):
        assert blocks_to_payload([0, 5]) is None  # gap before content
        assert blocks_to_payload([2 << 8]) is None  # guard byte not 0x01

    def test_budget_enforced(self):
        with pytest.raises(ValueError):
            payload_to_blocks(bytes(33), 16, 2)
        with pytest.raises(ValueError):
            payload_to_blocks(b"", 16, 2)

    def test_capacity_matches_key_size(self, client_kp):
        cap = chunk_capacity(client_kp.pk)
        assert cap == (BITS - 16) // 8 - 1


class TestRecordPayloads:
    def test_exact_round_trip(self):
        payload = encode_exact_payload(0xDEADBEEF, 8, 7, 2, (30, 11))
        fp, record = decode_exact_payload(payload, 8)
        assert fp == 0xDEADBEEF
        assert record.rule_id == 7
        assert record.antecedent_len == 2
        assert record.consequent == (30, 11)

    def test_exact_empty_consequent(self):
        payload = encode_exact_payload(1, 8, 3, 1, ())
        assert decode_exact_payload(payload, 8)[1].consequent == ()

    def test_exact_malformed_rejected(self):
        payload = encode_exact_payload(1, 8, 3, 1, (4,))
        assert decode_exact_payload(payload[:-1], 8) is None
        assert decode_exact_payload(payload + b"x", 8) is None
        assert decode_exact_payload(b"\x00" * 5, 8) is None

    def test_bucket_round_trip(self):
        rules = [
            BucketRule(3, (1, 2), (9,)),
            BucketRule(8, (4,), (2, 5, 6)),
        ]
        payload = encode_bucket_payload(0xAB, 8, rules)
        fp, decoded = decode_bucket_payload(payload, 8)
        assert fp == 0xAB
        assert decoded == rules

    def test_bucket_empty(self):
        payload = encode_bucket_payload(5, 8, [])
        assert decode_bucket_payload(payload, 8) == (5, [])

    def test_bucket_malformed_rejected(self):
        payload = encode_bucket_payload(5, 8, [BucketRule(1, (2,), (3,))])
        assert decode_bucket_payload(payload[:-1], 8) is None
        assert decode_bucket_payload(payload + b"\x00", 8) is None


def build_tables(db, seed=3):
    return build_anonymization(db.universe_size, item_frequencies(db), 1, seed)


class TestPrivateTable:
    def test_keys_are_anonymized_and_fetchable(self):
        tables = build_tables(TOY_DB)
        config = exact.TableConfig(seed=9)
        table = build_private_table(TOY_DB, tables, config)
        assert table.n_records == len(TOY_DB.rules)
        for rule in TOY_DB.rules:
            pids = anonymized_itemset(rule.antecedent, tables)
            key = exact.encode_itemset(pids)
            payload = table.slots[exact.index_of(key, table)]
            fp, record = decode_exact_payload(payload, 8)
            assert record.rule_id == rule.id
            assert record.antecedent_len == len(rule.antecedent)
            assert de_anonymize_plain(record.consequent, tables) == rule.consequent
            assert fp == config.scheme(table.prefix + key)

    def test_rule_with_infrequent_antecedent_dropped(self):
        tables = build_anonymization(8, {1: 1, 3: 1, 4: 1, 5: 1, 6: 1}, seed=2)
        # item 2 infrequent: rules 1 and 3 have it in the antecedent
        table = build_private_table(TOY_DB, tables, exact.TableConfig(seed=1))
        assert table.n_records == 2

    def test_infrequent_consequent_member_trimmed(self):
        freqs = item_frequencies(TOY_DB)
        del freqs[5]  # make item 5 infrequent; it appears in rule 1's consequent
        tables = build_anonymization(8, freqs, seed=4)
        table = build_private_table(TOY_DB, tables, exact.TableConfig(seed=1))
        pids = anonymized_itemset((1, 2), tables)
        key = exact.encode_itemset(pids)
        _, record = decode_exact_payload(table.slots[exact.index_of(key, table)], 8)
        assert de_anonymize_plain(record.consequent, tables) == (4,)

    def test_chunking_round_trip(self):
        tables = build_tables(TOY_DB)
        table = build_private_table(TOY_DB, tables, exact.TableConfig(seed=5))
        capacity = 8  # tiny, to force several chunks
        n = chunks_needed(table, capacity)
        assert n > 1
        chunked = chunk_tables(table, capacity, n)
        assert len(chunked) == n
        for idx, payload in table.slots.items():
            blocks = [chunked[c].get(idx, 0) for c in range(n)]
            assert blocks_to_payload(blocks) == payload


class TestEnhancedDb:
    def _build(self, seed=0, widths=(8,), reps=(4,), n_rules=12, budget_chunks=2):
        rng = random.Random(seed)
        rules = []
        seen = set()
        rid = 1
        while rid <= n_rules:
            ant = tuple(sorted(rng.sample(range(1, 13), rng.randint(1, 3))))
            if ant in seen:
                continue
            seen.add(ant)
            cons = tuple(sorted(set(rng.sample(range(1, 13), 2)) - set(ant)))
            if not cons:
                continue
            rules.append(AssociationRule(rid, ant, cons, rng.randint(1, 50)))
            rid += 1
        db = RuleDatabase(tuple(rules), universe_size=12)
        tables = build_tables(db, seed=seed + 1)
        ants, ids = [], []
        for r in db.rules:
            a = anonymized_itemset(r.antecedent, tables)
            ants.append(a)
            ids.append(r.id)
        params = lsh.LshParams(widths, reps, seed + 2)
        index = lsh.prep(ants, params, db.universe_size, rule_ids=ids)
        enhanced = build_enhanced_db(
            db,
            tables,
            index,
            config=exact.TableConfig(seed=seed + 3),
            capacity=61,
            n_chunks=budget_chunks,
            seed=seed + 4,
        )
        return db, tables, index, enhanced

    def test_record_count_bound_and_merge_accounting(self):
        db, _, index, enhanced = self._build()
        l = sum(index.params.reps)
        assert enhanced.n_maps == l
        assert enhanced.table.n_records <= l * len(db.rules)
        assert (
            enhanced.table.n_records
            == l * len(db.rules) - enhanced.merged_duplicates
        )

    def test_key_format(self):
        db, tables, index, enhanced = self._build()
        pids = anonymized_itemset(db.rules[0].antecedent, tables)
        keys = enhanced_query_keys(
            pids, index.params, db.universe_size, enhanced.prefixes
        )
        assert len(keys) == enhanced.n_maps
        for key in keys:
            assert len(key) == 8 + (index.params.widths[0] + 7) // 8

    def test_keys_match_direct_recomputation(self):
        db, tables, index, enhanced = self._build(seed=5)
        bank = lsh.GaussianBank.generate(index.params, db.universe_size)
        for rule in db.rules[:4]:
            pids = anonymized_itemset(rule.antecedent, tables)
            vec = lsh.augment(lsh.scaled_vector(pids, db.universe_size))
            j = 0
            for m in range(index.params.n_levels):
                for rep in range(index.params.reps[m]):
                    sig = lsh.signature(bank, m, rep, vec)
                    key = enhanced.prefixes[j] + lsh.pack_signature(sig)
                    idx = exact.index_of(key, enhanced.table)
                    payload = enhanced.table.slots.get(idx)
                    assert payload is not None
                    _, bucket = decode_bucket_payload(payload, 8)
                    assert any(b.rule_id == rule.id for b in bucket)
                    j += 1

    def test_shared_buckets_merge_rules(self):
        # 1-bit signatures leave only two possible buckets per map
        db, _, index, enhanced = self._build(seed=1, widths=(1,), reps=(2,))
        assert enhanced.merged_duplicates > 0
        multi = [
            decode_bucket_payload(p, 8)[1]
            for p in enhanced.table.slots.values()
        ]
        assert any(len(bucket) > 1 for bucket in multi)

    def test_overflowing_bucket_keeps_lowest_ids(self):
        db, _, index, enhanced = self._build(
            seed=1, widths=(1,), reps=(1,), n_rules=30, budget_chunks=1
        )
        assert enhanced.dropped_overflow > 0
        for payload in enhanced.table.slots.values():
            _, bucket = decode_bucket_payload(payload, 8)
            assert len(payload) <= 61
            ids = [b.rule_id for b in bucket]
            assert ids == sorted(ids)


class TestMessageCodecs:
    def test_bit_packing(self):
        bits = (True, False, False, True, True, False, True, False, True)
        packed = pack_bits(bits)
        assert len(packed) == 2
        assert unpack_bits(packed, 9) == bits
        assert pack_bits(()) == b""
        assert unpack_bits(b"", 0) == ()

    def test_hello_round_trip(self, client_kp):
        hello = ClientHello(MODE_EXACT, client_kp.pk)
        back = hello_from_bytes(hello_to_bytes(hello))
        assert back.mode == MODE_EXACT
        assert back.client_pk.n == client_kp.pk.n

    def test_hello_rejects_unknown_mode(self, client_kp):
        blob = hello_to_bytes(ClientHello(MODE_EXACT, client_kp.pk))
        broken = blob.replace(b'"exact"', b'"weird"')
        with pytest.raises(ValueError):
            hello_from_bytes(broken)

    def test_params_round_trip(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        params = client.open()
        blob = params_to_bytes(params)
        back = params_from_bytes(blob)
        assert back == params

    def test_params_round_trip_approx(self, client_kp, server_kp):
        cfg = ServerConfig(
            mode=MODE_APPROX, seed=8, lsh_params=lsh.LshParams((4,), (2,), 0)
        )
        engine, server, spy, client = make_pair(
            TOY_DB, client_kp, server_kp, mode=MODE_APPROX, config=cfg
        )
        params = client.open()
        back = params_from_bytes(params_to_bytes(params))
        assert back == params
        assert back.approx is not None
        assert len(back.approx.prefixes) == 2

    def test_query_batch_round_trip(self, client_kp):
        rng = random.Random(1)
        queries = [
            ot.ot_query(i, 50, 2, client_kp.pk, rng=rng) for i in (0, 7, 49)
        ]
        blob = query_batch_to_bytes(client_kp.pk, STAGE_FETCH, queries)
        stage, back = query_batch_from_bytes(client_kp.pk, blob)
        assert stage == STAGE_FETCH
        assert len(back) == 3
        for q, b in zip(queries, back):
            assert b.n == q.n and b.dims == q.dims and b.selectors == q.selectors

    def test_reply_batch_round_trip(self, client_kp):
        rng = random.Random(2)
        q = ot.ot_query(3, 10, 1, client_kp.pk, rng=rng)
        replies = [ot.ot_reply(q, [5, 0, 9, 1, 0, 0, 2, 0, 0, 4], client_kp.pk, rng=rng)]
        blob = reply_batch_to_bytes(client_kp.pk, STAGE_ANONYMIZE, replies)
        stage, back = reply_batch_from_bytes(client_kp.pk, blob)
        assert stage == STAGE_ANONYMIZE
        assert back[0].cts == replies[0].cts

    def test_sort_round_trip(self, server_kp):
        rng = random.Random(3)
        pk = server_kp.pk
        enc = lambda v: paillier.encrypt(pk, v, rng=rng)
        req = SortRequest(((enc(4), enc(2)),), (enc(9), enc(1), enc(5)))
        back = sort_request_from_bytes(pk, sort_request_to_bytes(pk, req))
        assert back == req
        resp = SortResponse((True,), (False, True, True), (False, False))
        assert sort_response_from_bytes(sort_response_to_bytes(resp)) == resp

    def test_batch_rejects_unknown_stage(self, client_kp):
        with pytest.raises(ValueError):
            query_batch_to_bytes(client_kp.pk, 9, [])
        blob = query_batch_to_bytes(client_kp.pk, STAGE_FETCH, [])
        with pytest.raises(ValueError):
            query_batch_from_bytes(client_kp.pk, b"\x09" + blob[1:])


class TestAnonymizeOp:
    def test_images_match_server_tables(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        pids = client.anonymize((1, 3))
        tables = server.tables.anonymization
        assert pids == anonymize_plain((1, 3), tables)

    def test_one_query_per_item_against_full_table(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2, 3))
        queries = sent_queries(spy, client_kp.pk, STAGE_ANONYMIZE)
        assert len(queries) == 3
        assert all(q.n == TOY_DB.universe_size + 1 for q in queries)

    def test_infrequent_items_discarded(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        # items 7 and 8 appear in no rule, so theta=1 marks them infrequent
        pids = client.anonymize((1, 7, 8))
        assert len(pids) == 1
        tables = server.tables.anonymization
        assert de_anonymize_plain(pids, tables) == (1,)

    def test_all_infrequent_gives_empty_and_default(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        assert client.anonymize((7, 8)) == ()
        assert client.all_assoc() == [(2, 0), (6, 0)]

    def test_transaction_validation(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        with pytest.raises(ValueError):
            client.anonymize(())
        with pytest.raises(ValueError):
            client.anonymize((0,))
        with pytest.raises(ValueError):
            client.anonymize((9,))


class TestPrivateFetch:
    def test_present_key(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        tables = server.tables.anonymization
        pids = anonymized_itemset((1, 2), tables)
        record = client.fetch_record(pids)
        assert record is not None
        assert record.rule_id == 1
        assert de_anonymize_plain(record.consequent, tables) == (4, 5)

    def test_absent_key_empty_slot(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        table = server.tables.fetch_table
        # find an absent key landing on an unoccupied slot
        for items in [(i,) for i in range(1, 9)] + [(i, j) for i in range(1, 9) for j in range(i + 1, 9)]:
            key = exact.encode_itemset(items)
            if exact.index_of(key, table) not in table.slots:
                assert client.fetch_record(items) is None
                return
        pytest.fail("no empty-slot candidate found")

    def test_absent_key_occupied_slot_rejected_by_fingerprint(
        self, client_kp, server_kp
    ):
        # single-record table: the virtual space is small enough that some
        # absent key collides with the occupied slot
        db = RuleDatabase(
            rules=(AssociationRule(1, (1, 2), (3,), 5),),
            universe_size=16,
            global_frequent_items=(3,),
        )
        freqs = {i: 1 for i in range(1, 17)}  # keep the whole universe frequent
        for attempt in range(8):
            cfg = ServerConfig(seed=100 + attempt, theta=0)
            engine, server, spy, client = make_pair(
                db, client_kp, server_kp, config=cfg
            )
            client.open()
            table = server.tables.fetch_table
            (occupied,) = table.slots
            stored = exact.encode_itemset(
                anonymized_itemset((1, 2), server.tables.anonymization)
            )
            pool = [(i,) for i in range(1, 17)]
            pool += [(i, j) for i in range(1, 17) for j in range(i + 1, 17)]
            pool += [(i, j, k) for i in range(1, 15) for j in range(i + 1, 16) for k in range(j + 1, 17)]
            for items in pool:
                key = exact.encode_itemset(items)
                if key != stored and exact.index_of(key, table) == occupied:
                    assert client.fetch_record(items) is None
                    return
        pytest.fail("no colliding key found across rekeys")

    def test_fetch_transcript_shape_is_index_independent(
        self, client_kp, server_kp
    ):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        tables = server.tables.anonymization
        client.fetch_record(anonymized_itemset((1, 2), tables))
        client.fetch_record((1, 2, 3))  # almost surely absent
        ot_msgs = [
            (mtype, len(payload))
            for mtype, payload in spy.sent
            if mtype == int(MessageType.OT_QUERY_BATCH)
        ]
        replies = [
            (mtype, len(payload))
            for mtype, payload in spy.received
            if mtype == int(MessageType.OT_REPLY_BATCH)
        ]
        assert ot_msgs[0][1] == ot_msgs[1][1]
        assert replies[0][1] == replies[1][1]


class TestPrivateSort:
    def _client(self, client_kp, server_kp, db=TOY_DB):
        engine, server, spy, client = make_pair(db, client_kp, server_kp)
        client.open()
        return server, spy, client

    def _encrypt(self, server_kp, values, seed=0):
        rng = random.Random(seed)
        return [paillier.encrypt(server_kp.pk, v, rng=rng) for v in values]

    def test_worked_example(self, client_kp, server_kp):
        server, spy, client = self._client(client_kp, server_kp)
        cts = self._encrypt(server_kp, [3, 1, 2])
        assert client.sort_values(cts) == (0, 2, 1)

    def test_single_value_needs_no_exchange(self, client_kp, server_kp):
        server, spy, client = self._client(client_kp, server_kp)
        before = len(spy.sent)
        assert client.sort_values(self._encrypt(server_kp, [42])) == (0,)
        assert client.sort_values([]) == ()
        assert len(spy.sent) == before

    def test_two_rounds_and_batcher_count(self, client_kp, server_kp):
        server, spy, client = self._client(client_kp, server_kp)
        cts = self._encrypt(server_kp, [5, 9, 1, 7, 7, 2])
        before = len(spy.sent)
        client.sort_values(cts)
        exchanges = spy.sent[before:]
        assert len(exchanges) == 1  # one request, one reply: two rounds
        assert exchanges[0][0] == int(MessageType.SORT_PAIRS)
        resp = sort_response_from_bytes(spy.received[-1][1])
        assert len(resp.outcomes) == len(sortnet.comparison_pairs(6))

    def test_stable_ties(self, client_kp, server_kp):
        server, spy, client = self._client(client_kp, server_kp)
        values = [5, 5, 3, 5]
        order = client.sort_values(self._encrypt(server_kp, values))
        assert list(order) == oracles.descending_stable(values)

    def test_random_lists_match_oracle(self, client_kp, server_kp):
        server, spy, client = self._client(client_kp, server_kp)
        rng = random.Random(44)
        for trial in range(20):
            n = rng.randint(2, 16)
            values = [rng.randint(0, 9) for _ in range(n)]
            order = client.sort_values(self._encrypt(server_kp, values, seed=trial))
            assert list(order) == oracles.descending_stable(values)

    def test_masked_values_hide_plaintexts(self, client_kp, server_kp):
        server, spy, client = self._client(client_kp, server_kp)
        values = [3, 1, 2]
        client.sort_values(self._encrypt(server_kp, values))
        req = sort_request_from_bytes(server_kp.pk, spy.sent[-1][1])
        seen = sorted(paillier.decrypt(server_kp.sk, ct) for ct in req.values)
        assert seen != sorted(values)  # affine mask moved every value
        assert min(seen) > max(values)


class TestAllAssoc:
    def test_toy_equality_uncapacitated(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2, 3))
        got = client.all_assoc(w=0, t=3)
        assert got == [(i, None) for i in plain_items(TOY_DB, (1, 2, 3), 0, 3, None)]

    def test_toy_equality_capacitated(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2, 3))
        got = [i for i, _ in client.all_assoc(w=0, t=3, cap=3)]
        assert got == plain_items(TOY_DB, (1, 2, 3), 0, 3, 3)

    def test_threshold_above_everything_gives_default(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2, 3))
        assert client.all_assoc(w=100) == [(2, 0), (6, 0)]

    def test_inclusive_threshold(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2))
        got = client.all_assoc(w=9)  # rule 2 has weight exactly 9
        assert got == [(3, None)]

    def test_fetch_count_is_subset_count(self, client_kp, server_kp):
        db = RuleDatabase(
            rules=(AssociationRule(1, (1, 2, 3, 4, 5), (6,), 2),),
            universe_size=6,
            global_frequent_items=(6,),
        )
        cfg = ServerConfig(seed=3, theta=0)
        engine, server, spy, client = make_pair(db, client_kp, server_kp, config=cfg)
        client.open()
        client.anonymize((1, 2, 3, 4, 5))
        client.all_assoc(w=0, t=5)
        assert len(sent_queries(spy, client_kp.pk, STAGE_FETCH)) == 31

    def test_collate_example(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(COLLATE_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2))
        got = [i for i, _ in client.all_assoc(w=0, t=2, cap=2)]
        assert got == [5, 6]
        assert got == [i for i, _ in oracles.collate_cap(COLLATE_DB.rules, 2)]

    def test_cap_beyond_union_returns_all_items(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(COLLATE_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2))
        got = [i for i, _ in client.all_assoc(w=0, t=2, cap=50)]
        assert got == [5, 6, 4]

    def test_tie_break_by_smaller_real_id(self, client_kp, server_kp):
        db = RuleDatabase(
            rules=(
                AssociationRule(1, (1,), (5, 6), 4),
                AssociationRule(2, (2,), (3,), 4),
            ),
            universe_size=6,
            global_frequent_items=(1,),
        )
        engine, server, spy, client = make_pair(db, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2))
        got = [i for i, _ in client.all_assoc(w=0, t=1, cap=3)]
        assert got == [3, 5, 6]  # all weight 4: ascending real ids

    def test_deanonymization_round_trip(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2, 3))
        out = client.all_assoc(w=0, t=3, cap=4)
        tables = server.tables.anonymization
        for item, _ in out:
            assert tables.reverse[tables.forward[item]] == item

    def test_per_pair_randomizers_differ(self, client_kp, server_kp):
        db = RuleDatabase(
            rules=(
                AssociationRule(1, (1,), (3,), 6),
                AssociationRule(2, (2,), (4,), 6),
            ),
            universe_size=4,
            global_frequent_items=(3,),
        )
        engine, server, spy, client = make_pair(db, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2))
        client.all_assoc(w=6)
        payload = next(
            p for m, p in spy.sent if m == int(MessageType.SORT_PAIRS)
        )
        req = sort_request_from_bytes(server_kp.pk, payload)
        assert len(req.pairs) == 2
        lefts = [paillier.decrypt(server_kp.sk, a) for a, _ in req.pairs]
        rights = [paillier.decrypt(server_kp.sk, b) for _, b in req.pairs]
        # both rules weigh 6 and the threshold is 6, yet the masked pairs
        # land on different numbers
        assert lefts[0] != lefts[1] or rights[0] != rights[1]
        assert len({ct.value for pair in req.pairs for ct in pair}) == 4

    def test_requires_anonymization_first(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        with pytest.raises(ProtocolError):
            client.all_assoc()

    def test_weights_are_never_plaintext_client_side(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2, 3))
        out = client.all_assoc(w=0, t=3, cap=4)
        assert all(weight is None for _, weight in out)
        allowed = {
            int(MessageType.PUBLIC_PARAMS),
            int(MessageType.OT_REPLY_BATCH),
            int(MessageType.SORT_OUTCOMES),
            int(MessageType.SESSION_CLOSE),
        }
        assert {m for m, _ in spy.received} <= allowed

    def test_server_transcript_is_ciphertext_only(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2, 3))
        client.all_assoc(w=0, t=3, cap=2)
        allowed = {
            int(MessageType.SESSION_INIT),
            int(MessageType.OT_QUERY_BATCH),
            int(MessageType.SORT_PAIRS),
            int(MessageType.SESSION_CLOSE),
        }
        assert {m for m, _ in spy.sent} <= allowed
        # the only JSON the server receives carries nothing but the
        # version, the mode, and a public key
        hello = next(p for m, p in spy.sent if m == int(MessageType.SESSION_INIT))
        import json

        assert set(json.loads(hello)) == {"version", "mode", "client_pk"}


class TestApprox:
    def _setup(self, client_kp, server_kp, seed=0):
        rng = random.Random(seed)
        rules = []
        seen = set()
        rid = 1
        while rid <= 15:
            ant = tuple(sorted(rng.sample(range(1, 15), rng.randint(1, 3))))
            if ant in seen:
                continue
            seen.add(ant)
            cons = tuple(sorted(set(rng.sample(range(1, 15), 2)) - set(ant)))
            if not cons:
                continue
            rules.append(AssociationRule(rid, ant, cons, rng.randint(1, 50)))
            rid += 1
        db = RuleDatabase(tuple(rules), universe_size=14, global_frequent_items=(1,))
        cfg = ServerConfig(
            mode=MODE_APPROX,
            seed=seed + 50,
            theta=0,
            lsh_params=lsh.LshParams((8, 4), (4, 3), 0),
        )
        engine, server, spy, client = make_pair(
            db, client_kp, server_kp, mode=MODE_APPROX, config=cfg
        )
        client.open()
        return db, engine, server, spy, client

    def _oracle_items(self, db, server, transaction, cap=None):
        """Best rule among every map's verified candidates, by weight then
        lower id; consequents ascending in real-id space."""
        tables = server.tables.anonymization
        enhanced = server.tables.enhanced
        A = anonymize_plain(transaction, tables)
        if not A:
            return [i for i in db.global_frequent_items]
        keys = enhanced_query_keys(
            A, enhanced.params, db.universe_size, enhanced.prefixes
        )
        scheme = enhanced.table.config.scheme
        tset = set(A)
        best = None
        cands = {}
        for key in keys:
            payload = enhanced.table.slots.get(exact.index_of(key, enhanced.table))
            if payload is None:
                continue
            fp, bucket = decode_bucket_payload(payload, 8)
            if fp != scheme(enhanced.table.prefix + key):
                continue
            for rule in bucket:
                if set(rule.antecedent) <= tset:
                    cands.setdefault(rule.rule_id, rule)
        if not cands:
            return [i for i in db.global_frequent_items]
        weights = {r.id: r.weight for r in db.rules}
        best_id = max(sorted(cands), key=lambda rid: weights[rid])
        cons = de_anonymize_plain(cands[best_id].consequent, tables)
        return list(cons if cap is None else cons[:cap])

    def test_matches_all_map_candidate_oracle(self, client_kp, server_kp):
        for seed in (0, 1, 2):
            db, engine, server, spy, client = self._setup(
                client_kp, server_kp, seed=seed
            )
            rng = random.Random(seed + 9)
            for _ in range(3):
                T = tuple(sorted(rng.sample(range(1, 15), 4)))
                client.anonymize(T)
                got = [i for i, _ in client.approx_query()]
                assert got == self._oracle_items(db, server, T)

    def test_exactly_l_fetches(self, client_kp, server_kp):
        db, engine, server, spy, client = self._setup(client_kp, server_kp)
        client.anonymize((1, 2, 3))
        before = len(sent_queries(spy, client_kp.pk, STAGE_FETCH))
        client.approx_query()
        after = len(sent_queries(spy, client_kp.pk, STAGE_FETCH))
        assert after - before == 7  # reps (4, 3)

    def test_no_applicable_candidate_gives_default(self, client_kp, server_kp):
        db = RuleDatabase(
            rules=(
                AssociationRule(1, (1, 2, 3), (9,), 5),
                AssociationRule(2, (4, 5, 6), (10,), 5),
            ),
            universe_size=24,
            global_frequent_items=(9,),
        )
        cfg = ServerConfig(
            mode=MODE_APPROX,
            seed=77,
            theta=0,
            lsh_params=lsh.LshParams((4,), (3,), 0),
        )
        engine, server, spy, client = make_pair(
            db, client_kp, server_kp, mode=MODE_APPROX, config=cfg
        )
        client.open()
        # no antecedent is contained in this transaction, so whatever the
        # signatures collide with is discarded by verification
        client.anonymize((20, 21, 22, 23))
        assert client.approx_query() == [(9, 0)]

    def test_wrong_mode_calls_rejected(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2))
        with pytest.raises(ProtocolError):
            client.approx_query()


class TestRekey:
    def test_fixed_key_moves_and_fetch_still_works(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        p1 = client.open()
        tables1 = server.tables.anonymization
        pids1 = anonymized_itemset((1, 2), tables1)
        key1 = exact.encode_itemset(pids1)
        idx1 = exact.index_of(key1, server.tables.fetch_table)
        assert client.fetch_record(pids1).rule_id == 1

        p2 = client.rekey()
        assert server.rekeys == 1
        tables2 = server.tables.anonymization
        pids2 = anonymized_itemset((1, 2), tables2)
        key2 = exact.encode_itemset(pids2)
        idx2 = exact.index_of(key2, server.tables.fetch_table)
        assert (p1.table_prefix, p1.outer) != (p2.table_prefix, p2.outer)
        assert (key1, idx1) != (key2, idx2)
        record = client.fetch_record(pids2)
        assert record is not None and record.rule_id == 1

    def test_rekey_resets_anonymized_state(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.anonymize((1, 2))
        client.rekey()
        assert client.anonymized is None
        with pytest.raises(ProtocolError):
            client.all_assoc()

    def test_end_to_end_after_rekey(self, client_kp, server_kp):
        engine, server, spy, client = make_pair(TOY_DB, client_kp, server_kp)
        client.open()
        client.rekey()
        client.anonymize((1, 2, 3))
        got = client.all_assoc(w=0, t=3)
        assert got == [(i, None) for i in plain_items(TOY_DB, (1, 2, 3), 0, 3, None)]


class TestServerStateMachine:
    def test_requests_before_init_rejected(self, client_kp, server_kp):
        engine = ServerEngine(TOY_DB, ServerConfig(seed=1), keypair=server_kp)
        server = engine.new_session()
        mtype, payload = server.handle(
            int(MessageType.OT_QUERY_BATCH),
            query_batch_to_bytes(client_kp.pk, STAGE_FETCH, []),
        )
        assert mtype == int(MessageType.ERROR)

    def test_unknown_type_rejected(self, client_kp, server_kp):
        engine = ServerEngine(TOY_DB, ServerConfig(seed=1), keypair=server_kp)
        server = engine.new_session()
        mtype, _ = server.handle(99, b"")
        assert mtype == int(MessageType.ERROR)

    def test_closed_session_rejects_everything(self, client_kp, server_kp):
        engine = ServerEngine(TOY_DB, ServerConfig(seed=1), keypair=server_kp)
        server = engine.new_session()
        hello = hello_to_bytes(ClientHello(MODE_EXACT, client_kp.pk))
        assert server.handle(int(MessageType.SESSION_INIT), hello)[0] == int(
            MessageType.PUBLIC_PARAMS
        )
        assert server.handle(int(MessageType.SESSION_CLOSE), b"")[0] == int(
            MessageType.SESSION_CLOSE
        )
        assert server.handle(int(MessageType.SESSION_INIT), hello)[0] == int(
            MessageType.ERROR
        )

    def test_mode_mismatch_rejected(self, client_kp, server_kp):
        engine = ServerEngine(TOY_DB, ServerConfig(seed=1), keypair=server_kp)
        server = engine.new_session()
        hello = hello_to_bytes(ClientHello(MODE_APPROX, client_kp.pk))
        mtype, payload = server.handle(int(MessageType.SESSION_INIT), hello)
        assert mtype == int(MessageType.ERROR)
        assert b"exact" in payload

    def test_malformed_payload_draws_error_not_crash(self, client_kp, server_kp):
        engine = ServerEngine(TOY_DB, ServerConfig(seed=1), keypair=server_kp)
        server = engine.new_session()
        hello = hello_to_bytes(ClientHello(MODE_EXACT, client_kp.pk))
        server.handle(int(MessageType.SESSION_INIT), hello)
        mtype, _ = server.handle(int(MessageType.OT_QUERY_BATCH), b"\xff\xff")
        assert mtype == int(MessageType.ERROR)
        # the session survives the bad message
        mtype, _ = server.handle(
            int(MessageType.OT_QUERY_BATCH),
            query_batch_to_bytes(client_kp.pk, STAGE_ANONYMIZE, []),
        )
        assert mtype == int(MessageType.OT_REPLY_BATCH)


class TestRunPrivateQuery:
    def test_loopback_convenience(self, client_kp, server_kp):
        engine = ServerEngine(TOY_DB, ServerConfig(seed=21), keypair=server_kp)
        got = run_private_query(
            TOY_DB,
            (1, 2, 3),
            w=5,
            t=2,
            cap=3,
            engine=engine,
            client_keypair=client_kp,
            seed=13,
        )
        assert [i for i, _ in got] == plain_items(TOY_DB, (1, 2, 3), 5, 2, 3)
