import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitfed_sim.attacks import AttackPlan
from splitfed_sim.data import PartitionPlan, gen_blobs, holdout, partition
from splitfed_sim.ledger import (
    Assignment,
    ChainVerificationError,
    ContractEvent,
    Ledger,
    LedgerError,
    MissingEvaluation,
    RotationError,
    aggregate_top_k,
    assign_nodes,
    check_chain,
    evaluate,
    export_chain,
    finalize_scores,
    first_bad_height,
    load_chain,
    run_bsfl,
    run_bsfl_cycle,
    select_top_k,
    verify_chain,
)
from splitfed_sim.nn import Weights, fedavg, init_model, split, table_ii
from splitfed_sim.topology import TopologyConfig, initial_models, run_ssfl

SPEC = table_ii(1, 14, 14)


@pytest.fixture(scope="module")
def data():
    ds = gen_blobs(12, seed=8)
    train, val, test = holdout(ds, 0.1, 0.1, seed=8)
    return partition(train, PartitionPlan(9, seed=8)), val, test


# --- node assignment -------------------------------------------------------

def test_assign_example_from_scores():
    scores = {0: 0.1, 1: 0.1, 2: 0.1, 3: 0.2, 4: 0.5, 5: 0.3, 6: 0.9, 7: 0.4, 8: 0.6}
    a = assign_nodes(2, range(9), scores, [0, 1, 2], 3, 2, seed=0)
    assert sorted(a.committee) == [3, 5, 7]
    assert a.committee == [3, 5, 7]  # best server first
    clients = [c for _, cs in a.shards for c in cs]
    assert {0, 1, 2} <= set(clients)


def test_assign_groups_adjacent_ranks():
    scores = {0: 0.1, 1: 0.1, 2: 0.1, 3: 0.2, 4: 0.5, 5: 0.3, 6: 0.9, 7: 0.4, 8: 0.6}
    a = assign_nodes(2, range(9), scores, [3, 5, 7], 3, 2, seed=0)
    # eligible ranked: 0,1,2,4,8,6 -> servers 0,1,2; clients ranked 3,5,7,4,8,6
    assert a.shards == [(0, [3, 5]), (1, [4, 7]), (2, [6, 8])]


def test_first_cycle_is_random_and_seeded():
    a = assign_nodes(1, range(9), {}, [], 3, 2, seed=5)
    b = assign_nodes(1, range(9), {}, [], 3, 2, seed=5)
    assert a == b
    members = sorted(n for i in range(3) for n in a.members(i))
    assert members == list(range(9))
    committees = {tuple(assign_nodes(1, range(9), {}, [], 3, 2, seed=s).committee) for s in range(10)}
    assert len(committees) > 1


def test_unscored_nodes_rank_last_and_idle_nodes_exist():
    scores = {n: float(n) for n in range(8)}  # node 8..9 never scored
    a = assign_nodes(2, range(10), {**scores, 8: None}, [0, 1, 2], 3, 2, seed=0)
    assert a.committee == [3, 4, 5]
    assert a.idle == [9]


def test_assign_errors():
    with pytest.raises(RotationError):
        assign_nodes(1, range(8), {}, [], 3, 2, seed=0)
    with pytest.raises(RotationError):
        assign_nodes(2, range(9), {n: 0.0 for n in range(9)}, list(range(7)), 3, 2, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 6), st.integers(1, 4), st.integers(0, 3))
def test_rotation_property(seed, shards, clients, idle):
    nodes = list(range(shards * (clients + 1) + idle))
    rng = np.random.default_rng(seed)
    prev, scores = [], {}
    for t in range(1, 8):
        a = assign_nodes(t, nodes, scores, prev, shards, clients, seed)
        members = [n for i in range(shards) for n in a.members(i)] + a.idle
        assert sorted(members) == nodes
        assert not set(a.committee) & set(prev)
        assert set(prev) <= {c for _, cs in a.shards for c in cs}
        scores = {n: float(rng.random()) for n in nodes}
        prev = a.committee


# --- scoring -----------------------------------------------------------------

def test_evaluate_single_client_path(data):
    parts, _, _ = data
    wc, ws = initial_models(SPEC, 0)
    from splitfed_sim.topology import evaluate_model

    assert evaluate(SPEC, parts[0], ws, [wc]) == evaluate_model(SPEC, wc, ws, parts[0])[0]


def test_evaluate_is_median_over_client_paths(data):
    parts, _, _ = data
    wc, ws = initial_models(SPEC, 0)
    others = [split(init_model(SPEC, s), 3)[0] for s in (1, 2)]
    from splitfed_sim.topology import evaluate_model

    losses = sorted(evaluate_model(SPEC, w, ws, parts[1])[0] for w in [wc, *others])
    assert evaluate(SPEC, parts[1], ws, [wc, *others]) == losses[1]


def test_finalize_examples():
    assert finalize_scores({0: [0.3, 0.1, 0.2]}) == {0: 0.2}
    assert finalize_scores({0: [0.4, 0.1]}) == {0: pytest.approx(0.25)}
    with pytest.raises(MissingEvaluation):
        finalize_scores({0: [0.1], 1: [0.2, 0.3]}, expected=2)
    with pytest.raises(MissingEvaluation):
        finalize_scores({0: []})


def test_select_top_k_examples():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert select_top_k({0: 0.2, 1: 0.5, 2: 0.3}, 2) == [0, 2]
        assert select_top_k({0: 0.2, 1: 0.2, 2: 0.1}, 2, server_ids={0: 7, 1: 4, 2: 9}) == [2, 1]
        assert select_top_k({0: 0.9, 1: 0.5}, 1, maximize=True) == [0]
    with pytest.warns(UserWarning):
        select_top_k({0: 0.2, 1: 0.5, 2: 0.3}, 2)
    with pytest.raises(ValueError):
        select_top_k({0: 0.1}, 2)


def test_aggregate_top_k_is_fedavg_of_subsets():
    rng = np.random.default_rng(0)
    base = init_model(SPEC.server, 0)
    mk = lambda: Weights(rng.standard_normal(len(base)).astype(np.float32), base.manifest)
    servers = {i: mk() for i in range(3)}
    cbase = init_model(SPEC.client, 0)
    mkc = lambda: Weights(rng.standard_normal(len(cbase)).astype(np.float32), cbase.manifest)
    clients = {i: [mkc(), mkc()] for i in range(3)}
    ws, wc = aggregate_top_k([2, 0], servers, clients)
    assert ws.equals(fedavg([servers[0], servers[2]]))
    assert wc.equals(fedavg(clients[0] + clients[2]))


def test_identical_shards_get_identical_scores(data):
    parts, _, _ = data
    same = [parts[0]] * 9
    cfg = TopologyConfig("bsfl", 9, 3, 2, patience=None, batch_size=len(parts[0]), seed=1)
    a = Assignment(1, [(0, [1, 2]), (3, [4, 5]), (6, [7, 8])])
    wc, ws = initial_models(SPEC, 1)
    res = run_bsfl_cycle(1, a, ws, wc, SPEC, cfg, same)
    finals = list(res.final.values())
    assert max(finals) - min(finals) < 1e-6


# --- chain -------------------------------------------------------------------

def _chain(n=5):
    led = Ledger()
    for t in range(1, n + 1):
        ev = [led.event("AssignNodes", t, json.dumps({"t": t}).encode(), "json"),
              led.event("ModelPropose", t, bytes([t]) * 64, "sfw"),
              led.event("EvaluationPropose", t, json.dumps({"s": t}).encode(), "json")]
        led.append_block(ev, bytes([t]) * 16, bytes([t + 1]) * 8, b"{}")
    return led


def test_fresh_chain_verifies():
    led = _chain()
    assert led.verify()
    assert verify_chain([], {})
    assert led.blocks[0].previous_hash == bytes(32)
    assert all(b.previous_hash == a.hash for a, b in zip(led.blocks, led.blocks[1:]))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_any_payload_byte_flip_is_caught_at_its_height(draw):
    led = _chain()
    block = draw.draw(st.sampled_from(led.blocks))
    digests = [e.digest for e in block.events] + list(block.state)
    digest = draw.draw(st.sampled_from(digests))
    store = dict(led.store)
    payload = bytearray(store[digest])
    pos = draw.draw(st.integers(0, len(payload) - 1))
    payload[pos] ^= draw.draw(st.integers(1, 255))
    store[digest] = bytes(payload)
    first_use = min(b.height for b in led.blocks
                    if digest in [e.digest for e in b.events] + list(b.state))
    assert not verify_chain(led.blocks, store)
    assert first_bad_height(led.blocks, store) == first_use


def test_header_tampering_detected():
    led = _chain()
    blocks = list(led.blocks)
    b = blocks[2]
    blocks[2] = type(b)(b.height, b.previous_hash, b.events[:-1], b.state, b.state_hash, b.hash)
    with pytest.raises(ChainVerificationError) as err:
        check_chain(blocks, led.store)
    assert err.value.height == 2


def test_event_order_and_kinds_enforced():
    led = Ledger()
    a = led.event("AssignNodes", 1, b"a", "json")
    e = led.event("EvaluationPropose", 1, b"e", "json")
    with pytest.raises(LedgerError):
        led.append_block([e, a], b"", b"", b"")
    with pytest.raises(LedgerError):
        led.append_block([], b"", b"", b"")
    with pytest.raises(LedgerError):
        ContractEvent("Mint", 1, "00", "json")


def test_export_roundtrip(tmp_path):
    led = _chain(3)
    export_chain(led.blocks, led.store, tmp_path)
    blocks, store = load_chain(tmp_path)
    assert blocks == led.blocks
    assert verify_chain(blocks, store)
    victim = next((tmp_path / "payloads").iterdir())
    raw = bytearray(victim.read_bytes())
    raw[0] ^= 1
    victim.write_bytes(bytes(raw))
    blocks, store = load_chain(tmp_path)
    assert not verify_chain(blocks, store)


# --- end to end --------------------------------------------------------------

def test_bsfl_run_rotation_and_chain(data):
    parts, val, test = data
    cfg = TopologyConfig("bsfl", 9, 3, 2, cycles=6, patience=None, batch_size=16, seed=3)
    led = Ledger()
    h = run_bsfl(cfg, SPEC, parts, val, test, ledger=led)
    comm = h.extras["committees"]
    assert len(comm) == len(h.rows) == len(led.blocks) == 6
    assert all(not set(a) & set(b) for a, b in zip(comm, comm[1:]))
    assert led.verify()
    kinds = [e.kind for e in led.blocks[0].events]
    assert kinds[0] == "AssignNodes" and kinds[-1] == "EvaluationPropose"
    assert kinds.count("ModelPropose") == 9


def test_bsfl_with_k_equal_i_matches_ssfl(data):
    parts, val, test = data
    cfg = TopologyConfig("bsfl", 9, 3, 2, cycles=3, patience=None, top_k=3, seed=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = run_bsfl(cfg, SPEC, parts, val, test)
    layouts = [a.shards for a in b.extras["assignments"]]
    s = run_ssfl(TopologyConfig("ssfl", 9, 3, 2, cycles=3, patience=None, seed=6), SPEC, parts, val, test,
                 layout=lambda t: layouts[t - 1])
    assert b.server_model.equals(s.server_model)
    assert b.client_model.equals(s.client_model)



def test_minority_voting_attack_is_inert_when_honest_evaluators_agree(data):
    parts, _, _ = data
    # every node holds the same slice, so honest evaluators give each shard one common score
    same = [parts[0]] * 15
    cfg = TopologyConfig("bsfl", 15, 5, 2, patience=None, top_k=2, batch_size=8, seed=2)
    a = Assignment(1, [(0, [5, 6]), (1, [7, 8]), (2, [9, 10]), (3, [11, 12]), (4, [13, 14])])
    plan = AttackPlan(0.1, 15, seed=0, modes={"malicious_vote"}, attacker_count=1)
    assert plan.malicious_ids <= set(a.committee)
    wc, ws = initial_models(SPEC, 2)
    voted = run_bsfl_cycle(1, a, ws, wc, SPEC, cfg, same, plan=plan)
    honest = run_bsfl_cycle(1, a, ws, wc, SPEC, cfg, same)
    assert voted.winners == honest.winners
    assert len(set(honest.final.values())) == 5
