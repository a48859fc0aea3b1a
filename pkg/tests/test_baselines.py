import numpy as np
import pytest

from plexsim.baselines import (
    FlRoundResult,
    GossipNode,
    OnePeerExponential,
    dpsgd_round,
    fl_round,
    gl_merge,
    make_regular_topology,
    one_peer_exp_neighbor,
    uniform_selector,
)
from plexsim.core import GossipModel, Metric, ModelParameters, Send, SetTimer
from plexsim.simnet import Engine, LatencyMatrix

from conftest import make_membership
from oracles import mean_by_loop


def flat(*vals):
    return ModelParameters(np.array(vals, dtype=np.float64))


# -------------------------------------------------------------- topologies --


def test_regular_topology_is_regular_connected_and_symmetric():
    topo = make_regular_topology(20, 10, seed=4)
    assert topo.degree == 10
    for i, neigh in enumerate(topo.adjacency):
        assert len(neigh) == 10
        assert len(set(neigh)) == 10
        assert i not in neigh
        assert all(i in topo.adjacency[j] for j in neigh)
        assert list(neigh) == sorted(neigh)
    # Same seed, same graph; different seed, different graph (usually).
    assert make_regular_topology(20, 10, seed=4).adjacency == topo.adjacency
    assert make_regular_topology(20, 10, seed=5).adjacency != topo.adjacency


def test_regular_topology_neighbors_constant_over_rounds():
    topo = make_regular_topology(12, 4, seed=0)
    assert topo.out_neighbors(3, 1) == topo.out_neighbors(3, 99) == topo.in_neighbors(3, 7)


def test_regular_topology_validation():
    with pytest.raises(ValueError, match="degree"):
        make_regular_topology(10, 10, seed=0)
    with pytest.raises(ValueError, match="even"):
        make_regular_topology(5, 3, seed=0)


def test_one_peer_offsets_cycle_through_powers_of_two():
    # n=8: cycle length ceil(log2 8) = 3, offsets 1, 2, 4, repeating.
    assert [one_peer_exp_neighbor(0, k, 8) for k in (1, 2, 3, 4)] == [1, 2, 4, 1]
    assert one_peer_exp_neighbor(7, 1, 8) == 0  # wraps around the ring
    # n=5: offsets still 1, 2, 4 (cycle ceil(log2 5) = 3).
    assert [one_peer_exp_neighbor(0, k, 5) for k in (1, 2, 3)] == [1, 2, 4]


def test_one_peer_is_a_permutation_each_round():
    topo = OnePeerExponential(10)
    for k in (1, 2, 3, 4, 5):
        outs = [topo.out_neighbors(i, k)[0] for i in range(10)]
        assert sorted(outs) == list(range(10))
        for i in range(10):
            j = topo.out_neighbors(i, k)[0]
            assert topo.in_neighbors(j, k) == (i,)


def test_one_peer_validation():
    with pytest.raises(ValueError):
        one_peer_exp_neighbor(0, 1, 1)
    with pytest.raises(ValueError):
        one_peer_exp_neighbor(0, 0, 8)


# ---------------------------------------------------------------- fedavg fl --


def fl_membership():
    # Arrival times by hand for a dim-10 model (96 bytes):
    #   n000: 96/96 + 1 + 96/96   = 3 s
    #   n001: 96/48 + 1 + 96/48   = 5 s
    #   n002: 96/24 + 1 + 96/24   = 9 s
    return make_membership(
        3, uplink=[96.0, 48.0, 24.0], downlink=[96.0, 48.0, 24.0], step=1.0
    )


def fixed_select(*ids):
    return lambda k, s: tuple(ids)


def test_fl_round_full_participation_timing_and_bytes():
    m = fl_membership()
    model = ModelParameters(np.zeros(10))
    res = fl_round(
        model,
        m,
        k=1,
        s=3,
        sf=1.0,
        select_fn=fixed_select("n000", "n001", "n002"),
        train_fn=lambda nid, k, theta: theta.with_values(theta.values + 1.0),
        compute_seconds=lambda nid: 1.0,
    )
    assert res.duration_s == pytest.approx(9.0)
    assert res.bytes == 2 * 3 * 96
    assert res.train_seconds == pytest.approx(3.0)
    assert res.aggregated == 3 and res.late == 0
    assert np.array_equal(res.model.values, np.ones(10))


def test_fl_round_threshold_drops_stragglers_but_charges_them():
    m = fl_membership()
    model = ModelParameters(np.zeros(10))
    contributions = {"n000": 3.0, "n001": 6.0, "n002": 100.0}
    res = fl_round(
        model,
        m,
        k=1,
        s=3,
        sf=2 / 3,
        select_fn=fixed_select("n000", "n001", "n002"),
        train_fn=lambda nid, k, theta: theta.with_values(theta.values + contributions[nid]),
        compute_seconds=lambda nid: 1.0,
    )
    # Fires at the 2nd fastest upload; the slowest still used bandwidth
    # and compute but its model is excluded from the average.
    assert res.duration_s == pytest.approx(5.0)
    assert res.aggregated == 2 and res.late == 1
    assert res.bytes == 2 * 3 * 96
    assert res.train_seconds == pytest.approx(3.0)
    want = mean_by_loop([np.full(10, 3.0), np.full(10, 6.0)])
    assert np.array_equal(res.model.values, want)


def test_fl_round_threshold_follows_actual_selection_size():
    m = fl_membership()
    res = fl_round(
        ModelParameters(np.zeros(10)),
        m,
        k=1,
        s=5,
        sf=0.5,
        select_fn=fixed_select("n000", "n001", "n002"),  # only 3 showed up
        train_fn=lambda nid, k, theta: theta,
        compute_seconds=lambda nid: 1.0,
    )
    assert res.aggregated == 1  # floor(3 * 0.5)
    assert res.late == 2


def test_fl_round_requires_candidates():
    m = fl_membership()
    with pytest.raises(ValueError, match="no candidates"):
        fl_round(
            ModelParameters(np.zeros(10)),
            m,
            k=1,
            s=3,
            sf=1.0,
            select_fn=lambda k, s: (),
            train_fn=lambda nid, k, theta: theta,
            compute_seconds=lambda nid: 1.0,
        )


def test_uniform_selector_draws_without_replacement():
    m = make_membership(20)
    select = uniform_selector(m, np.random.default_rng(0))
    seen = set()
    for k in range(200):
        draw = select(k, 5)
        assert len(draw) == 5
        assert len(set(draw)) == 5
        seen.update(draw)
    assert seen == set(m.nodes)  # every node eventually sampled


# ------------------------------------------------------------------ dpsgd --


def k3_topology():
    # Complete graph on 3 nodes is the 2-regular graph.
    return make_regular_topology(3, 2, seed=0)


def test_dpsgd_mixing_on_complete_graph_reaches_consensus():
    m = make_membership(3, uplink=96.0, downlink=96.0, step=1.0)
    models = [flat(0.0), flat(3.0), flat(6.0)]
    res = dpsgd_round(
        models,
        m,
        k3_topology(),
        k=1,
        latency=LatencyMatrix.zero(),
        train_fn=lambda i, k, theta: theta,
        compute_seconds=[1.0, 1.0, 1.0],
    )
    for mixed in res.models:
        assert np.array_equal(mixed.values, [3.0])  # mean of 0, 3, 6
    # Everyone ships 2 models of 24 bytes (dim 1).
    assert res.bytes == 3 * 2 * 24
    assert res.train_seconds == pytest.approx(3.0)


def test_dpsgd_duration_uniform_hand_case():
    # K3, dim-10 model (96 B), uplink 96 B/s: each node uploads 2 copies
    # in 2 s after 1 s of compute -> out_done 3. Downlink 192 B/s takes
    # 1 s for both arrivals after the earliest sender finished at 1 s:
    # the receive bound max(3, 1 + 1) = 3. Duration 3.
    m = make_membership(3, uplink=96.0, downlink=192.0, step=1.0)
    models = [ModelParameters(np.zeros(10)) for _ in range(3)]
    res = dpsgd_round(
        models,
        m,
        k3_topology(),
        k=1,
        latency=LatencyMatrix.zero(),
        train_fn=lambda i, k, theta: theta,
        compute_seconds=[1.0, 1.0, 1.0],
    )
    assert res.duration_s == pytest.approx(3.0)


def test_dpsgd_duration_heterogeneous_two_nodes():
    # One-peer on n=2 always pairs 0 and 1. Node 0: compute 2 s then a
    # 96 B model at 48 B/s -> send done at 4 s. Node 1: compute 1 s, 96 B
    # at 96 B/s -> send done at 2 s. No latency; wide downlinks. The round
    # must wait for the slowest leg: 4 s.
    m = make_membership(2, uplink=[48.0, 96.0], downlink=[9600.0, 9600.0])
    models = [ModelParameters(np.zeros(10)), ModelParameters(np.zeros(10))]
    res = dpsgd_round(
        models,
        m,
        OnePeerExponential(2),
        k=1,
        latency=LatencyMatrix.zero(),
        train_fn=lambda i, k, theta: theta,
        compute_seconds=[2.0, 1.0],
    )
    assert res.duration_s == pytest.approx(4.0)
    assert res.bytes == 2 * 96


def test_dpsgd_latency_delays_arrivals():
    m = make_membership(2, uplink=96.0, downlink=9600.0, cities=2)
    lat = LatencyMatrix(("a", "b"), np.array([[0.0, 100.0], [100.0, 0.0]]))
    res = dpsgd_round(
        [ModelParameters(np.zeros(10)), ModelParameters(np.zeros(10))],
        m,
        OnePeerExponential(2),
        k=1,
        latency=lat,
        train_fn=lambda i, k, theta: theta,
        compute_seconds=[1.0, 1.0],
    )
    # send done at 2 s, plus 50 ms one-way.
    assert res.duration_s == pytest.approx(2.05)


def test_dpsgd_one_peer_mixes_pairwise_and_keeps_age():
    m = make_membership(4, uplink=9600.0, downlink=9600.0)
    models = [ModelParameters(np.array([float(i)]), age=i) for i in range(4)]
    res = dpsgd_round(
        models,
        m,
        OnePeerExponential(4),
        k=1,  # offset 1: i receives from i-1
        latency=LatencyMatrix.zero(),
        train_fn=lambda i, k, theta: theta,
        compute_seconds=[0.0] * 4,
    )
    for i in range(4):
        want = (models[i].values + models[(i - 1) % 4].values) / 2.0
        assert np.array_equal(res.models[i].values, want)
        assert res.models[i].age == models[i].age


def test_dpsgd_round_varies_with_one_peer_round_number():
    m = make_membership(4, uplink=9600.0, downlink=9600.0)
    models = [ModelParameters(np.array([float(i)])) for i in range(4)]
    r1 = dpsgd_round(
        models, m, OnePeerExponential(4), k=1, latency=LatencyMatrix.zero(),
        train_fn=lambda i, k, theta: theta, compute_seconds=[0.0] * 4,
    )
    r2 = dpsgd_round(
        models, m, OnePeerExponential(4), k=2, latency=LatencyMatrix.zero(),
        train_fn=lambda i, k, theta: theta, compute_seconds=[0.0] * 4,
    )
    assert not all(
        np.array_equal(a.values, b.values) for a, b in zip(r1.models, r2.models)
    )


# ---------------------------------------------------------------- gossip --


def test_gl_merge_age_weighted():
    merged = gl_merge(flat(0.0).with_values(np.array([0.0]), age=1),
                      flat(4.0).with_values(np.array([4.0]), age=3))
    assert np.array_equal(merged.values, [3.0])
    assert merged.age == 3


def test_gl_merge_zero_ages_plain_mean():
    merged = gl_merge(flat(1.0), flat(3.0))
    assert np.array_equal(merged.values, [2.0])
    assert merged.age == 0


def test_gl_merge_one_sided_age():
    left = ModelParameters(np.array([5.0]), age=2)
    right = ModelParameters(np.array([9.0]), age=0)
    merged = gl_merge(left, right)
    assert np.array_equal(merged.values, [5.0])  # weight 0 silences right
    assert merged.age == 2


def test_gl_merge_dim_mismatch():
    with pytest.raises(ValueError, match="heterogeneous"):
        gl_merge(flat(1.0), flat(1.0, 2.0))


def gossip_node(me, m, timeout=60.0, compute=1.0, seed=0, model=None):
    return GossipNode(
        me,
        m,
        model=model or flat(0.0),
        timeout_s=timeout,
        train_fn=lambda theta: theta.with_values(theta.values + 1.0, age=theta.age + 5),
        compute_seconds=compute,
        peer_rng=np.random.default_rng(seed),
    )


def test_gossip_timer_sends_to_a_random_other_node():
    m = make_membership(6)
    node = gossip_node("n002", m)
    peers = set()
    for _ in range(300):
        effects = node.on_timer(0.0, "gossip")
        send, timer = effects
        assert isinstance(send, Send) and isinstance(timer, SetTimer)
        assert timer.delay == 60.0
        assert isinstance(send.msg, GossipModel)
        peers.add(send.dst)
    assert "n002" not in peers
    assert peers == set(m.nodes) - {"n002"}  # uniform support over others


def test_gossip_receive_merges_then_trains():
    m = make_membership(4)
    node = gossip_node("n000", m, compute=2.0, model=ModelParameters(np.array([1.0]), age=1))
    incoming = GossipModel(ModelParameters(np.array([5.0]), age=3), "n001")
    effects = node.on_message(0.0, "n001", incoming)
    assert node.merges == 1
    assert node.busy
    # Merge is committed before training: (1*1 + 3*5)/4 = 4.
    assert np.array_equal(node.model.values, [4.0])
    (comp,) = effects
    assert comp.duration == 2.0
    comp.continuation()
    assert not node.busy
    assert np.array_equal(node.model.values, [5.0])  # trained: +1
    assert node.model.age == 3 + 5


def test_gossip_busy_drop():
    m = make_membership(4)
    node = gossip_node("n000", m)
    node.on_message(0.0, "n001", GossipModel(flat(1.0), "n001"))
    effects = node.on_message(0.1, "n002", GossipModel(flat(9.0), "n002"))
    assert effects == [Metric("gl_busy_drop")]
    assert node.busy_drops == 1
    assert node.merges == 1


def test_gossip_rejects_foreign_messages():
    m = make_membership(4)
    node = gossip_node("n000", m)
    with pytest.raises(ValueError):
        node.on_message(0.0, "n001", "not a gossip message")


def run_gossip(n=4, timeout=10.0, compute=1.0, horizon=200.0, seed=1):
    m = make_membership(n, uplink=1e4, downlink=1e4)
    eng = Engine(m, LatencyMatrix.zero())
    nodes = {}
    stag = np.random.default_rng(seed)
    for i, nid in enumerate(m.nodes):
        nodes[nid] = gossip_node(nid, m, timeout=timeout, compute=compute, seed=seed + i)
        eng.register(nid, nodes[nid])
        eng.inject(0.0, nid, nodes[nid].initial_effects(float(stag.uniform(0, timeout))))
    eng.run(until=horizon)
    return eng, nodes


def test_gossip_engine_run_spreads_models():
    eng, nodes = run_gossip()
    assert sum(node.merges for node in nodes.values()) > 10
    assert all(node.model.age > 0 for node in nodes.values())
    assert eng.bytes_total > 0
    assert eng.bytes_total % 24 == 0  # dim-1 models only


def test_gossip_engine_busy_drops_under_pressure():
    # Training takes almost the whole gossip period, so concurrent
    # arrivals are common and must be dropped, not queued.
    eng, nodes = run_gossip(n=8, timeout=10.0, compute=9.5, horizon=500.0)
    assert eng.counters["gl_busy_drop"] > 0
    assert eng.counters["gl_busy_drop"] == sum(n.busy_drops for n in nodes.values())


def test_gossip_engine_is_deterministic():
    def fingerprint():
        _, nodes = run_gossip(seed=7)
        return {nid: (n.model.values.tobytes(), n.model.age, n.merges) for nid, n in nodes.items()}

    assert fingerprint() == fingerprint()
