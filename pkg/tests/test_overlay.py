import logging

import pytest
from hypothesis import given, settings, strategies as st

from bdfl import cli
from bdfl.overlay import (JoinError, Overlay, RoutingUnavailable, check_overlay, check_snapshot,
                          circular_distance, compute_coordinates, expected_edges)
from oracles import linear_argmin, random_overlay_sequence


def _build(n, L=3, prefix="c"):
    ov = Overlay(L)
    ids = [f"{prefix}{i:03d}" for i in range(n)]
    for i, cid in enumerate(ids):
        ov.join_network(cid, f"addr-{cid}", ids[0] if i else None)
    return ov, ids


def test_coordinates_are_deterministic_and_in_range():
    a = compute_coordinates("10.0.0.1:9000", 3)
    assert a == compute_coordinates("10.0.0.1:9000", 3)
    assert len(a) == 3 and all(0.0 <= x < 1.0 for x in a)
    assert a != compute_coordinates("10.0.0.2:9000", 3)
    with pytest.raises(ValueError):
        compute_coordinates("", 3)
    with pytest.raises(ValueError):
        compute_coordinates("x", 0)


def test_circular_distance_wraps():
    assert circular_distance(0.05, 0.95) == pytest.approx(0.1)
    assert circular_distance(0.2, 0.2) == 0.0
    assert circular_distance(0.0, 0.5) == 0.5


@pytest.mark.parametrize("L", [1, 2, 3])
def test_hundred_joins_match_sort_oracle(L):
    ov, ids = _build(100, L)
    assert check_overlay(ov) == []
    coords = {c: ov.nodes[c].coordinate for c in ids}
    for i in range(L):
        assert ov.ring_order(i)[0] == min(ids, key=lambda c: (coords[c][i], c))
        assert ov.ring_order(i) == sorted(ids, key=lambda c: (coords[c][i], c))
    assert ov.edges() == expected_edges(coords, L)
    assert max(ov.degree(c) for c in ids) <= 2 * L


def test_greedy_route_matches_brute_force_argmin():
    ov, ids = _build(50, 3)
    for k in range(200):
        ring, target = k % 3, (k * 0.6180339887) % 1.0
        start = ids[(7 * k) % 50]
        assert ov.greedy_route(ring, target, start).client == linear_argmin(ov, ring, target)


def test_greedy_route_rejects_bad_input():
    ov, ids = _build(3, 2)
    with pytest.raises(ValueError):
        ov.greedy_route(2, 0.5, ids[0])
    with pytest.raises(RoutingUnavailable):
        Overlay(2).greedy_route(0, 0.5, "x")
    ov.fail(ids[1])
    with pytest.raises(RoutingUnavailable):
        ov.greedy_route(0, 0.5, ids[1])


def test_join_then_leave_restores_overlay():
    ov, ids = _build(30, 3)
    before = ov.snapshot()
    ov.join_network("newbie", "addr-newbie", ids[5])
    assert check_overlay(ov) == []
    ov.leave_network("newbie")
    assert ov.snapshot() == before


def test_single_and_pair_overlays():
    ov = Overlay(2)
    assert ov.join_network("a", "addr-a") == []
    assert ov.degree("a") == 0
    assert ov.join_network("b", "addr-b", "a") == ["a"]
    assert ov.neighbors("a") == ["b"]
    ov.join_network("c", "addr-c", "b")
    assert check_overlay(ov) == []
    assert all(ov.degree(x) == 2 for x in "abc")
    ov.leave_network("b")
    assert ov.neighbors("a") == ["c"] and check_overlay(ov) == []


def test_join_errors_leave_overlay_untouched():
    ov, ids = _build(5, 2)
    before = ov.snapshot()
    with pytest.raises(JoinError):
        ov.join_network(ids[0], "other-addr", ids[1])
    with pytest.raises(JoinError):
        ov.join_network("z", "addr-z", None)
    ov.fail(ids[2])
    with pytest.raises(JoinError):
        ov.join_network("z", "addr-z", ids[2])
    assert "z" not in ov
    assert ov.snapshot() == before


def test_unknown_leave_warns(caplog):
    ov, _ = _build(3)
    with caplog.at_level(logging.WARNING):
        ov.leave_network("ghost")
    assert any("ghost" in w for w in ov.warnings)
    assert "ghost" in caplog.text


def test_failure_repaired_within_miss_limit():
    ov, ids = _build(20, 3)
    victim = ids[7]
    neighbors = ov.neighbors(victim)
    ov.fail(victim)
    repaired_at = None
    for now in range(1, 10):
        ov.send_heartbeats(now)
        events = ov.maintenance_round(now)
        if events:
            assert {e.failed for e in events} == {victim}
            assert {e.detector for e in events} <= set(neighbors)
            repaired_at = now
            break
    assert repaired_at is not None and repaired_at <= ov.miss_limit * ov.heartbeat_period
    assert victim not in ov and check_overlay(ov) == []


def test_two_adjacent_failures_are_both_repaired():
    ov, _ = _build(20, 1)
    order = ov.ring_order(0)
    ov.fail(order[3])
    ov.fail(order[4])
    for now in range(1, 12):
        ov.send_heartbeats(now)
        ov.maintenance_round(now)
    assert order[3] not in ov and order[4] not in ov
    assert check_overlay(ov) == []


def test_live_neighbors_are_not_evicted():
    ov, ids = _build(10, 2)
    for now in range(1, 20):
        ov.send_heartbeats(now)
        assert ov.maintenance_round(now) == []
    assert len(ov) == 10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), L=st.integers(1, 3), size=st.integers(2, 40))
def test_random_membership_keeps_invariants(seed, L, size):
    assert random_overlay_sequence(seed, L, size, 3 * size, check_each=True) == []


def test_snapshot_roundtrip_and_cli(tmp_path):
    ov, _ = _build(25, 3)
    snap = tmp_path / "topo.txt"
    ov.export_edge_list(snap)
    assert check_snapshot(snap) == []
    assert cli.main(["topology-check", "--snapshot", str(snap)]) == 0

    lines = snap.read_text().splitlines()
    edges = [ln for ln in lines if not ln.startswith("#")]
    tampered = tmp_path / "bad.txt"
    tampered.write_text("\n".join(lines[:len(lines) - len(edges)] + edges[1:]) + "\n")
    assert check_snapshot(tampered)
    assert cli.main(["topology-check", "--snapshot", str(tampered)]) == 1


def test_snapshot_detects_forged_coordinate(tmp_path):
    ov, ids = _build(4, 1)
    snap = tmp_path / "topo.txt"
    ov.export_edge_list(snap)
    text = snap.read_text().replace(repr(ov.nodes[ids[0]].coordinate[0]), "0.5", 1)
    snap.write_text(text)
    assert any("address hash" in p for p in check_snapshot(snap))
