"""L-ring overlay: each client sits in L virtual rings and keeps its two ring
adjacents per ring as overlay neighbors.

Ring order is by ``(coordinate, client_id)``, so duplicate coordinates are
ordered by id. The simulation owns a single :class:`Overlay`; all mutation
goes through the event loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .hashing import COORD_SALT, ring_coordinate

log = logging.getLogger(__name__)

HEARTBEAT_PERIOD = 1
MISS_LIMIT = 3


class RoutingUnavailable(RuntimeError):
    pass


class JoinError(RuntimeError):
    pass


def compute_coordinates(address: str, L: int, salt: str = COORD_SALT) -> tuple[float, ...]:
    if L < 1:
        raise ValueError("L must be >= 1")
    if not address:
        raise ValueError("address must be nonempty")
    return tuple(ring_coordinate(address, i, salt) for i in range(L))


def circular_distance(a: float, b: float) -> float:
    d = abs(a - b)
    return min(d, 1.0 - d)


def _cw_between(a, x, b) -> bool:
    """True when key ``x`` lies strictly inside the clockwise arc from ``a`` to ``b``."""
    if a == b:
        return x != a
    if a < b:
        return a < x < b
    return x > a or x < b


@dataclass
class NeighborEntry:
    peer_id: str
    address: str
    coordinate: tuple[float, ...]
    last_fingerprint: str | None = None
    last_heartbeat: int = 0


@dataclass
class Node:
    peer_id: str
    address: str
    coordinate: tuple[float, ...]
    pred: list[str]
    succ: list[str]
    neighbors: dict[str, NeighborEntry] = field(default_factory=dict)
    alive: bool = True

    def key(self, ring):
        return (self.coordinate[ring], self.peer_id)


class Route(NamedTuple):
    client: str
    hops: int


@dataclass(frozen=True)
class RepairEvent:
    time: int
    detector: str
    failed: str


@dataclass(frozen=True)
class OverlayGraph:
    rings: tuple[tuple[str, ...], ...]
    edges: frozenset[frozenset[str]]


class Overlay:
    def __init__(self, L: int = 3, salt: str = COORD_SALT,
                 heartbeat_period: int = HEARTBEAT_PERIOD, miss_limit: int = MISS_LIMIT):
        if L < 1:
            raise ValueError("L must be >= 1")
        self.L = L
        self.salt = salt
        self.heartbeat_period = heartbeat_period
        self.miss_limit = miss_limit
        self.nodes: dict[str, Node] = {}
        self.warnings: list[str] = []

    # -- queries --------------------------------------------------------

    def __contains__(self, cid):
        return cid in self.nodes

    def __len__(self):
        return len(self.nodes)

    def live(self, cid) -> bool:
        node = self.nodes.get(cid)
        return node is not None and node.alive

    def neighbors(self, cid) -> list[str]:
        return sorted(self.nodes[cid].neighbors)

    def degree(self, cid) -> int:
        return len(self.nodes[cid].neighbors)

    def ring_order(self, ring: int) -> list[str]:
        """Walk successor pointers starting from the smallest key."""
        if not self.nodes:
            return []
        start = min(self.nodes.values(), key=lambda n: n.key(ring)).peer_id
        order = [start]
        cur = self.nodes[start].succ[ring]
        while cur != start:
            order.append(cur)
            if len(order) > len(self.nodes):
                raise AssertionError(f"ring {ring} does not close")
            cur = self.nodes[cur].succ[ring]
        return order

    def edges(self) -> set[frozenset[str]]:
        out = set()
        for n in self.nodes.values():
            for m in n.neighbors:
                out.add(frozenset((n.peer_id, m)))
        return out

    def snapshot(self) -> OverlayGraph:
        return OverlayGraph(tuple(tuple(self.ring_order(i)) for i in range(self.L)),
                            frozenset(self.edges()))

    # -- routing --------------------------------------------------------

    def greedy_route(self, ring: int, target: float, start: str) -> Route:
        """Greedy walk toward ``target`` in ring ``ring`` over overlay links.

        Each hop strictly lowers ``(circular distance, id)``, so the walk ends
        and never revisits a client.
        """
        if not 0 <= ring < self.L:
            raise ValueError(f"ring {ring} out of range")
        if not self.nodes:
            raise RoutingUnavailable("empty ring")
        if not self.live(start):
            raise RoutingUnavailable(f"start client {start!r} is not live")

        def score(cid):
            return (circular_distance(self.nodes[cid].coordinate[ring], target), cid)

        cur, hops = start, 0
        while True:
            node = self.nodes[cur]
            cands = set(node.neighbors) | {node.pred[ring], node.succ[ring]}
            cands = [c for c in cands if self.live(c)]
            best = min(cands, key=score, default=cur)
            if score(best) >= score(cur):
                return Route(cur, hops)
            cur = best
            hops += 1

    # -- membership -----------------------------------------------------

    def join_network(self, u: str, address: str, bootstrap: str | None = None,
                     now: int = 0) -> list[str]:
        if u in self.nodes:
            raise JoinError(f"client {u!r} already present")
        coord = compute_coordinates(address, self.L, self.salt)
        if bootstrap is None:
            if self.nodes:
                raise JoinError("a bootstrap client is required to join a non-empty overlay")
            self.nodes[u] = Node(u, address, coord, [u] * self.L, [u] * self.L)
            return []
        if not self.live(bootstrap):
            raise JoinError(f"bootstrap {bootstrap!r} unreachable")

        # resolve every insertion point before mutating anything
        plan = []
        for i in range(self.L):
            w = self.greedy_route(i, coord[i], bootstrap).client
            ukey = (coord[i], u)
            # w brackets u with one of its adjacents; the walk only moves when a
            # crashed, not yet repaired client blocked the greedy path
            for _ in range(len(self.nodes)):
                wn = self.nodes[w]
                s, p = wn.succ[i], wn.pred[i]
                if _cw_between(wn.key(i), ukey, self.nodes[s].key(i)):
                    plan.append((w, s))
                    break
                if _cw_between(self.nodes[p].key(i), ukey, wn.key(i)):
                    plan.append((p, w))
                    break
                fwd = circular_distance(self.nodes[s].coordinate[i], coord[i])
                back = circular_distance(self.nodes[p].coordinate[i], coord[i])
                w = s if fwd < back else p
            else:
                raise AssertionError(f"ring {i} has no insertion point")

        node = Node(u, address, coord, [None] * self.L, [None] * self.L)
        self.nodes[u] = node
        touched = {u}
        for i, (p, s) in enumerate(plan):
            node.pred[i], node.succ[i] = p, s
            self.nodes[p].succ[i] = u
            self.nodes[s].pred[i] = u
            touched.update((p, s))
        self._refresh(touched, now)
        return self.neighbors(u)

    def leave_network(self, u: str, now: int = 0) -> None:
        if u not in self.nodes:
            msg = f"leave for unknown client {u!r} ignored"
            log.warning(msg)
            self.warnings.append(msg)
            return
        node = self.nodes[u]
        touched = set()
        for i in range(self.L):
            p, s = node.pred[i], node.succ[i]
            if p == u:
                continue
            self.nodes[p].succ[i] = s
            self.nodes[s].pred[i] = p
            touched.update((p, s))
        del self.nodes[u]
        touched.discard(u)
        self._refresh(touched, now)

    def fail(self, u: str) -> None:
        """Crash ``u`` silently; neighbors notice through missed heartbeats."""
        self.nodes[u].alive = False

    def _refresh(self, cids, now):
        for cid in cids:
            node = self.nodes.get(cid)
            if node is None:
                continue
            want = {x for i in range(self.L) for x in (node.pred[i], node.succ[i])} - {cid}
            for gone in set(node.neighbors) - want:
                del node.neighbors[gone]
            for new in want - set(node.neighbors):
                peer = self.nodes[new]
                node.neighbors[new] = NeighborEntry(new, peer.address, peer.coordinate,
                                                    last_heartbeat=now)

    # -- maintenance ----------------------------------------------------

    def send_heartbeats(self, now: int) -> None:
        for cid in sorted(self.nodes):
            node = self.nodes[cid]
            if not node.alive:
                continue
            for m in node.neighbors:
                entry = self.nodes[m].neighbors.get(cid)
                if entry is not None:
                    entry.last_heartbeat = now

    def heartbeat_maintenance(self, u: str, now: int) -> list[RepairEvent]:
        node = self.nodes.get(u)
        if node is None or not node.alive:
            return []
        limit = self.miss_limit * self.heartbeat_period
        events = []
        for m in sorted(node.neighbors):
            entry = node.neighbors.get(m)
            if entry is None:
                continue  # spliced away by an earlier repair in this pass
            if now - entry.last_heartbeat >= limit:
                events.append(RepairEvent(now, u, m))
                self.leave_network(m, now)
        return events

    def maintenance_round(self, now: int) -> list[RepairEvent]:
        events = []
        for cid in sorted(self.nodes):
            if cid in self.nodes:
                events.extend(self.heartbeat_maintenance(cid, now))
        return events

    # -- snapshots ------------------------------------------------------

    def export_edge_list(self, path) -> None:
        lines = [f"# L {self.L}", f"# salt {self.salt}"]
        for cid in sorted(self.nodes):
            n = self.nodes[cid]
            lines.append(f"# node {cid} {n.address} " + " ".join(repr(c) for c in n.coordinate))
        for e in sorted(tuple(sorted(e)) for e in self.edges()):
            lines.append(f"{e[0]} {e[1]}")
        Path(path).write_text("\n".join(lines) + "\n")


def expected_edges(coords: dict[str, tuple[float, ...]], L: int) -> set[frozenset[str]]:
    """Edges implied by sorting every ring; the full-sort oracle."""
    edges = set()
    for i in range(L):
        order = sorted(coords, key=lambda c: (coords[c][i], c))
        n = len(order)
        for k in range(n):
            a, b = order[k], order[(k + 1) % n]
            if a != b:
                edges.add(frozenset((a, b)))
    return edges


def check_overlay(ov: Overlay) -> list[str]:
    """Return invariant violations for a live overlay (empty when healthy)."""
    problems = []
    coords = {c: n.coordinate for c, n in ov.nodes.items()}
    for i in range(ov.L):
        try:
            order = ov.ring_order(i)
        except AssertionError as exc:
            problems.append(str(exc))
            continue
        want = sorted(coords, key=lambda c: (coords[c][i], c))
        if order != want:
            problems.append(f"ring {i} is not coordinate-sorted")
        for cid in order:
            n = ov.nodes[cid]
            if ov.nodes[n.succ[i]].pred[i] != cid:
                problems.append(f"ring {i}: pred/succ mismatch at {cid}")
    for cid, n in ov.nodes.items():
        if len(n.neighbors) > 2 * ov.L:
            problems.append(f"{cid} has degree {len(n.neighbors)} > {2 * ov.L}")
        for m in n.neighbors:
            if cid not in ov.nodes[m].neighbors:
                problems.append(f"asymmetric link {cid} -> {m}")
    if ov.edges() != expected_edges(coords, ov.L):
        problems.append("edge set differs from the sorted-ring oracle")
    return problems


def check_snapshot(path) -> list[str]:
    """Validate an exported edge-list snapshot against the sorted-ring oracle."""
    L, salt = None, COORD_SALT
    coords, addresses, edges = {}, {}, set()
    problems = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "#":
            if parts[1] == "L":
                L = int(parts[2])
            elif parts[1] == "salt":
                salt = parts[2]
            elif parts[1] == "node":
                coords[parts[2]] = tuple(float(x) for x in parts[4:])
                addresses[parts[2]] = parts[3]
            continue
        if len(parts) != 2:
            problems.append(f"line {lineno}: expected 'u v'")
            continue
        if parts[0] == parts[1]:
            problems.append(f"line {lineno}: self loop")
        edges.add(frozenset(parts))
    if L is None:
        return problems + ["missing '# L' header"]
    for cid, c in coords.items():
        if len(c) != L:
            problems.append(f"{cid}: coordinate has {len(c)} entries, expected {L}")
        elif c != compute_coordinates(addresses[cid], L, salt):
            problems.append(f"{cid}: coordinate does not match its address hash")
    for e in edges:
        for x in e:
            if x not in coords:
                problems.append(f"edge endpoint {x} has no node record")
    degree = {}
    for e in edges:
        for x in e:
            degree[x] = degree.get(x, 0) + 1
    for cid, d in degree.items():
        if d > 2 * L:
            problems.append(f"{cid} has degree {d} > {2 * L}")
    if not problems and edges != expected_edges(coords, L):
        problems.append("edge set differs from the sorted-ring oracle")
    return problems
