"""Synchronous anonymous-network engine pieces: topologies, adversaries, delivery.

Node indices exist only so that arrays can be addressed.  Protocol code sees
nothing but the multiset of payloads its current neighbours broadcast, in a
canonical (sorted) order that carries no information about who sent what.

Oblivious adversaries are pure functions of ``(seed, round)``; their
generators are compiled with numba so the simulation kernel can call them
directly.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numba import njit

__all__ = [
    "Topology",
    "AdversarySpec",
    "ADVERSARY_KINDS",
    "TopologyError",
    "build_gadget_g1",
    "build_gadget_g2",
    "build_cycle_of_gadgets",
    "build_static",
    "next_topology",
    "deliver",
    "substream",
]

BLACK = "black"
WHITE = "white"


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    """One round's undirected, connected edge set."""

    n: int
    edges: tuple[tuple[int, int], ...]
    roles: tuple[str, ...] | None = None

    def __post_init__(self):
        norm = sorted({(min(u, v), max(u, v)) for u, v in self.edges})
        object.__setattr__(self, "edges", tuple((int(u), int(v)) for u, v in norm))
        if self.roles is not None:
            object.__setattr__(self, "roles", tuple(self.roles))
        self.validate()

    def validate(self) -> None:
        if self.n < 2:
            raise TopologyError(f"need at least 2 nodes, got {self.n}")
        for u, v in self.edges:
            if u == v:
                raise TopologyError(f"self-loop at {u}")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise TopologyError(f"edge ({u},{v}) outside 0..{self.n - 1}")
        if self.roles is not None:
            if len(self.roles) != self.n:
                raise TopologyError("roles length does not match n")
            if any(r not in (BLACK, WHITE) for r in self.roles):
                raise TopologyError(f"unknown role in {self.roles}")
        if not self.is_connected():
            raise TopologyError("topology is disconnected")

    def neighbors(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            nb[u].append(v)
            nb[v].append(u)
        return nb

    def degrees(self) -> list[int]:
        return [len(x) for x in self.neighbors()]

    def is_connected(self) -> bool:
        nb = self.neighbors()
        seen = {0}
        todo = deque([0])
        while todo:
            u = todo.popleft()
            for v in nb[u]:
                if v not in seen:
                    seen.add(v)
                    todo.append(v)
        return len(seen) == self.n

    def adjacency_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded neighbour lists ``adj[v, :deg[v]]`` as used by the kernel."""
        adj = np.zeros((self.n, self.n), dtype=np.int64)
        deg = np.zeros(self.n, dtype=np.int64)
        for v, row in enumerate(self.neighbors()):
            deg[v] = len(row)
            adj[v, : len(row)] = row
        return adj, deg

    def to_json(self) -> dict:
        out: dict[str, Any] = {"n": self.n, "edges": [list(e) for e in self.edges]}
        out["roles"] = list(self.roles) if self.roles is not None else None
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Topology":
        return cls(int(obj["n"]), tuple(tuple(e) for e in obj["edges"]), obj.get("roles"))


# ---------------------------------------------------------------------------
# fixtures


def _roles(blacks: int, n: int) -> tuple[str, ...]:
    return tuple(BLACK if i < blacks else WHITE for i in range(n))


def build_gadget_g1(lam: int) -> Topology:
    """``lam`` black nodes joined to every one of four whites; whites form two pairs.

    Blacks are nodes ``0..lam-1``; whites ``lam..lam+3``.
    """
    if lam < 1:
        raise ValueError("lambda must be >= 1")
    w = [lam + i for i in range(4)]
    edges = [(b, x) for b in range(lam) for x in w]
    edges += [(w[0], w[1]), (w[2], w[3])]
    return Topology(lam + 4, tuple(edges), _roles(lam, lam + 4))


def build_gadget_g2(lam: int) -> Topology:
    """Two groups of ``lam`` blacks and four white pairs.

    Group one is wired to the first white of every pair, group two to the
    second, so each node sees the same neighbourhood as in
    :func:`build_gadget_g1` with the same ``lam``.
    """
    if lam < 1:
        raise ValueError("lambda must be >= 1")
    first = [2 * lam + 2 * i for i in range(4)]
    second = [2 * lam + 2 * i + 1 for i in range(4)]
    edges = [(b, x) for b in range(lam) for x in first]
    edges += [(lam + b, x) for b in range(lam) for x in second]
    edges += list(zip(first, second))
    n = 2 * lam + 8
    return Topology(n, tuple(edges), _roles(2 * lam, n))


def build_cycle_of_gadgets(x: int, ell_per_gadget: int, whites_per_gadget: int | None = None) -> Topology:
    """Join ``x`` caterpillar gadgets so that all white nodes lie on one cycle.

    With ``ell_per_gadget > 0`` a gadget is a path of that many whites, each
    carrying one pendant black.  With ``ell_per_gadget == 0`` a gadget is a
    plain path of ``whites_per_gadget`` whites and the result is a cycle.
    Whites are numbered first, in cycle order; the pendant of white ``i`` is
    node ``W + i``.
    """
    if x < 1 or ell_per_gadget < 0:
        raise ValueError("need x >= 1 and ell_per_gadget >= 0")
    if ell_per_gadget == 0:
        if not whites_per_gadget or whites_per_gadget < 1:
            raise ValueError("whites_per_gadget is required when ell_per_gadget == 0")
        W, blacks = x * whites_per_gadget, 0
    else:
        W, blacks = x * ell_per_gadget, x * ell_per_gadget
    n = W + blacks
    edges = [(i, (i + 1) % W) for i in range(W)] if W > 1 else []
    edges += [(i, W + i) for i in range(blacks)]
    roles = tuple([WHITE] * W + [BLACK] * blacks)
    return Topology(n, tuple(edges), roles)


def build_static(kind: str, n: int) -> Topology:
    if n < 2:
        raise TopologyError(f"need at least 2 nodes, got {n}")
    if kind == "static_path":
        edges = [(i, i + 1) for i in range(n - 1)]
    elif kind == "static_star":
        edges = [(0, i) for i in range(1, n)]
    elif kind == "static_cycle":
        edges = [(i, (i + 1) % n) for i in range(n)]
    else:
        raise ValueError(f"not a static kind: {kind}")
    return Topology(n, tuple(edges))


# ---------------------------------------------------------------------------
# randomness


def substream(master: int, tag: str, *indices: int) -> int:
    """Derive a 64-bit seed from ``(master, tag, indices)`` via BLAKE2b."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(master).to_bytes(8, "little", signed=False))
    h.update(tag.encode())
    for i in indices:
        h.update(b"|")
        h.update(int(i).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


@njit(cache=True)
def splitmix64(x):
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _round_state(seed, rnd):
    return splitmix64(np.uint64(seed) ^ splitmix64(np.uint64(rnd)))


@njit(cache=True)
def _below(s, m):
    # next draw and an integer in [0, m)
    s = splitmix64(s)
    return s, np.int64(s % np.uint64(m))


@njit(cache=True)
def _add_edge(adj, deg, u, v):
    adj[u, deg[u]] = v
    deg[u] += 1
    adj[v, deg[v]] = u
    deg[v] += 1


@njit(cache=True)
def _prufer_tree(n, s, adj, deg):
    if n == 2:
        _add_edge(adj, deg, 0, 1)
        return s
    code = np.empty(n - 2, dtype=np.int64)
    left = np.ones(n, dtype=np.int64)
    for i in range(n - 2):
        s, code[i] = _below(s, n)
        left[code[i]] += 1
    for i in range(n - 2):
        leaf = 0
        while left[leaf] != 1:
            leaf += 1
        a = code[i]
        _add_edge(adj, deg, leaf, a)
        left[leaf] -= 1
        left[a] -= 1
    u = -1
    for j in range(n):
        if left[j] == 1:
            if u < 0:
                u = j
            else:
                _add_edge(adj, deg, u, j)
                break
    return s


KIND_FIXED = 0
KIND_RANDOM_CONNECTED = 1
KIND_PERMUTED_PATH = 2
KIND_RANDOM_TREE = 3


@njit(cache=True)
def fill_topology(kind, n, seed, rnd, fixed_adj, fixed_deg, adj, deg):
    """Write round ``rnd``'s neighbour lists into ``adj``/``deg``."""
    if kind == KIND_FIXED:
        for v in range(n):
            deg[v] = fixed_deg[v]
            for i in range(fixed_deg[v]):
                adj[v, i] = fixed_adj[v, i]
        return
    for v in range(n):
        deg[v] = 0
    s = _round_state(seed, rnd)
    if kind == KIND_PERMUTED_PATH:
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            s, j = _below(s, i + 1)
            t = perm[i]
            perm[i] = perm[j]
            perm[j] = t
        for i in range(n - 1):
            _add_edge(adj, deg, perm[i], perm[i + 1])
        return
    s = _prufer_tree(n, s, adj, deg)
    if kind == KIND_RANDOM_CONNECTED:
        for u in range(n):
            for v in range(u + 1, n):
                present = False
                for i in range(deg[u]):
                    if adj[u, i] == v:
                        present = True
                if not present:
                    s = splitmix64(s)
                    if s >> np.uint64(63):
                        _add_edge(adj, deg, u, v)


# ---------------------------------------------------------------------------
# adversaries

ADVERSARY_KINDS = (
    "static_path",
    "static_star",
    "static_cycle",
    "random_connected",
    "permuted_path",
    "random_tree",
    "gadget_cycle",
    "adaptive_hook",
    "fixed",
)

_RANDOM_KINDS = {
    "random_connected": KIND_RANDOM_CONNECTED,
    "permuted_path": KIND_PERMUTED_PATH,
    "random_tree": KIND_RANDOM_TREE,
}


@dataclass(frozen=True)
class AdversarySpec:
    """Which topology sequence the adversary plays.

    ``params`` per kind: ``gadget_cycle`` takes ``x``, ``ell_per_gadget`` and
    optionally ``whites_per_gadget``; ``fixed`` takes ``topology`` (a
    :class:`Topology` or its JSON form); ``adaptive_hook`` takes ``hook``, a
    callable ``hook(round, trace) -> Topology`` that sees the full public
    history.
    """

    kind: str
    seed: int = 0
    params: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if self.kind not in ADVERSARY_KINDS:
            raise ValueError(f"unknown adversary kind {self.kind!r}; expected one of {ADVERSARY_KINDS}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.kind == "adaptive_hook" and not callable(self.params.get("hook")):
            raise ValueError("adaptive_hook needs a callable 'hook' parameter")

    @property
    def oblivious(self) -> bool:
        return self.kind != "adaptive_hook"

    @property
    def static(self) -> bool:
        return self.kind not in _RANDOM_KINDS and self.kind != "adaptive_hook"

    def static_topology(self, n: int | None) -> Topology:
        """The single topology played by a static kind."""
        if self.kind in ("static_path", "static_star", "static_cycle"):
            if n is None:
                raise ValueError(f"{self.kind} needs n")
            return build_static(self.kind, n)
        if self.kind == "gadget_cycle":
            p = self.params
            return build_cycle_of_gadgets(int(p["x"]), int(p["ell_per_gadget"]), p.get("whites_per_gadget"))
        if self.kind == "fixed":
            t = self.params["topology"]
            return t if isinstance(t, Topology) else Topology.from_json(t)
        raise ValueError(f"{self.kind} is not static")

    def node_count(self, n: int | None) -> int:
        if self.kind in ("gadget_cycle", "fixed"):
            m = self.static_topology(None).n
            if n is not None and n != m:
                raise ValueError(f"{self.kind} topology has {m} nodes but n={n} was requested")
            return m
        if n is None:
            raise ValueError(f"{self.kind} needs n")
        return n

    def max_degree(self, n: int) -> int:
        """An upper bound on any node's degree in any round."""
        if self.static:
            return max(self.static_topology(n).degrees())
        if self.kind == "permuted_path":
            return min(2, n - 1)
        return n - 1

    def kernel_args(self, n: int) -> tuple[int, int, np.ndarray, np.ndarray]:
        """``(kind code, seed, fixed_adj, fixed_deg)`` for :func:`fill_topology`."""
        if self.static:
            adj, deg = self.static_topology(n).adjacency_arrays()
            return KIND_FIXED, 0, adj, deg
        if self.kind == "adaptive_hook":
            raise ValueError("adaptive adversaries run only in the reference engine")
        return _RANDOM_KINDS[self.kind], int(self.seed), np.zeros((n, n), np.int64), np.zeros(n, np.int64)

    def to_json(self) -> dict:
        params = {}
        for key, val in self.params.items():
            if key == "hook":
                params[key] = getattr(val, "__qualname__", repr(val))
            elif isinstance(val, Topology):
                params[key] = val.to_json()
            else:
                params[key] = val
        return {"kind": self.kind, "seed": int(self.seed), "params": params}

    @classmethod
    def from_json(cls, obj: dict) -> "AdversarySpec":
        return cls(obj["kind"], int(obj.get("seed", 0)), dict(obj.get("params", {})))


def _topology_from_arrays(n: int, adj: np.ndarray, deg: np.ndarray) -> Topology:
    edges = {(min(v, int(adj[v, i])), max(v, int(adj[v, i]))) for v in range(n) for i in range(int(deg[v]))}
    return Topology(n, tuple(edges))


def next_topology(adv: AdversarySpec, round: int, trace: Any = None, n: int | None = None) -> Topology:
    """The topology the adversary plays in ``round`` (1-based)."""
    if round < 1:
        raise ValueError("rounds are numbered from 1")
    if adv.kind == "adaptive_hook":
        topo = adv.params["hook"](round, trace)
        if not isinstance(topo, Topology):
            raise TopologyError("adaptive hook must return a Topology")
        if n is not None and topo.n != n:
            raise TopologyError(f"adaptive hook returned {topo.n} nodes, expected {n}")
        return topo
    if adv.static:
        return adv.static_topology(n)
    if n is None:
        raise ValueError(f"{adv.kind} needs n")
    kind, seed, fadj, fdeg = adv.kernel_args(n)
    adj = np.zeros((n, n), np.int64)
    deg = np.zeros(n, np.int64)
    fill_topology(kind, n, np.uint64(seed), np.uint64(round), fadj, fdeg, adj, deg)
    return _topology_from_arrays(n, adj, deg)


def deliver(
    topology: Topology,
    outgoing: Sequence[Any],
    key: Callable[[Any], Any] | None = None,
) -> list[tuple]:
    """Hand every node the multiset of its neighbours' payloads.

    Inboxes are tuples in sorted order so iteration is deterministic and
    independent of node labels.
    """
    if len(outgoing) != topology.n:
        raise ValueError(f"expected {topology.n} payloads, got {len(outgoing)}")
    return [tuple(sorted((outgoing[u] for u in nb), key=key)) for nb in topology.neighbors()]
