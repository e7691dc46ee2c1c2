"""Top-m highest-log-weight paths through the layered expert graph.

A path picks one expert per layer; its log weight is the sum of the node
log-importances along it plus the edge log-transition-intensities between
consecutive picks.  The DP keeps, at every expert node of a layer, the m best
prefix paths ending there, extends them across each edge, and finally merges
the last layer's queues into the global top-m.  Ordering everywhere is
(log_weight descending, expert sequence lexicographically ascending), which
is preserved by extension, so DP output matches exhaustive enumeration
exactly, ties included.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .errors import InvariantError
from .numerics import Rng
from .scoring import LayerScore, SampleGraph, clamped_log, transition_intensity

BRUTEFORCE_CAP = 10**6


@dataclass(frozen=True)
class PrefixPath:
    experts: tuple[int, ...]
    log_weight: float

    def sort_key(self) -> tuple[float, tuple[int, ...]]:
        return (-self.log_weight, self.experts)


@dataclass
class PathSet:
    m: int
    paths: list[PrefixPath]

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "paths": [
                {"experts": list(p.experts), "log_weight": p.log_weight}
                for p in self.paths
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PathSet":
        return cls(
            m=int(obj["m"]),
            paths=[
                PrefixPath(tuple(int(i) for i in p["experts"]), float(p["log_weight"]))
                for p in obj["paths"]
            ],
        )


def path_log_weight(graph: SampleGraph, experts) -> float:
    """Sum of node log-importances plus edge log-intensities along the path.

    Accumulated in layer order, edge before node, exactly like the DP's
    prefix extension, so both routes produce bit-identical weights and ties
    resolve the same way."""
    experts = list(experts)
    if len(experts) != graph.num_layers:
        raise ValueError(
            f"path has {len(experts)} entries, graph has {graph.num_layers} layers"
        )
    n = graph.experts_per_layer
    if any(not (0 <= i < n) for i in experts):
        raise ValueError("expert index out of range")
    total = float(graph.log_node[0][experts[0]])
    for l in range(1, graph.num_layers):
        total = total + graph.log_edge[l - 1][experts[l - 1]][experts[l]] + graph.log_node[l][experts[l]]
    return float(total)


def _dp_queues(graph: SampleGraph, m: int) -> list[list[list[PrefixPath]]]:
    """Per-layer, per-node queues of at most m best prefixes (sorted)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    n = graph.experts_per_layer
    queues = [[PrefixPath((i,), float(graph.log_node[0][i]))] for i in range(n)]
    all_queues = [queues]
    for l in range(1, graph.num_layers):
        edge = graph.log_edge[l - 1]
        node = graph.log_node[l]
        nxt = []
        for j in range(n):
            candidates = [
                PrefixPath(p.experts + (j,), float(p.log_weight + edge[i][j] + node[j]))
                for i in range(n)
                for p in queues[i]
            ]
            candidates.sort(key=PrefixPath.sort_key)
            nxt.append(candidates[:m])
        queues = nxt
        all_queues.append(queues)
    return all_queues


def top_m_paths_dp(graph: SampleGraph, m: int) -> PathSet:
    queues = _dp_queues(graph, m)[-1]
    merged = [p for q in queues for p in q]
    merged.sort(key=PrefixPath.sort_key)
    return PathSet(m=m, paths=merged[:m])


def top_m_paths_bruteforce(graph: SampleGraph, m: int, cap: int = BRUTEFORCE_CAP) -> PathSet:
    """Score every expert sequence; only usable when N_e^L fits under cap."""
    if m < 1:
        raise ValueError("m must be >= 1")
    n = graph.experts_per_layer
    total = n**graph.num_layers
    if total > cap:
        raise InvariantError(f"brute force over {total} paths exceeds the cap of {cap}")
    paths = [
        PrefixPath(seq, path_log_weight(graph, seq))
        for seq in itertools.product(range(n), repeat=graph.num_layers)
    ]
    paths.sort(key=PrefixPath.sort_key)
    return PathSet(m=m, paths=paths[:m])


def random_sample_graph(num_layers: int, experts_per_layer: int, rng: Rng) -> SampleGraph:
    """Synthetic graph with rank-1 transitions, for oracle checks."""
    n = experts_per_layer
    scores = []
    for _ in range(num_layers):
        activation = np.array([rng.uniform(0.0, 2.0) for _ in range(n)])
        routing = np.array([rng.uniform(0.05, 1.0) for _ in range(n)])
        routing = routing / routing.sum()
        importance = np.array([rng.uniform(0.01, 1.0) for _ in range(n)])
        scores.append(LayerScore(activation, routing, np.zeros(n), importance))
    transitions = [
        transition_intensity(scores[l].activation, scores[l + 1].routing)
        for l in range(num_layers - 1)
    ]
    log_node = np.stack([clamped_log(s.importance) for s in scores])
    log_edge = np.stack([clamped_log(t) for t in transitions])
    return SampleGraph(num_layers, n, scores, transitions, log_node, log_edge)


def oracle_selfcheck(trials: int, seed: int, tol: float = 1e-9) -> tuple[int, list[str]]:
    """DP-vs-brute-force equivalence over random graphs with L in 2..5 and
    N_e in 2..4, at m in {1, 3, 10, N_e^L}.  Returns (passes, mismatches)."""
    rng = Rng(seed)
    passes = 0
    mismatches: list[str] = []
    for t in range(trials):
        L = 2 + rng.randrange(4)
        n = 2 + rng.randrange(3)
        graph = random_sample_graph(L, n, rng)
        ok = True
        for m in (1, 3, 10, n**L):
            dp = top_m_paths_dp(graph, m)
            bf = top_m_paths_bruteforce(graph, m)
            if [p.experts for p in dp.paths] != [p.experts for p in bf.paths]:
                mismatches.append(f"trial {t}: expert sequences differ at m={m} (L={L}, N_e={n})")
                ok = False
                continue
            worst = max(
                (abs(a.log_weight - b.log_weight) for a, b in zip(dp.paths, bf.paths)),
                default=0.0,
            )
            if worst > tol:
                mismatches.append(
                    f"trial {t}: log weights differ by {worst:.3e} at m={m} (L={L}, N_e={n})"
                )
                ok = False
        if ok:
            passes += 1
    return passes, mismatches


def save_pathset(pathset: PathSet, path) -> None:
    with open(path, "w") as f:
        json.dump(pathset.to_json(), f, indent=2)
        f.write("\n")


def load_pathset(path) -> PathSet:
    with open(path) as f:
        return PathSet.from_json(json.load(f))
