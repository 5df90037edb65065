#!/usr/bin/env python3
"""
MSVL Toolkit — Cross-Spectral Graph Topologies (ring / full / jumper-N)
"""
from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import networkx as nx
import numpy as np

from utils.errors import FormatError, RejectedInputError
from utils.io import read_json, write_json

logger = logging.getLogger(__name__)

Edge = Tuple[int, int]


class TopologyKind(Enum):
    RING = "ring"
    FULL = "full"
    JUMPER = "jumper"

    @classmethod
    def parse(cls, kind: Union[str, "TopologyKind"]) -> "TopologyKind":
        if isinstance(kind, cls):
            return kind
        for k in cls:
            if k.value == str(kind).lower():
                return k
        raise RejectedInputError(f"Unknown topology kind {kind!r} (expected ring, full or jumper)")


@dataclass(frozen=True)
class GraphTopology:
    node_count: int
    kind: TopologyKind
    edges: Tuple[Edge, ...]
    step: Optional[int] = None
    include_ring: bool = False

    @property
    def label(self) -> str:
        if self.kind is not TopologyKind.JUMPER:
            return self.kind.value
        return f"jumper-{self.step}" + ("+ring" if self.include_ring else "")

    def neighbors(self, i: int) -> List[int]:
        return sorted({b for a, b in self.edges if a == i} | {a for a, b in self.edges if b == i})

    def degrees(self) -> List[int]:
        deg = [0] * self.node_count
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def adjacency_mask(self, self_loops: bool = True) -> np.ndarray:
        mask = np.zeros((self.node_count, self.node_count), dtype=bool)
        for a, b in self.edges:
            mask[a, b] = mask[b, a] = True
        if self_loops:
            np.fill_diagonal(mask, True)
        return mask

    def to_graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.node_count))
        g.add_edges_from(self.edges)
        return g


@dataclass(frozen=True)
class GraphStats:
    degree_histogram: Dict[int, int]
    component_count: int
    component_sizes: Tuple[int, ...]
    diameters: Tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "degree_histogram": {str(k): v for k, v in sorted(self.degree_histogram.items())},
            "connected_component_count": self.component_count,
            "component_sizes": list(self.component_sizes),
            "diameters": list(self.diameters),
        }


def _canonical(pairs) -> Tuple[Edge, ...]:
    return tuple(sorted({(min(a, b), max(a, b)) for a, b in pairs if a != b}))


def build_topology(
    kind: Union[str, TopologyKind],
    node_count: int = 24,
    step: Optional[int] = None,
    include_ring: bool = False,
) -> GraphTopology:
    """Ring: i~i+1. Full: all pairs. Jumper: chords i~i+N (mod V), optionally with the ring."""
    kind = TopologyKind.parse(kind)
    if node_count < 2:
        raise RejectedInputError(f"A topology needs at least 2 nodes, got {node_count}")
    v = node_count
    ring = [(i, (i + 1) % v) for i in range(v)]

    if kind is TopologyKind.RING:
        edges = _canonical(ring)
        step, include_ring = None, False
    elif kind is TopologyKind.FULL:
        edges = tuple((a, b) for a in range(v) for b in range(a + 1, v))
        step, include_ring = None, False
    else:
        if step is None:
            raise RejectedInputError("A jumper topology needs a step N")
        if not 1 <= step < v:
            raise RejectedInputError(f"Jumper step must satisfy 1 <= N < {v}, got {step}")
        chords = [(i, (i + step) % v) for i in range(v)]
        edges = _canonical(chords + (ring if include_ring else []))

    topology = GraphTopology(node_count=v, kind=kind, edges=edges, step=step, include_ring=bool(include_ring))
    logger.debug("Built %s topology: %d nodes, %d edges", topology.label, v, len(edges))
    return topology


def analyze(g: GraphTopology) -> GraphStats:
    graph = g.to_graph()
    components = sorted((sorted(c) for c in nx.connected_components(graph)), key=lambda c: c[0])
    diameters = tuple(
        nx.diameter(graph.subgraph(c)) if len(c) > 1 else 0 for c in components
    )
    return GraphStats(
        degree_histogram=dict(Counter(g.degrees())),
        component_count=len(components),
        component_sizes=tuple(len(c) for c in components),
        diameters=diameters,
    )


# -------------------------------
# JSON
# -------------------------------
def topology_to_json(g: GraphTopology) -> dict:
    return {
        "v": g.node_count,
        "kind": g.kind.value,
        "step": g.step,
        "include_ring": g.include_ring,
        "edges": [list(e) for e in g.edges],
    }


def topology_from_json(payload: dict) -> GraphTopology:
    try:
        g = build_topology(
            payload["kind"],
            int(payload["v"]),
            step=payload.get("step"),
            include_ring=bool(payload.get("include_ring", False)),
        )
        edges = _canonical(tuple(e) for e in payload["edges"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed topology JSON: {e}") from e
    if edges != g.edges:
        raise FormatError(f"Topology edges do not match a {g.label} graph on {g.node_count} nodes")
    return g


def save_topology(path: Union[str, os.PathLike], g: GraphTopology) -> None:
    write_json(path, topology_to_json(g))


def load_topology(path: Union[str, os.PathLike]) -> GraphTopology:
    return topology_from_json(read_json(path))


def parse_label(label: str, node_count: int = 24) -> GraphTopology:
    """Inverse of `GraphTopology.label` (`ring`, `full`, `jumper-3`, `jumper-2+ring`)."""
    text = label.strip().lower()
    if text in ("ring", "full"):
        return build_topology(text, node_count)
    if text.startswith("jumper-"):
        body = text[len("jumper-"):]
        include_ring = body.endswith("+ring")
        body = body[: -len("+ring")] if include_ring else body
        try:
            step = int(body)
        except ValueError as e:
            raise RejectedInputError(f"Bad jumper label {label!r}") from e
        return build_topology("jumper", node_count, step=step, include_ring=include_ring)
    raise RejectedInputError(f"Unknown topology label {label!r}")
