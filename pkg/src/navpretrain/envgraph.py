"""Navigation environments as undirected weighted graphs with panoramic views.

Headings are measured clockwise from north (+y), so a neighbor due east of a
node sits at heading pi/2.  Every geodesic quantity is summed with
``math.fsum`` so that results do not depend on traversal direction.
"""

from __future__ import annotations

import base64
import heapq
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path as FsPath
from typing import Iterable, Sequence

import numpy as np

ENV_SCHEMA_VERSION = 1
SCHEMA_FILE = FsPath(__file__).parent / "schemas" / "environment.schema.json"


class GraphError(ValueError):
    """Raised for malformed graphs or references to unknown nodes."""


def bearing(src_pos, dst_pos) -> float:
    """Heading from ``src_pos`` to ``dst_pos`` in [0, 2*pi), clockwise from +y."""
    dx = float(dst_pos[0]) - float(src_pos[0])
    dy = float(dst_pos[1]) - float(src_pos[1])
    return math.atan2(dx, dy) % (2 * math.pi)


def orientation_feature(heading: float, elevation: float) -> np.ndarray:
    return np.array([math.sin(heading), math.cos(heading), math.sin(elevation), math.cos(elevation)])


def default_elevations(n_elev: int) -> np.ndarray:
    if n_elev == 1:
        return np.zeros(1)
    # -30, 0, +30 degrees for the usual three rows
    return np.linspace(-math.pi / 6, math.pi / 6, n_elev)


@dataclass(frozen=True)
class Panorama:
    features: np.ndarray  # [n_elev * n_head, d_app], row = elev_idx * n_head + head_idx
    n_elev: int = 3
    n_head: int = 12

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.n_elev * self.n_head:
            raise GraphError(
                f"panorama needs {self.n_elev * self.n_head} views, got shape {feats.shape}"
            )
        if not np.all(np.isfinite(feats)):
            raise GraphError("panorama features must be finite")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def n_views(self) -> int:
        return self.n_elev * self.n_head

    @property
    def d_app(self) -> int:
        return self.features.shape[1]

    def heading(self, view_index: int) -> float:
        return (view_index % self.n_head) * 2 * math.pi / self.n_head

    def elevation(self, view_index: int) -> float:
        return float(default_elevations(self.n_elev)[view_index // self.n_head])

    def sector(self, heading: float) -> int:
        """Index of the heading column whose 2*pi/n_head sector contains ``heading``."""
        width = 2 * math.pi / self.n_head
        return int(math.floor((heading % (2 * math.pi)) / width + 0.5)) % self.n_head

    def horizon_view(self, heading: float) -> int:
        """View index at zero elevation facing ``heading``."""
        return (self.n_elev // 2) * self.n_head + self.sector(heading)


@dataclass(frozen=True)
class NodeRecord:
    node_id: str
    position: tuple[float, float]
    panorama: Panorama
    room: str | None = None
    objects: tuple[str, ...] = ()
    object_headings: tuple[float, ...] = ()  # bearing of each own object from the node

    def __post_init__(self):
        pos = tuple(float(p) for p in self.position)
        if len(pos) != 2 or not all(math.isfinite(p) for p in pos):
            raise GraphError(f"node {self.node_id}: position must be a finite 2-vector")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "object_headings", tuple(float(h) for h in self.object_headings))
        if self.object_headings and len(self.object_headings) != len(self.objects):
            raise GraphError(f"node {self.node_id}: one heading per object required")


@dataclass(frozen=True)
class ActionCandidate:
    """One navigable direction (or STOP) from the agent's current node."""

    target: str | None  # None for STOP
    heading: float  # absolute heading towards the neighbor
    view_index: int  # panorama view facing the neighbor, -1 for STOP
    feature: np.ndarray | None  # [d_app + 4]; None for STOP (learned vector)

    @property
    def is_stop(self) -> bool:
        return self.target is None


@dataclass(frozen=True)
class Path:
    env_id: str
    node_ids: tuple[str, ...]
    disconnected_ok: bool = False

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        if not self.node_ids:
            raise GraphError("a path needs at least one node")

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.node_ids) - 1

    @property
    def first(self) -> str:
        return self.node_ids[0]

    @property
    def last(self) -> str:
        return self.node_ids[-1]


@dataclass(frozen=True, eq=False)
class EnvironmentGraph:
    """Immutable environment.  Edge weights are Euclidean node distances."""

    env_id: str
    nodes: tuple[NodeRecord, ...]
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        ids = [n.node_id for n in nodes]
        if len(set(ids)) != len(ids):
            raise GraphError(f"{self.env_id}: duplicate node ids")
        known = set(ids)
        canon = set()
        for a, b in self.edges:
            if a == b:
                raise GraphError(f"{self.env_id}: self-loop at {a}")
            if a not in known or b not in known:
                raise GraphError(f"{self.env_id}: edge ({a}, {b}) references unknown node")
            canon.add(tuple(sorted((a, b))))
        object.__setattr__(self, "edges", frozenset(canon))
        for a, b in canon:
            if self.weight(a, b) <= 0:
                raise GraphError(f"{self.env_id}: edge ({a}, {b}) has zero length")
        if not self.is_connected():
            raise GraphError(f"{self.env_id}: graph is not connected")

    # -- lookup -----------------------------------------------------------
    @cached_property
    def _by_id(self) -> dict[str, NodeRecord]:
        return {n.node_id: n for n in self.nodes}

    @cached_property
    def index(self) -> dict[str, int]:
        return {n.node_id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def adjacency(self) -> dict[str, tuple[str, ...]]:
        adj: dict[str, list[str]] = {n.node_id: [] for n in self.nodes}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return {k: tuple(sorted(v)) for k, v in adj.items()}

    def node(self, node_id: str) -> NodeRecord:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise GraphError(f"{self.env_id}: unknown node {node_id!r}") from None

    @property
    def node_ids(self) -> list[str]:
        return [n.node_id for n in self.nodes]

    def neighbors(self, node_id: str) -> tuple[str, ...]:
        self.node(node_id)
        return self.adjacency[node_id]

    def has_edge(self, a: str, b: str) -> bool:
        return tuple(sorted((a, b))) in self.edges

    def weight(self, a: str, b: str) -> float:
        pa, pb = self.node(a).position, self.node(b).position
        return math.hypot(pb[0] - pa[0], pb[1] - pa[1])

    def is_connected(self) -> bool:
        if not self.nodes:
            return False
        adj: dict[str, set[str]] = {n.node_id: set() for n in self.nodes}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        start = self.nodes[0].node_id
        seen, stack = {start}, [start]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.nodes)

    # -- geodesics --------------------------------------------------------
    def _dijkstra(self, source: str) -> dict[str, tuple[str, ...]]:
        """Shortest paths from ``source``; equal-cost ties go to the lexicographically
        smaller node-id sequence."""
        best: dict[str, tuple[str, ...]] = {}
        heap = [(0.0, (source,))]
        while heap:
            dist, seq = heapq.heappop(heap)
            node = seq[-1]
            if node in best:
                continue
            best[node] = seq
            for nb in self.adjacency[node]:
                if nb not in best:
                    heapq.heappush(heap, (dist + self.weight(node, nb), seq + (nb,)))
        return best

    @cached_property
    def _all_paths(self) -> dict[str, dict[str, tuple[str, ...]]]:
        return {n.node_id: self._dijkstra(n.node_id) for n in self.nodes}

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        n = len(self.nodes)
        out = np.zeros((n, n))
        for i, a in enumerate(self.node_ids):
            for j, b in enumerate(self.node_ids):
                out[i, j] = self._seq_length(self._all_paths[a][b]) if i != j else 0.0
        out.setflags(write=False)
        return out

    def _seq_length(self, seq: Sequence[str]) -> float:
        return math.fsum(self.weight(a, b) for a, b in zip(seq, seq[1:]))

    def shortest_path(self, a: str, b: str) -> Path:
        self.node(a)
        self.node(b)
        return Path(self.env_id, self._all_paths[a][b])

    def geodesic_distance(self, a: str, b: str) -> float:
        self.node(a)
        self.node(b)
        return float(self.distance_matrix[self.index[a], self.index[b]])

    def next_hop(self, current: str, goal: str) -> str | None:
        """First node after ``current`` on the shortest path to ``goal`` (None if there)."""
        seq = self.shortest_path(current, goal).node_ids
        return seq[1] if len(seq) > 1 else None

    def path_length(self, path: Path) -> float:
        if path.env_id != self.env_id:
            raise GraphError(f"path from {path.env_id} measured in {self.env_id}")
        seq = path.node_ids
        for node_id in seq:
            self.node(node_id)
        if not path.disconnected_ok:
            for a, b in zip(seq, seq[1:]):
                if not self.has_edge(a, b):
                    raise GraphError(f"{self.env_id}: ({a}, {b}) is not an edge")
        return self._seq_length(seq)

    def validate_path(self, path: Path) -> None:
        self.path_length(path)

    # -- observations -----------------------------------------------------
    def view_features(self, node_id: str, view_index: int) -> np.ndarray:
        pano = self.node(node_id).panorama
        if not 0 <= view_index < pano.n_views:
            raise GraphError(f"view index {view_index} out of range")
        return np.concatenate(
            [pano.features[view_index], orientation_feature(pano.heading(view_index), pano.elevation(view_index))]
        )

    def panorama_matrix(self, node_id: str) -> np.ndarray:
        """All views of a node with orientation suffix, [n_views, d_app + 4]."""
        return self._panorama_tensor[self.index[self.node(node_id).node_id]]

    @cached_property
    def _panorama_tensor(self) -> np.ndarray:
        mats = []
        for node in self.nodes:
            pano = node.panorama
            orient = np.stack(
                [orientation_feature(pano.heading(i), pano.elevation(i)) for i in range(pano.n_views)]
            )
            mats.append(np.concatenate([pano.features, orient], axis=1))
        out = np.stack(mats)
        out.setflags(write=False)
        return out

    @property
    def panorama_tensor(self) -> np.ndarray:
        """[n_nodes, n_views, d_app + 4] in node order."""
        return self._panorama_tensor

    def navigable_actions(self, node_id: str, agent_heading: float) -> list[ActionCandidate]:
        """Neighbors in node-id order, each seen through the horizon view facing it,
        with orientation relative to ``agent_heading``; STOP last."""
        node = self.node(node_id)
        out = []
        for nb in self.adjacency[node_id]:
            head = bearing(node.position, self.node(nb).position)
            view = node.panorama.horizon_view(head)
            feat = np.concatenate(
                [node.panorama.features[view], orientation_feature(head - agent_heading, 0.0)]
            )
            out.append(ActionCandidate(nb, head, view, feat))
        out.append(ActionCandidate(None, agent_heading, -1, None))
        return out

    # -- serialization ----------------------------------------------------
    def to_dict(self, encoding: str = "list") -> dict:
        nodes = []
        for n in self.nodes:
            feats = n.panorama.features
            if encoding == "base64":
                data = base64.b64encode(feats.astype("<f8").tobytes()).decode("ascii")
            else:
                data = feats.tolist()
            rec = {
                "id": n.node_id,
                "pos": list(n.position),
                "panorama": {
                    "features": data,
                    "n_elev": n.panorama.n_elev,
                    "n_head": n.panorama.n_head,
                    "d_app": n.panorama.d_app,
                },
            }
            if n.room is not None:
                rec["room"] = n.room
            if n.objects:
                rec["objects"] = list(n.objects)
            if n.object_headings:
                rec["object_headings"] = list(n.object_headings)
            nodes.append(rec)
        return {
            "schema_version": ENV_SCHEMA_VERSION,
            "env_id": self.env_id,
            "nodes": nodes,
            "edges": [list(e) for e in sorted(self.edges)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EnvironmentGraph":
        try:
            nodes = []
            for rec in doc["nodes"]:
                p = rec["panorama"]
                n_elev, n_head, d_app = int(p["n_elev"]), int(p["n_head"]), int(p["d_app"])
                raw = p["features"]
                if isinstance(raw, str):
                    feats = np.frombuffer(base64.b64decode(raw), dtype="<f8").astype(np.float64)
                    feats = feats.reshape(n_elev * n_head, d_app)
                else:
                    feats = np.asarray(raw, dtype=np.float64)
                nodes.append(
                    NodeRecord(
                        rec["id"],
                        tuple(rec["pos"]),
                        Panorama(feats, n_elev, n_head),
                        rec.get("room"),
                        tuple(rec.get("objects", ())),
                        tuple(rec.get("object_headings", ())),
                    )
                )
            edges = frozenset(tuple(e) for e in doc["edges"])
            return cls(doc["env_id"], tuple(nodes), edges)
        except (KeyError, TypeError) as exc:
            raise GraphError(f"malformed environment document: {exc!r}") from exc


def save_environments(envs: Iterable[EnvironmentGraph], fp) -> None:
    json.dump([e.to_dict() for e in envs], fp, sort_keys=True)


def load_environments(fp) -> list[EnvironmentGraph]:
    return [EnvironmentGraph.from_dict(d) for d in json.load(fp)]


def make_graph(env_id: str, positions: dict, edges: Iterable, d_app: int = 1, n_elev: int = 1,
               n_head: int = 12) -> EnvironmentGraph:
    """Small helper for hand-built graphs with blank panoramas."""
    nodes = tuple(
        NodeRecord(nid, tuple(pos), Panorama(np.zeros((n_elev * n_head, d_app)), n_elev, n_head))
        for nid, pos in positions.items()
    )
    return EnvironmentGraph(env_id, nodes, frozenset(tuple(e) for e in edges))
