"""Synthetic environments, reference paths, template instructions and corpora.

Room and object appearance embeddings come from a fixed "world" seed shared by
every environment, so a sofa looks like a sofa in unseen environments too.
Each node sees its own objects at their own bearings, plus the objects of its
graph neighbors in the direction of that neighbor.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .envgraph import (
    EnvironmentGraph,
    GraphError,
    NodeRecord,
    Panorama,
    Path,
    bearing,
)

DATASET_SCHEMA_VERSION = 1

ROOM_NAMES = (
    "kitchen", "bedroom", "bathroom", "hallway", "office", "lounge",
    "garage", "dining", "laundry", "closet", "study", "porch",
)
OBJECT_NAMES = (
    "sofa", "bed", "table", "lamp", "door", "plant", "stairs", "piano", "mirror", "fridge",
    "sink", "desk", "chair", "rug", "painting", "shelf", "tv", "bench", "window", "clock",
)

PROVENANCES = ("human_synth", "speaker_synth", "PS", "RW", "PR")
SPLITS = ("train", "val_seen", "val_unseen")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class GenParams:
    n_nodes: int = 25
    connect_radius: float = 3.0
    area_side: float = 12.0
    n_room_types: int = 12
    n_object_types: int = 20
    d_app: int = 64
    n_elev: int = 3
    n_head: int = 12
    noise_sigma: float = 0.1
    doorway_weight: float = 1.0  # neighbor's room seen in the sector facing it
    world_seed: int = 1234
    seed: int = 0
    noise_rate: float = 0.0

    def validate(self) -> None:
        if self.n_nodes < 2:
            raise DataError(f"n_nodes must be >= 2, got {self.n_nodes}")
        for name in ("connect_radius", "area_side", "n_room_types", "n_object_types", "d_app",
                     "n_elev", "n_head"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if self.n_room_types > len(ROOM_NAMES) or self.n_object_types > len(OBJECT_NAMES):
            raise DataError("not enough room/object names for requested vocabulary sizes")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise DataError("noise_rate must lie in [0, 1]")


def world_embeddings(params: GenParams) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Appearance embeddings of rooms and objects, identical across environments."""
    rng = np.random.default_rng([params.world_seed, params.d_app])
    rooms = {r: rng.normal(size=params.d_app) for r in ROOM_NAMES[: params.n_room_types]}
    objects = {o: rng.normal(size=params.d_app) for o in OBJECT_NAMES[: params.n_object_types]}
    return rooms, objects


def visible_objects(positions: dict, own: dict, adjacency: dict, node_id: str):
    """(object, bearing) pairs visible from ``node_id``: its own objects plus
    every neighbor's objects in the neighbor's direction."""
    out = list(own[node_id])
    for nb in adjacency[node_id]:
        head = bearing(positions[node_id], positions[nb])
        out.extend((name, head) for name, _ in own[nb])
    return out


def _components(n: int, edges: set) -> list[set[int]]:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        parent[find(a)] = find(b)
    groups: dict[int, set[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return list(groups.values())


def generate_environment(params: GenParams, env_id: str | None = None) -> EnvironmentGraph:
    params.validate()
    rng = np.random.default_rng(params.seed)
    n = params.n_nodes
    pos = rng.uniform(0.0, params.area_side, size=(n, 2))
    dist = np.hypot(pos[:, None, 0] - pos[None, :, 0], pos[:, None, 1] - pos[None, :, 1])
    edges = {(i, j) for i in range(n) for j in range(i + 1, n) if dist[i, j] <= params.connect_radius}
    comps = _components(n, edges)
    while len(comps) > 1:
        # join the globally closest pair of nodes lying in different components
        label = {i: k for k, comp in enumerate(comps) for i in comp}
        best = None
        for i in range(n):
            for j in range(i + 1, n):
                if label[i] != label[j] and (best is None or dist[i, j] < dist[best]):
                    best = (i, j)
        edges.add(best)
        comps = _components(n, edges)

    ids = [f"n{i:02d}" for i in range(n)]
    rooms = list(ROOM_NAMES[: params.n_room_types])
    objects = list(OBJECT_NAMES[: params.n_object_types])
    room_of = {ids[i]: rooms[rng.integers(len(rooms))] for i in range(n)}
    own = {}
    for i in range(n):
        k = int(rng.integers(1, 4))
        names = rng.choice(len(objects), size=k, replace=False)
        own[ids[i]] = [(objects[j], float(rng.uniform(0, 2 * math.pi))) for j in names]

    positions = {ids[i]: tuple(pos[i]) for i in range(n)}
    adjacency: dict[str, list[str]] = {nid: [] for nid in ids}
    for i, j in edges:
        adjacency[ids[i]].append(ids[j])
        adjacency[ids[j]].append(ids[i])
    room_emb, obj_emb = world_embeddings(params)
    horizon_row = params.n_elev // 2

    nodes = []
    for nid in ids:
        feats = np.tile(room_emb[room_of[nid]], (params.n_elev * params.n_head, 1))
        probe = Panorama(np.zeros((params.n_elev * params.n_head, 1)), params.n_elev, params.n_head)
        for name, head in visible_objects(positions, own, adjacency, nid):
            feats[horizon_row * params.n_head + probe.sector(head)] += obj_emb[name]
        for nb in adjacency[nid]:
            head = bearing(positions[nid], positions[nb])
            feats[horizon_row * params.n_head + probe.sector(head)] += params.doorway_weight * room_emb[room_of[nb]]
        feats = feats + rng.normal(scale=params.noise_sigma, size=feats.shape)
        nodes.append(
            NodeRecord(
                nid,
                positions[nid],
                Panorama(feats, params.n_elev, params.n_head),
                room_of[nid],
                tuple(name for name, _ in own[nid]),
                tuple(head for _, head in own[nid]),
            )
        )
    return EnvironmentGraph(
        env_id or f"env{params.seed}",
        tuple(nodes),
        frozenset((ids[i], ids[j]) for i, j in edges),
    )


def sample_reference_path(env: EnvironmentGraph, rng: np.random.Generator, min_edges: int = 4,
                          max_edges: int = 6, min_len: float = 5.0, retry_budget: int = 200) -> Path:
    """Shortest path between a random start/goal pair meeting the edge-count and
    length constraints."""
    ids = env.node_ids
    for _ in range(retry_budget):
        a, b = rng.choice(len(ids), size=2, replace=False)
        path = env.shortest_path(ids[a], ids[b])
        if min_edges <= path.n_edges <= max_edges and env.path_length(path) > min_len:
            return path
    raise DataError(
        f"{env.env_id}: no path with {min_edges}-{max_edges} edges longer than {min_len} "
        f"after {retry_budget} attempts"
    )


# -- instructions ---------------------------------------------------------------

@dataclass(frozen=True)
class Instruction:
    raw_tokens: tuple[str, ...]
    tokens: tuple[int, ...] = ()
    landmarks: tuple[str, ...] = ()
    corrupted: tuple[int, ...] = ()  # indices of corrupted clauses

    def __post_init__(self):
        if not self.raw_tokens:
            raise DataError("instruction must be non-empty")

    @property
    def text(self) -> str:
        return " ".join(self.raw_tokens)


def turn_direction(prev_heading: float, new_heading: float) -> str:
    delta = (new_heading - prev_heading + math.pi) % (2 * math.pi) - math.pi
    if abs(delta) <= math.pi / 4:
        return "straight"
    return "right" if delta > 0 else "left"


_TURN = {
    "left": (("turn", "left"), ("go", "left"), ("bear", "left")),
    "right": (("turn", "right"), ("go", "right"), ("bear", "right")),
    "straight": (("go", "straight"), ("walk", "forward"), ("continue", "ahead")),
}
_PASS_OBJECT = (("walk", "past", "the"), ("pass", "by", "the"), ("head", "toward", "the"))
_ENTER_ROOM = (("enter", "the"), ("go", "into", "the"), ("move", "through", "the"))
_STOP_OBJECT = (("stop", "at", "the"), ("wait", "near", "the"), ("halt", "beside", "the"))
_STOP_ROOM = (("stop", "in", "the"), ("wait", "inside", "the"), ("halt", "in", "the"))


@dataclass
class _Clause:
    direction: str
    verb_variant: int
    phrase_variant: int
    kind: str  # "object" | "room"
    landmark: str
    final: bool

    def tokens(self) -> list[str]:
        toks = list(_TURN[self.direction][self.verb_variant]) + ["and"]
        if self.final:
            table = _STOP_OBJECT if self.kind == "object" else _STOP_ROOM
        else:
            table = _PASS_OBJECT if self.kind == "object" else _ENTER_ROOM
        return toks + list(table[self.phrase_variant]) + [self.landmark]


def initial_heading(env: EnvironmentGraph, path: Path) -> float:
    """Default starting heading: facing the first reference-path neighbor."""
    if len(path) < 2:
        return 0.0
    return bearing(env.node(path.node_ids[0]).position, env.node(path.node_ids[1]).position)


def generate_instruction(env: EnvironmentGraph, path: Path, rng: np.random.Generator,
                         noise_rate: float = 0.0, start_heading: float | None = None) -> Instruction:
    """One clause per edge; corruption only touches middle clauses."""
    if path.n_edges < 1:
        raise DataError("cannot describe a path without edges")
    heading = initial_heading(env, path) if start_heading is None else start_heading
    clauses = []
    seq = path.node_ids
    for k, (a, b) in enumerate(zip(seq, seq[1:])):
        head = bearing(env.node(a).position, env.node(b).position)
        direction = turn_direction(heading, head)
        heading = head
        dest = env.node(b)
        if dest.objects and rng.random() < 0.6:
            kind, landmark = "object", dest.objects[int(rng.integers(len(dest.objects)))]
        else:
            kind, landmark = "room", dest.room or "room"
        clauses.append(_Clause(direction, int(rng.integers(3)), int(rng.integers(3)), kind, landmark,
                               k == len(seq) - 2))

    corrupted: list[int] = []
    if noise_rate > 0 and len(clauses) > 2:
        triggered = [i for i in range(1, len(clauses) - 1) if rng.random() < noise_rate]
        swappers, replacers = [], []
        for i in triggered:
            (swappers if rng.random() < 0.5 else replacers).append(i)
        while len(swappers) >= 2:
            i, j = swappers.pop(0), swappers.pop(0)
            if clauses[i].tokens() == clauses[j].tokens():
                replacers.extend((i, j))
                continue
            ci, cj = clauses[i], clauses[j]
            clauses[i], clauses[j] = cj, ci
        replacers.extend(swappers)
        rooms = sorted({n.room for n in env.nodes if n.room})
        objects = sorted({o for n in env.nodes for o in n.objects})
        for i in sorted(replacers):
            c = clauses[i]
            pool = [x for x in (objects if c.kind == "object" else rooms) if x != c.landmark]
            clauses[i] = _Clause(c.direction, c.verb_variant, c.phrase_variant, c.kind, pool[int(rng.integers(len(pool)))], c.final)
        corrupted = sorted(triggered)

    raw: list[str] = []
    for k, c in enumerate(clauses):
        if k:
            raw.append("then")
        raw.extend(c.tokens())
    return Instruction(tuple(raw), landmarks=tuple(c.landmark for c in clauses), corrupted=tuple(corrupted))


# -- vocabulary -----------------------------------------------------------------

OOV_TOKEN = "<unk>"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]  # id -> token; id 0 is OOV
    min_count: int = 5

    @property
    def oov_id(self) -> int:
        return 0

    @property
    def token_to_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, raw_tokens: Iterable[str]) -> tuple[int, ...]:
        table = self.token_to_id
        return tuple(table.get(t, 0) for t in raw_tokens)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256(json.dumps(list(self.tokens)).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "min_count": self.min_count, "vocab_hash": self.vocab_hash}

    @classmethod
    def from_dict(cls, doc: dict) -> "Vocabulary":
        vocab = cls(tuple(doc["tokens"]), int(doc.get("min_count", 5)))
        if "vocab_hash" in doc and doc["vocab_hash"] != vocab.vocab_hash:
            raise DataError("vocabulary file hash does not match its token list")
        return vocab


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    counts = Counter(tok for toks in corpus for tok in toks)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t != OOV_TOKEN),
                  key=lambda t: (-counts[t], t))
    return Vocabulary((OOV_TOKEN, *kept), min_count)


# -- corpus ---------------------------------------------------------------------

@dataclass
class InstructionPathPair:
    pair_id: str
    instruction: Instruction
    path: Path
    label: int  # 1 positive, 0 negative
    provenance: str
    split: str
    corruption_flag: bool | None = None
    strategy: str | None = None  # PS, RW_start, RW_end, PR for negatives
    group_id: str | None = None  # pair_id of the positive a negative was mined from

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown provenance {self.provenance!r}")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if (self.corruption_flag is not None) != (self.provenance == "speaker_synth"):
            raise DataError("corruption_flag is present iff provenance is speaker_synth")
        if self.label == 0 and self.provenance not in ("PS", "RW", "PR"):
            raise DataError("negatives must carry a mining provenance")

    @property
    def env_id(self) -> str:
        return self.path.env_id

    def to_dict(self) -> dict:
        return {
            "schema_version": DATASET_SCHEMA_VERSION,
            "pair_id": self.pair_id,
            "env_id": self.path.env_id,
            "tokens": list(self.instruction.tokens),
            "raw_tokens": list(self.instruction.raw_tokens),
            "node_ids": list(self.path.node_ids),
            "disconnected_ok": self.path.disconnected_ok,
            "label": self.label,
            "provenance": self.provenance,
            "split": self.split,
            "corruption_flag": self.corruption_flag,
            "strategy": self.strategy,
            "group_id": self.group_id,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "InstructionPathPair":
        if doc.get("schema_version") != DATASET_SCHEMA_VERSION:
            raise DataError(f"unsupported dataset schema_version {doc.get('schema_version')!r}")
        return cls(
            doc["pair_id"],
            Instruction(tuple(doc["raw_tokens"]), tuple(doc["tokens"])),
            Path(doc["env_id"], tuple(doc["node_ids"]), bool(doc.get("disconnected_ok", False))),
            int(doc["label"]),
            doc["provenance"],
            doc["split"],
            doc.get("corruption_flag"),
            doc.get("strategy"),
            doc.get("group_id"),
        )


def write_jsonl(pairs: Iterable[InstructionPathPair], fp) -> None:
    for p in pairs:
        fp.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def read_jsonl(fp) -> list[InstructionPathPair]:
    return [InstructionPathPair.from_dict(json.loads(line)) for line in fp if line.strip()]


def env_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per environment so serial and parallel runs agree."""
    return np.random.default_rng([seed, index])


def make_corpus(envs: Sequence[EnvironmentGraph], seed: int, n_paths_per_env: int,
                instructions_per_path: int = 3, speaker_fraction: float = 0.0,
                corruption_rate: float = 0.5, unseen_env_ids: Iterable[str] = (),
                val_seen_fraction: float = 0.2,
                n_paths_unseen: int | None = None) -> list[InstructionPathPair]:
    """Clean human_synth positives for every environment plus, in training
    environments, a speaker_synth partition with clause corruption.

    ``n_paths_unseen`` overrides the path count in held-out environments."""
    unseen = set(unseen_env_ids)
    pairs: list[InstructionPathPair] = []
    for idx, env in enumerate(envs):
        rng = env_rng(seed, idx)
        is_unseen = env.env_id in unseen
        n_val_seen = 0 if is_unseen else int(round(val_seen_fraction * n_paths_per_env))
        n_paths = n_paths_unseen if is_unseen and n_paths_unseen is not None else n_paths_per_env
        for k in range(n_paths):
            path = sample_reference_path(env, rng)
            split = "val_unseen" if is_unseen else ("val_seen" if k < n_val_seen else "train")
            for j in range(instructions_per_path):
                instr = generate_instruction(env, path, rng, 0.0)
                pairs.append(InstructionPathPair(
                    f"{env.env_id}:p{k}:i{j}", instr, path, 1, "human_synth", split))
        if is_unseen:
            continue
        n_speaker = int(round(speaker_fraction * n_paths_per_env))
        for k in range(n_speaker):
            path = sample_reference_path(env, rng)
            for j in range(instructions_per_path):
                instr = generate_instruction(env, path, rng, corruption_rate)
                pairs.append(InstructionPathPair(
                    f"{env.env_id}:s{k}:i{j}", instr, path, 1, "speaker_synth", "train",
                    corruption_flag=bool(instr.corrupted)))
    return pairs


def encode_pairs(pairs: Iterable[InstructionPathPair], vocab: Vocabulary) -> list[InstructionPathPair]:
    out = []
    for p in pairs:
        instr = p.instruction
        enc = Instruction(instr.raw_tokens, vocab.encode(instr.raw_tokens), instr.landmarks, instr.corrupted)
        out.append(InstructionPathPair(**{**p.__dict__, "instruction": enc}))
    return out


# -- R2R ingestion --------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub("", text.lower()).split()


class R2RParseError(DataError):
    pass


def load_r2r_json(fp_or_text, feature_provider: Callable[[str], EnvironmentGraph],
                  vocab: Vocabulary | None = None, split: str = "train") -> list[InstructionPathPair]:
    """Parse R2R-style records ``{path_id, scan, path, instructions}``.

    ``feature_provider(scan)`` returns the environment holding that scan's
    panoramas.  Token ids are filled in when ``vocab`` is given.
    """
    text = fp_or_text if isinstance(fp_or_text, str) else fp_or_text.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise R2RParseError(f"malformed JSON at byte offset {offset}: {exc.msg}") from exc
    if not isinstance(records, list):
        raise R2RParseError("expected a JSON array of records")
    pairs = []
    for i, rec in enumerate(records):
        try:
            for key in ("path_id", "scan", "path", "instructions"):
                if key not in rec:
                    raise R2RParseError(f"record {i}: missing field {key!r}")
            env = feature_provider(rec["scan"])
            path = Path(env.env_id, tuple(str(n) for n in rec["path"]))
            try:
                env.validate_path(path)
            except GraphError as exc:
                raise R2RParseError(f"record {i}: {exc}") from exc
            for j, sentence in enumerate(rec["instructions"]):
                raw = tuple(tokenize(sentence))
                if not raw:
                    raise R2RParseError(f"record {i}: instruction {j} is empty")
                ids = vocab.encode(raw) if vocab is not None else ()
                pairs.append(InstructionPathPair(
                    f"{rec['path_id']}:i{j}", Instruction(raw, ids), path, 1, "human_synth", split))
        except R2RParseError:
            raise
        except (TypeError, KeyError, AttributeError, DataError) as exc:
            raise R2RParseError(f"record {i}: {exc}") from exc
    return pairs
