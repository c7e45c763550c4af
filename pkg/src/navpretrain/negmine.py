"""Negative path mining: path substitution, random walks, partial reordering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .envgraph import EnvironmentGraph, Path
from .synthdata import DataError, InstructionPathPair, sample_reference_path


class MiningError(DataError):
    def __init__(self, message: str, attempts: int | None = None):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class MiningConfig:
    n_ps: int = 4
    n_rw: int = 3
    n_pr: int = 3
    rw_distance_threshold: float = 5.0
    retry_budget: int = 500
    seed: int = 0

    def __post_init__(self):
        if min(self.n_ps, self.n_rw, self.n_pr) < 0:
            raise ValueError("negative counts must be >= 0")
        if self.rw_distance_threshold <= 0:
            raise ValueError("rw_distance_threshold must be positive")

    @property
    def n_negatives(self) -> int:
        return self.n_ps + self.n_rw + self.n_pr


def mine_path_substitution(env: EnvironmentGraph, positive: Path, rng: np.random.Generator,
                           retry_budget: int = 500, pool: Sequence[Path] = ()) -> Path:
    """Another reference path of the same environment.  Drawn from ``pool``
    (other positives' paths) when it offers a different sequence, otherwise
    sampled fresh."""
    others = [q for q in pool if q.env_id == env.env_id and q.node_ids != positive.node_ids]
    if others:
        return others[int(rng.integers(len(others)))]
    for attempt in range(retry_budget):
        try:
            cand = sample_reference_path(env, rng)
        except DataError:
            continue
        if cand.node_ids != positive.node_ids:
            return cand
    raise MiningError(f"{env.env_id}: no substitute path after {retry_budget} attempts", retry_budget)


def pr_eligible(positive: Path) -> bool:
    return len(positive) >= 4 and len(set(positive.node_ids[1:-1])) >= 2


def mine_partial_reorder(positive: Path, rng: np.random.Generator) -> Path:
    """Endpoints fixed, intermediates uniformly permuted (never the identity)."""
    if not pr_eligible(positive):
        raise MiningError(
            f"partial reorder needs >= 2 distinct intermediate nodes, path has {len(positive)} nodes"
        )
    middle = list(positive.node_ids[1:-1])
    while True:
        shuffled = [middle[i] for i in rng.permutation(len(middle))]
        if shuffled != middle:
            break
    return Path(positive.env_id, (positive.first, *shuffled, positive.last), disconnected_ok=True)


def _walk(env: EnvironmentGraph, start: str, n_edges: int, rng: np.random.Generator) -> list[str] | None:
    seq = [start]
    visited = {start}
    for _ in range(n_edges):
        options = [nb for nb in env.adjacency[seq[-1]] if nb not in visited]
        if not options:
            return None
        nxt = options[int(rng.integers(len(options)))]
        seq.append(nxt)
        visited.add(nxt)
    return seq


def rw_acceptance(env: EnvironmentGraph, positive: Path, anchor: str, threshold: float) -> float:
    """Exact probability that one draw of the self-avoiding walk in
    :func:`mine_random_walk` is accepted (enumerates every walk)."""
    fixed, far_from = (positive.first, positive.last) if anchor == "start" else (positive.last, positive.first)
    n_edges = positive.n_edges
    total = 0.0

    def extend(node, depth, visited, prob):
        nonlocal total
        if depth == n_edges:
            if env.geodesic_distance(node, far_from) >= threshold:
                total += prob
            return
        options = [nb for nb in env.adjacency[node] if nb not in visited]
        for nb in options:
            extend(nb, depth + 1, visited | {nb}, prob / len(options))

    extend(fixed, 0, frozenset([fixed]), 1.0)
    return total


def rw_eligible(env: EnvironmentGraph, positive: Path, anchor: str, threshold: float,
                retry_budget: int = 500, failure_odds: float = 1e-9) -> bool:
    """True when rejection sampling fails with probability below ``failure_odds``."""
    p = rw_acceptance(env, positive, anchor, threshold)
    return p > 0 and (1.0 - p) ** retry_budget < failure_odds


def mine_random_walk(env: EnvironmentGraph, positive: Path, rng: np.random.Generator,
                     anchor: str = "start", threshold: float = 5.0, retry_budget: int = 500) -> Path:
    """Simple walk with the positive's edge count sharing one endpoint; the other
    endpoint lies at least ``threshold`` from the positive's corresponding endpoint."""
    if anchor not in ("start", "end"):
        raise ValueError(f"anchor must be 'start' or 'end', got {anchor!r}")
    fixed, far_from = (positive.first, positive.last) if anchor == "start" else (positive.last, positive.first)
    for attempt in range(1, retry_budget + 1):
        seq = _walk(env, fixed, positive.n_edges, rng)
        if seq is None:
            continue
        if env.geodesic_distance(seq[-1], far_from) >= threshold:
            if anchor == "end":
                seq.reverse()
            return Path(positive.env_id, tuple(seq))
    raise MiningError(
        f"{env.env_id}: random walk ({anchor}) found no endpoint >= {threshold} away "
        f"after {retry_budget} attempts",
        retry_budget,
    )


def build_discrimination_dataset(positives: Sequence[InstructionPathPair],
                                 envs: Mapping[str, EnvironmentGraph],
                                 cfg: MiningConfig = MiningConfig()) -> list[InstructionPathPair]:
    """Positives followed by their mined negatives (PS, RW anchors alternating, PR).

    PS negatives reuse the paths of other positives from the same split and
    environment, so every path appears as both a positive and a negative.

    Positives too short for partial reordering, or whose endpoints make random-walk
    rejection sampling hopeless (see :func:`rw_eligible`), receive extra PS
    negatives instead so each keeps ``cfg.n_negatives``.
    """
    pools: dict[tuple[str, str], list[Path]] = {}
    seen = set()
    for pos in positives:
        key = (pos.split, pos.env_id)
        if (key, pos.path.node_ids) not in seen:
            seen.add((key, pos.path.node_ids))
            pools.setdefault(key, []).append(pos.path)
    out: list[InstructionPathPair] = []
    for idx, pos in enumerate(positives):
        rng = np.random.default_rng([cfg.seed, idx])
        env = envs[pos.env_id]
        n_ps, n_pr = cfg.n_ps, cfg.n_pr
        if not pr_eligible(pos.path):
            n_ps, n_pr = n_ps + n_pr, 0
        anchors = ["start"] * math.ceil(cfg.n_rw / 2) + ["end"] * (cfg.n_rw // 2)
        if not all(rw_eligible(env, pos.path, a, cfg.rw_distance_threshold, cfg.retry_budget)
                   for a in set(anchors)):
            n_ps += len(anchors)
            anchors = []
        jobs = [("PS", None)] * n_ps + [("RW", a) for a in anchors] + [("PR", None)] * n_pr
        out.append(pos)
        for k, (strategy, anchor) in enumerate(jobs):
            try:
                if strategy == "PS":
                    path = mine_path_substitution(env, pos.path, rng, cfg.retry_budget,
                                                  pools[(pos.split, pos.env_id)])
                elif strategy == "RW":
                    path = mine_random_walk(env, pos.path, rng, anchor, cfg.rw_distance_threshold,
                                            cfg.retry_budget)
                else:
                    path = mine_partial_reorder(pos.path, rng)
            except MiningError as exc:
                raise MiningError(f"positive {pos.pair_id}: {exc}", exc.attempts) from exc
            tag = f"RW_{anchor}" if strategy == "RW" else strategy
            out.append(InstructionPathPair(
                f"{pos.pair_id}:n{k}", pos.instruction, path, 0, strategy, pos.split,
                strategy=tag, group_id=pos.pair_id))
    return out
