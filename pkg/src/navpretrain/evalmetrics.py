"""Navigation metrics, discriminator evaluation and corpus ranking."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from . import agent as ag
from .auxtasks import auc, forward, make_batch, rank_pairs, score_pairs, singleton_groups, top_bottom
from .encoders import Params
from .envgraph import EnvironmentGraph, Path
from .synthdata import InstructionPathPair, Vocabulary


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeResult:
    pair_id: str
    predicted: Path
    reference: Path
    PL: float
    NE: float
    success: bool
    spl_term: float

    def record(self) -> dict:
        return {"pair_id": self.pair_id, "PL": self.PL, "NE": self.NE, "success": self.success,
                "spl": self.spl_term}


def episode_metrics(env: EnvironmentGraph, predicted: Path, reference: Path, d_th: float,
                    pair_id: str = "") -> EpisodeResult:
    if predicted.env_id != reference.env_id or predicted.env_id != env.env_id:
        raise EvalError(f"paths from different environments: {predicted.env_id} vs {reference.env_id}")
    pl = env.path_length(predicted)
    ne = env.geodesic_distance(predicted.last, reference.last)
    success = ne <= d_th
    l = env.geodesic_distance(reference.first, reference.last)
    spl = 0.0
    if success:
        spl = 1.0 if max(pl, l) == 0 else l / max(pl, l)
    return EpisodeResult(pair_id, predicted, reference, pl, ne, success, spl)


@dataclass
class MetricsTable:
    rows: dict  # split -> {"PL", "NE", "SR", "SPL", "n"}

    def to_csv(self, fp) -> None:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["split", "n", "PL", "NE", "SR", "SPL"])
        for split, r in self.rows.items():
            w.writerow([split, r["n"], repr(r["PL"]), repr(r["NE"]), repr(r["SR"]), repr(r["SPL"])])


def aggregate(results: Sequence[EpisodeResult]) -> dict:
    if not results:
        raise EvalError("no episodes to aggregate")
    n = len(results)
    return {
        "n": n,
        "PL": math.fsum(r.PL for r in results) / n,
        "NE": math.fsum(r.NE for r in results) / n,
        "SR": 100.0 * sum(r.success for r in results) / n,
        "SPL": 100.0 * math.fsum(r.spl_term for r in results) / n,
    }


def run_episodes(params: Params, pairs: Sequence[InstructionPathPair], envs: Mapping[str, EnvironmentGraph],
                 rl: ag.RlConfig, mode: str = "greedy", batch_size: int = 64):
    """Roll out every pair (greedy by default) and score it; returns results and log records."""
    if not pairs:
        raise EvalError("empty evaluation split")
    results, records = [], []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start: start + batch_size]
            eps = [ag.Episode.from_pair(p, envs[p.env_id]) for p in chunk]
            trajs = ag.rollout_batch(envs, eps, params, mode, rl)
            for p, tr in zip(chunk, trajs):
                env = envs[p.env_id]
                pred = Path(p.env_id, tuple(ag.visited_nodes(tr)))
                res = episode_metrics(env, pred, p.path, rl.d_th, p.pair_id)
                results.append(res)
                records.append(ag.trajectory_record(tr, {"success": res.success, "PL": res.PL, "NE": res.NE}))
    return results, records


def evaluate_agent(params: Params, pairs: Sequence[InstructionPathPair], envs: Mapping[str, EnvironmentGraph],
                   rl: ag.RlConfig, mode: str = "greedy", log_fp=None) -> MetricsTable:
    """Per-split means; one rollout per pair.  ``log_fp`` receives the JSONL episode log."""
    results, records = run_episodes(params, pairs, envs, rl, mode)
    if log_fp is not None:
        ag.write_trajectory_log(records, log_fp)
    by_split: dict[str, list[EpisodeResult]] = {}
    for p, r in zip(pairs, results):
        by_split.setdefault(p.split, []).append(r)
    return MetricsTable({s: aggregate(rs) for s, rs in sorted(by_split.items())})


def evaluate_discriminator(params: Params, pairs: Sequence[InstructionPathPair],
                           envs: Mapping[str, EnvironmentGraph],
                           restrict_strategies: Sequence[str] | None = ("PR", "RW")) -> dict[str, float]:
    """AUC per split after dropping negatives outside ``restrict_strategies``."""
    if restrict_strategies is not None:
        pairs = [p for p in pairs if p.label == 1 or p.provenance in restrict_strategies]
    if not pairs:
        raise EvalError("no pairs to evaluate")
    scores = score_pairs(params, pairs, envs)
    out = {}
    for split in sorted({p.split for p in pairs}):
        idx = [i for i, p in enumerate(pairs) if p.split == split]
        out[split] = auc(scores[idx], [pairs[i].label for i in idx])
    return out


def clean_fraction(items: Sequence[tuple[InstructionPathPair, float]]) -> float:
    if not items:
        raise EvalError("empty slice")
    return sum(1 for p, _ in items if p.corruption_flag is False) / len(items)


def ranking_experiment(params: Params, corpus: Sequence[InstructionPathPair], envs: Mapping[str, EnvironmentGraph],
                       fractions: Sequence[float] = (0.01, 0.02, 0.10)) -> dict:
    """Rank speaker-style pairs by alignment score; report top/bottom slices and
    the clean-pair fraction in each."""
    if not corpus:
        raise EvalError("empty corpus")
    scores = score_pairs(params, corpus, envs)
    ranked = rank_pairs(corpus, scores)
    report = {"ranked": ranked, "slices": {}}
    for q in fractions:
        top, bottom = top_bottom(ranked, q)
        ct, cb = clean_fraction(top), clean_fraction(bottom)
        report["slices"][q] = {
            "top": [p for p, _ in top],
            "bottom": [p for p, _ in bottom],
            "clean_top": ct,
            "clean_bottom": cb,
            "enrichment": math.inf if cb == 0 and ct > 0 else (ct / cb if cb > 0 else 1.0),
        }
    return report


def alignment_matrix_csv(params: Params, pair: InstructionPathPair, envs: Mapping[str, EnvironmentGraph],
                         vocab: Vocabulary | None, fp) -> np.ndarray:
    """Write A for one pair: token rows, node-id columns."""
    with torch.no_grad():
        out = forward(params, make_batch(singleton_groups([pair]), envs), with_nvs=False)
    n, m = len(pair.instruction.tokens), len(pair.path)
    A = out.A[0, 0, :n, :m].numpy()
    words = list(pair.instruction.raw_tokens) if vocab is None else vocab.decode(pair.instruction.tokens)
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["token", *pair.path.node_ids])
    for word, row in zip(words, A):
        w.writerow([word, *[repr(float(x)) for x in row]])
    return A


def sign_test(diffs: Sequence[float]) -> tuple[int, int, float]:
    """One-sided exact sign test of median > 0; ties dropped.  Returns (wins, n, p)."""
    wins = sum(1 for d in diffs if d > 0)
    n = sum(1 for d in diffs if d != 0)
    if n == 0:
        return 0, 0, 1.0
    p = math.fsum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n
    return wins, n, p


def dump_json(obj, fp) -> None:
    json.dump(obj, fp, sort_keys=True, indent=2)
