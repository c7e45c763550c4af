"""Desk-scale versions of the headline experiments, one seed at a time.

Each function returns a flat dict row; ``write_rows`` turns a list of rows
into a CSV with ``repr`` floats so reruns can be compared byte for byte.
"""

from __future__ import annotations

import csv
import math
from typing import Sequence

import numpy as np

from . import evalmetrics as ev
from .auxtasks import score_pairs
from .config import RunConfig
from .encoders import ModelCheckpoint
from .pipeline import Dataset, agent_params, encoder_params, pretrain, train_agent


def val_unseen_sr(cfg: RunConfig, ds: Dataset, ck: ModelCheckpoint) -> float:
    table = ev.evaluate_agent(agent_params(ck, cfg, ds), ds.positives("val_unseen"), ds.envs, cfg.agent.rl)
    return table.rows["val_unseen"]["SR"]


def pretrain_both(cfg: RunConfig, ds: Dataset) -> tuple[ModelCheckpoint, ModelCheckpoint]:
    """CMA-only (alpha = 1) and CMA+NVS (configured alpha) discriminators."""
    ck_cma, _ = pretrain(cfg, ds, alpha=1.0)
    ck_both, _ = pretrain(cfg, ds)
    return ck_cma, ck_both


def auxiliary_task_row(cfg: RunConfig, ds: Dataset, ck_cma: ModelCheckpoint, ck_both: ModelCheckpoint) -> dict:
    """val_unseen AUC on PR+RW negatives for both task mixes."""
    pairs = ds.disc("val_unseen")
    restrict = tuple(cfg.eval.restrict_strategies)
    a = ev.evaluate_discriminator(encoder_params(ck_cma, cfg, ds), pairs, ds.envs, restrict)["val_unseen"]
    b = ev.evaluate_discriminator(encoder_params(ck_both, cfg, ds), pairs, ds.envs, restrict)["val_unseen"]
    return {"seed": cfg.seed, "auc_cma": a, "auc_cma_nvs": b}


def ranking_row(cfg: RunConfig, ds: Dataset, ck: ModelCheckpoint, fraction: float = 0.10) -> dict:
    """Rank the speaker corpus, then clone agents on the best and worst slices."""
    corpus = ds.positives("train", "speaker_synth")
    report = ev.ranking_experiment(encoder_params(ck, cfg, ds), corpus, ds.envs, (fraction,))
    sl = report["slices"][fraction]
    steps = cfg.eval.ranking_bc_steps
    ck_top, _, _ = train_agent(cfg, ds, "bc", train_pairs=sl["top"], steps=steps)
    ck_bot, _, _ = train_agent(cfg, ds, "bc", train_pairs=sl["bottom"], steps=steps)
    return {
        "seed": cfg.seed,
        "n_slice": len(sl["top"]),
        "clean_top": sl["clean_top"],
        "clean_bottom": sl["clean_bottom"],
        "enrichment": sl["enrichment"],
        "sr_top": val_unseen_sr(cfg, ds, ck_top),
        "sr_bottom": val_unseen_sr(cfg, ds, ck_bot),
    }


def warm_start_row(cfg: RunConfig, ds: Dataset, ck_both: ModelCheckpoint, mode: str = "rcm") -> dict:
    ck_cold, _, _ = train_agent(cfg, ds, mode)
    ck_warm, _, manifest = train_agent(cfg, ds, mode, warm=ck_both)
    return {
        "seed": cfg.seed,
        "n_copied": len(manifest["copied"]),
        "sr_cold": val_unseen_sr(cfg, ds, ck_cold),
        "sr_warm": val_unseen_sr(cfg, ds, ck_warm),
    }


def alignment_gaps(cfg: RunConfig, ds: Dataset, ck: ModelCheckpoint) -> np.ndarray:
    """score(positive) - score(PR negative) for every val_unseen PR negative."""
    pairs = ds.disc("val_unseen")
    scores = score_pairs(encoder_params(ck, cfg, ds), pairs, ds.envs)
    pos = {p.pair_id: s for p, s in zip(pairs, scores) if p.label == 1}
    return np.array([pos[p.group_id] - s for p, s in zip(pairs, scores) if p.strategy == "PR"])


def alignment_gap_row(cfg: RunConfig, ds: Dataset, ck: ModelCheckpoint) -> dict:
    gaps = alignment_gaps(cfg, ds, ck)
    wins, n, p = ev.sign_test(gaps)
    return {"seed": cfg.seed, "n_pairs": len(gaps), "mean_gap": float(gaps.mean()), "wins": wins,
            "n_untied": n, "p_value": p}


def write_rows(rows: Sequence[dict], fp) -> None:
    if not rows:
        return
    w = csv.writer(fp, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) and not math.isinf(r[k]) else r[k] for k in keys])
