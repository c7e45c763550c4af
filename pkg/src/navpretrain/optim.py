"""Optimizers, learning-rate schedule and the two training loops."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import agent as ag
from .auxtasks import AuxTaskError, auc, batch_losses, group_pairs, make_batch, score_pairs
from .encoders import ModelCheckpoint, Params, gradients
from .envgraph import EnvironmentGraph
from .synthdata import InstructionPathPair


class OptimError(ValueError):
    pass


class NonFiniteGradient(OptimError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name}")
        self.name = name


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "momentum"
    lr0: float = 1e-2
    decay_factor: float = 0.8
    decay_every: int = 2000
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    batch_size: int = 32
    total_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1:
            raise ValueError("decay_every and batch_size must be >= 1")


def lr_at(step: int, cfg: OptimConfig, lr0: float | None = None) -> float:
    base = cfg.lr0 if lr0 is None else lr0
    return base * cfg.decay_factor ** (step // cfg.decay_every)


@dataclass
class OptimState:
    slots: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    t: int = 0


def clip_global_norm(grads: Mapping[str, torch.Tensor], max_norm: float | None):
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def optimizer_step(params: Params, grads: Mapping[str, torch.Tensor], state: OptimState, cfg: OptimConfig,
                   step: int, lr_scale: Mapping[str, float] | None = None) -> tuple[Params, OptimState]:
    """In-place update of ``params`` (returned for convenience).

    ``lr_scale`` optionally multiplies the scheduled rate per tensor name.
    """
    for name in sorted(grads):
        if not bool(torch.isfinite(grads[name]).all()):
            raise NonFiniteGradient(name)
    grads, _ = clip_global_norm(grads, cfg.clip_norm)
    lr = lr_at(step, cfg)
    state.t += 1
    b1, b2 = cfg.betas
    with torch.no_grad():
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            slot = state.slots.setdefault(name, {})
            rate = lr * (1.0 if lr_scale is None else lr_scale.get(name, 1.0))
            if cfg.kind == "momentum":
                v = slot.get("v")
                v = g.clone() if v is None else cfg.momentum * v + g
                slot["v"] = v
                p -= rate * v
            else:
                m = slot.get("m", torch.zeros_like(g))
                s = slot.get("s", torch.zeros_like(g))
                m = b1 * m + (1 - b1) * g
                s = b2 * s + (1 - b2) * g * g
                slot["m"], slot["s"] = m, s
                m_hat = m / (1 - b1 ** state.t)
                s_hat = s / (1 - b2 ** state.t)
                p -= rate * m_hat / (s_hat.sqrt() + cfg.eps)
    return params, state


# -- metrics history ----------------------------------------------------------------

HISTORY_FIELDS = ("step", "split", "loss", "auc", "sr", "spl", "lr")


def write_history(rows: Sequence[Mapping], fp) -> None:
    w = csv.DictWriter(fp, fieldnames=HISTORY_FIELDS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row.get(k) is None else (repr(row[k]) if isinstance(row[k], float) else row[k]))
                    for k in HISTORY_FIELDS})


# -- discriminator pretraining --------------------------------------------------------

@dataclass
class DiscriminatorRun:
    alpha: float = 0.5
    horizons: tuple[int, ...] = (1, 2)
    steps: int = 300
    eval_every: int = 50
    eval_strategies: tuple[str, ...] = ("PR", "RW")
    balanced: bool = True  # equal total weight for positives and negatives in the CMA loss


def restrict(pairs: Sequence[InstructionPathPair], strategies: Sequence[str] | None):
    """Positives plus negatives whose provenance is in ``strategies``."""
    if strategies is None:
        return list(pairs)
    return [p for p in pairs if p.label == 1 or p.provenance in strategies]


def validation_auc(params: Params, pairs: Sequence[InstructionPathPair], envs, batch_size: int = 64) -> float:
    scores = score_pairs(params, pairs, envs, batch_size)
    return auc(scores, [p.label for p in pairs])


def train_discriminator(params: Params, train: Sequence[InstructionPathPair],
                        envs: Mapping[str, EnvironmentGraph], cfg: OptimConfig, run: DiscriminatorRun,
                        val: Sequence[InstructionPathPair] = (), config_hash: str = "", vocab_hash: str = "",
                        log: Callable[[dict], None] | None = None) -> tuple[ModelCheckpoint, list[dict]]:
    """Mini-batch training over instruction groups (positive + its mined negatives).

    Returns the checkpoint with the best validation AUC (PR/RW negatives only)
    and the metrics history.  Without validation data the final parameters
    are returned.
    """
    groups = group_pairs(train)
    if not groups:
        raise OptimError("discrimination dataset is empty")
    val = restrict(val, run.eval_strategies)
    rng = np.random.default_rng([cfg.seed, 1])
    state = OptimState()
    history: list[dict] = []
    best = (-1.0, None)
    order: list[int] = []
    for step in range(run.steps):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(groups)).tolist())
        idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
        batch = make_batch([groups[i] for i in idx], envs)
        loss, _, _ = batch_losses(params, batch, run.alpha, run.horizons, run.balanced)
        grads = gradients(loss, params)
        optimizer_step(params, grads, state, cfg, step)
        row = {"step": step, "split": "train", "loss": loss.item(), "lr": lr_at(step, cfg)}
        history.append(row)
        if log:
            log(row)
        last = step == run.steps - 1
        if val and ((step + 1) % run.eval_every == 0 or last):
            a = validation_auc(params, val, envs)
            row = {"step": step, "split": "val_seen", "auc": a, "lr": lr_at(step, cfg)}
            history.append(row)
            if log:
                log(row)
            if a > best[0]:
                best = (a, ModelCheckpoint.from_params(params, config_hash, vocab_hash,
                                                       {"step": step, "val_auc": a}))
    if best[1] is None:
        best = (float("nan"), ModelCheckpoint.from_params(params, config_hash, vocab_hash,
                                                          {"step": run.steps - 1}))
    return best[1], history


# -- agent training -------------------------------------------------------------

@dataclass
class AgentRun:
    mode: str = "rcm"  # "sf" or "rcm"
    steps: int = 300  # SF batches, or PG batches in RCM mode
    bc_steps: int = 1000  # RCM warm phase
    lr_cold: float = 1e-3
    lr_warm: float = 1e-3

    def __post_init__(self):
        if self.mode not in ("sf", "rcm", "bc"):
            raise ValueError(f"unknown agent training mode {self.mode!r}")


def _episodes(pairs, envs, idx):
    return [ag.Episode.from_pair(pairs[i], envs[pairs[i].env_id]) for i in idx]


class _Sampler:
    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng, self.order = n, batch, rng, []

    def next(self) -> list[int]:
        while len(self.order) < self.batch:
            self.order.extend(self.rng.permutation(self.n).tolist())
        out, self.order = self.order[: self.batch], self.order[self.batch:]
        return out


def teacher_accuracy(trajs: Sequence[ag.Trajectory]) -> float:
    """Fraction of non-forced teacher-mode steps where the policy's argmax is the teacher action."""
    steps = [s for tr in trajs for s in tr.steps if not s.forced]
    if not steps:
        raise OptimError("no supervised steps")
    return sum(s.argmax == s.teacher_action for s in steps) / len(steps)


def train_agent(params: Params, train: Sequence[InstructionPathPair], envs: Mapping[str, EnvironmentGraph],
                rl: ag.RlConfig, cfg: OptimConfig, run: AgentRun, copied: Sequence[str] = (),
                config_hash: str = "", vocab_hash: str = "",
                log: Callable[[dict], None] | None = None,
                on_rollouts: Callable[[str, list], None] | None = None) -> tuple[ModelCheckpoint, list[dict]]:
    """``bc``: teacher-forced cloning only.  ``sf``: sampled rollouts supervised
    by shortest-path actions.  ``rcm``: ``bc_steps`` of cloning, then ``steps``
    policy-gradient batches each preceded by ``interleave_schedule`` BC batches.

    Tensors named in ``copied`` (warm-started) use ``run.lr_warm``; the rest
    ``run.lr_cold``.  ``on_rollouts(split, trajectories)`` sees every batch of
    sampled rollouts (``sf`` or ``pg``).
    """
    if not train:
        raise OptimError("agent training set is empty")
    rng = np.random.default_rng([cfg.seed, 2])
    sampler = _Sampler(len(train), cfg.batch_size, rng)
    state = OptimState()
    copied = set(copied)
    scale = {k: (run.lr_warm if k in copied else run.lr_cold) / cfg.lr0 for k in params}
    history: list[dict] = []
    step = 0

    def update(loss, split):
        nonlocal step
        grads = gradients(loss, params)
        optimizer_step(params, grads, state, cfg, step, scale)
        row = {"step": step, "split": split, "loss": loss.item(), "lr": lr_at(step, cfg)}
        history.append(row)
        if log:
            log(row)
        step += 1

    def bc_batch():
        trajs = ag.rollout_batch(envs, _episodes(train, envs, sampler.next()), params, "teacher", rl)
        update(ag.bc_loss(trajs), "bc")

    if run.mode == "bc":
        for _ in range(run.steps):
            bc_batch()
    elif run.mode == "sf":
        for _ in range(run.steps):
            trajs = ag.rollout_batch(envs, _episodes(train, envs, sampler.next()), params, "sample", rl, rng)
            if on_rollouts:
                on_rollouts("sf", trajs)
            update(ag.bc_loss(trajs), "sf")
    else:
        for _ in range(run.bc_steps):
            bc_batch()
        for i in range(run.steps):
            for _ in range(ag.interleave_schedule(i, rl.K0, rl.rho)):
                bc_batch()
            trajs = ag.rollout_batch(envs, _episodes(train, envs, sampler.next()), params, "sample", rl, rng)
            if on_rollouts:
                on_rollouts("pg", trajs)
            update(ag.pg_loss(trajs, rl.gamma, rl.value_weight), "pg")
    return ModelCheckpoint.from_params(params, config_hash, vocab_hash, {"steps": step, "mode": run.mode}), history
