"""Finite-difference checks of every training loss at tiny dimensions.

Each check evaluates the loss as a plain function of numpy parameters and
compares central differences against autograd over every registry tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import agent as ag
from .auxtasks import Group, batch_losses, make_batch
from .encoders import DTYPE, ModelDims, gradients, init_encoder_params
from .envgraph import EnvironmentGraph
from .oracles import FD_REL_TOL, FD_STEP, fd_gradient, max_relative_error
from .synthdata import GenParams, Instruction, InstructionPathPair, generate_environment, sample_reference_path

TINY_DIMS = ModelDims(vocab_size=11, feat_dim=7, d_emb=4, d_x=4, d_v=4, d_att=4, d_act=4)
TINY_WORLD = GenParams(n_nodes=10, area_side=8.0, connect_radius=3.5, d_app=3, n_elev=1, n_head=4,
                       n_room_types=4, n_object_types=6)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    where: str
    n_params: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < FD_REL_TOL


def tiny_world(seed: int = 0) -> tuple[EnvironmentGraph, list[InstructionPathPair]]:
    """One small environment and three instructions, each with two distractor paths."""
    env = generate_environment(TINY_WORLD.__class__(**{**TINY_WORLD.__dict__, "seed": seed}), "tiny")
    rng = np.random.default_rng(seed)
    pairs = []
    for g in range(3):
        toks = tuple(int(t) for t in rng.integers(0, TINY_DIMS.vocab_size, size=int(rng.integers(3, 7))))
        instr = Instruction(tuple(str(t) for t in toks), toks)
        pos = sample_reference_path(env, rng, min_edges=2, max_edges=4, min_len=0.0)
        pairs.append(InstructionPathPair(f"g{g}", instr, pos, 1, "human_synth", "train"))
        for n in range(2):
            neg = sample_reference_path(env, rng, min_edges=1, max_edges=4, min_len=0.0)
            pairs.append(InstructionPathPair(f"g{g}:n{n}", instr, neg, 0, "PS", "train", group_id=f"g{g}"))
    return env, pairs


def _to_torch(arrays) -> dict[str, torch.Tensor]:
    return {k: torch.tensor(v, dtype=DTYPE) for k, v in arrays.items()}


def _check(name: str, params: dict[str, torch.Tensor], loss_of: Callable[[dict], torch.Tensor]) -> CheckResult:
    analytic = gradients(loss_of(params), params)
    base = {k: v.detach().numpy().copy() for k, v in params.items()}

    def f(arrays) -> float:
        with torch.no_grad():
            return float(loss_of(_to_torch(arrays)))

    numeric = fd_gradient(f, base, FD_STEP)
    err, where = max_relative_error({k: v.numpy() for k, v in analytic.items()}, numeric)
    return CheckResult(name, err, where, sum(v.size for v in base.values()))


def check_discriminator(alpha: float, name: str, seed: int = 0) -> CheckResult:
    env, pairs = tiny_world(seed)
    groups = [Group([p for p in pairs if p.pair_id.split(":")[0] == f"g{g}"]) for g in range(3)]
    batch = make_batch(groups, {env.env_id: env})
    params = init_encoder_params(TINY_DIMS, seed)

    def loss_of(p):
        combined, L_align, L_coh = batch_losses(p, batch, alpha, TINY_DIMS.horizons)
        return L_coh if alpha == 0 else combined

    return _check(name, params, loss_of)


def _episodes(env: EnvironmentGraph, pairs) -> list[ag.Episode]:
    return [ag.Episode.from_pair(p, env) for p in pairs if p.label == 1]


def check_bc(seed: int = 0) -> CheckResult:
    env, pairs = tiny_world(seed)
    rl = ag.RlConfig(max_steps=6)
    params = ag.init_agent_params(TINY_DIMS, seed)
    eps = _episodes(env, pairs)

    def loss_of(p):
        return ag.bc_loss(ag.rollout_batch({env.env_id: env}, eps, p, "teacher", rl))

    return _check("bc_loss", params, loss_of)


def check_pg(seed: int = 0) -> CheckResult:
    """Sampled rollouts replayed with the same stream; advantages pinned at the base point."""
    env, pairs = tiny_world(seed)
    rl = ag.RlConfig(max_steps=6)
    params = ag.init_agent_params(TINY_DIMS, seed)
    # give the value head something to differentiate
    with torch.no_grad():
        params["agent.value.w"].add_(0.1)
        params["agent.value.b"].add_(0.05)
    eps = _episodes(env, pairs)
    envs = {env.env_id: env}

    def rollout(p):
        return ag.rollout_batch(envs, eps, p, "sample", rl, np.random.default_rng([seed, 99]))

    with torch.no_grad():
        base = rollout(params)
    pinned = [ag.returns_and_advantages(tr, rl.gamma)[1] for tr in base]
    actions = [tr.actions for tr in base]

    def loss_of(p):
        trajs = rollout(p)
        if [tr.actions for tr in trajs] != actions:
            raise RuntimeError("sampled actions changed under perturbation; pick another seed")
        return ag.pg_loss(trajs, rl.gamma, rl.value_weight, advantages=pinned)

    return _check("pg_loss", params, loss_of)


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        check_discriminator(1.0, "cma_loss", seed),
        check_discriminator(0.0, "infonce_loss", seed),
        check_discriminator(0.5, "combined_loss", seed),
        check_bc(seed),
        check_pg(seed),
    ]
