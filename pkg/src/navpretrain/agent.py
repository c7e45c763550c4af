"""Navigation agent: co-grounded action policy, rollouts and RL/BC losses.

Episodes always finish with STOP.  On the last allowed step (``max_steps - 1``)
every move is masked out so the agent is forced to stop; such forced steps
carry no policy-gradient or cloning signal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .encoders import (
    DTYPE,
    ModelCheckpoint,
    ModelDims,
    Params,
    _linear,
    _cell,
    attention,
    encode_instructions,
    init_encoder_params,
    lstm_step,
    n_layers,
    pad_tokens,
)
from .envgraph import EnvironmentGraph, bearing
from .synthdata import InstructionPathPair, initial_heading


class AgentError(ValueError):
    pass


@dataclass(frozen=True)
class RlConfig:
    gamma: float = 0.99
    d_th: float = 3.0
    max_steps: int = 10
    K0: int = 8
    rho: float = 0.8
    value_weight: float = 0.5

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.d_th <= 0:
            raise ValueError("d_th must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


AGENT_PREFIX = "agent."


def init_agent_params(dims: ModelDims, seed: int = 0) -> Params:
    """Encoder towers (same registry names as pretraining) plus agent-only heads."""
    enc = init_encoder_params(dims, seed)
    params = {k: v for k, v in enc.items() if k.startswith(("lang.", "vis."))}
    gen = torch.Generator().manual_seed(seed + 7919)
    state_dim = dims.d_v + dims.d_text + dims.feat_dim
    agent = {
        "agent.text_att.W_q": _linear(gen, dims.d_v, dims.d_att),
        "agent.text_att.W_k": _linear(gen, dims.d_text, dims.d_att),
        "agent.vis_att.W_q": _linear(gen, dims.d_text, dims.d_att),
        "agent.vis_att.W_k": _linear(gen, dims.feat_dim, dims.d_att),
        "agent.W_c": _linear(gen, state_dim, dims.d_act),
        "agent.W_u": _linear(gen, dims.feat_dim, dims.d_act),
        "agent.stop": torch.randn(dims.feat_dim, generator=gen, dtype=DTYPE) * 0.1,
        "agent.value.w": torch.zeros(dims.d_v, dtype=DTYPE),
        "agent.value.b": torch.zeros(1, dtype=DTYPE),
    }
    params.update({k: v.requires_grad_(True) for k, v in agent.items()})
    return params


# -- the policy -----------------------------------------------------------------

def action_logits(params: Params, h: torch.Tensor, HX: torch.Tensor, xmask: torch.Tensor,
                  views: torch.Tensor, cands: torch.Tensor, cand_mask: torch.Tensor):
    """Bilinear scores of candidate directions for a batch of agent states.

    ``h`` ``[B, d_v]``, ``HX`` ``[B, N, 2 d_x]``, ``views`` ``[B, K, feat]``,
    ``cands`` ``[B, L, feat]``.  Returns ``(logits [B, L], state [B, d_state],
    c_text, c_visual)``.
    """
    c_text, _ = attention(h, HX, HX, params["agent.text_att.W_q"], params["agent.text_att.W_k"], xmask)
    c_vis, _ = attention(c_text, views, views, params["agent.vis_att.W_q"], params["agent.vis_att.W_k"])
    state = torch.cat([h, c_text, c_vis], dim=-1)
    left = state @ params["agent.W_c"]
    right = cands @ params["agent.W_u"]
    logits = (right @ left.unsqueeze(-1)).squeeze(-1)
    return logits.masked_fill(~cand_mask, float("-inf")), state, c_text, c_vis


@dataclass
class AgentState:
    h: torch.Tensor  # top-layer visual state [d_v]
    c_text: torch.Tensor
    c_visual: torch.Tensor
    node: str
    heading: float
    t: int


def candidate_tensor(params: Params, candidates: Sequence, width: int | None = None):
    """Stack candidate features, splicing in the learned STOP vector."""
    L = width or len(candidates)
    feat = params["agent.stop"].shape[0]
    base = np.zeros((L, feat))
    is_stop = np.zeros(L, dtype=bool)
    for j, c in enumerate(candidates):
        if c.is_stop:
            is_stop[j] = True
        else:
            base[j] = c.feature
    stop = torch.from_numpy(is_stop).unsqueeze(-1)
    tensor = torch.where(stop, params["agent.stop"].expand(L, feat), torch.from_numpy(base))
    mask = torch.zeros(L, dtype=torch.bool)
    mask[: len(candidates)] = True
    return tensor, mask


def action_distribution(agent_state: AgentState, candidates: Sequence, params: Params,
                        HX: torch.Tensor, env: EnvironmentGraph) -> torch.Tensor:
    """Probabilities over ``candidates`` for one agent state."""
    if not candidates:
        raise AgentError("empty candidate list")
    views = torch.from_numpy(np.array(env.panorama_matrix(agent_state.node))).unsqueeze(0)
    cands, mask = candidate_tensor(params, candidates)
    xmask = torch.ones(1, HX.shape[0], dtype=torch.bool)
    logits, *_ = action_logits(params, agent_state.h.unsqueeze(0), HX.unsqueeze(0), xmask, views,
                               cands.unsqueeze(0), mask.unsqueeze(0))
    return torch.softmax(logits[0], dim=-1)


# -- rollouts -------------------------------------------------------------------

@dataclass
class StepRecord:
    node: str
    heading: float
    action: int  # index into the candidate list
    target: str | None  # next node, None for STOP
    teacher_action: int
    forced: bool
    n_candidates: int
    argmax: int = -1  # the policy's most likely action at this state
    snapshot: dict | None = None


@dataclass
class Trajectory:
    pair_id: str
    env_id: str
    goal: str
    steps: list[StepRecord] = field(default_factory=list)
    log_probs: list = field(default_factory=list)  # tensors: log pi(taken action)
    teacher_log_probs: list = field(default_factory=list)  # tensors: log pi(teacher action)
    values: list = field(default_factory=list)  # tensors: value head on h_t
    rewards: list[float] = field(default_factory=list)
    terminal: bool = False

    @property
    def nodes(self) -> list[str]:
        return [s.node for s in self.steps]

    @property
    def final_node(self) -> str:
        return self.steps[-1].node

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]


def reward(env: EnvironmentGraph, s_t: str, s_next: str | None, goal: str, t: int, T: int, d_th: float) -> float:
    """Dense progress reward; success indicator on the final step."""
    if t == T:
        return 1.0 if env.geodesic_distance(s_t, goal) <= d_th else 0.0
    return env.geodesic_distance(s_t, goal) - env.geodesic_distance(s_next, goal)


@dataclass
class Episode:
    pair_id: str
    env_id: str
    tokens: tuple[int, ...]
    start: str
    goal: str
    heading: float

    @classmethod
    def from_pair(cls, pair: InstructionPathPair, env: EnvironmentGraph) -> "Episode":
        return cls(pair.pair_id, pair.env_id, pair.instruction.tokens, pair.path.first, pair.path.last,
                   initial_heading(env, pair.path))


def rollout_batch(envs: Mapping[str, EnvironmentGraph], episodes: Sequence[Episode], params: Params,
                  mode: str, cfg: RlConfig, rng: np.random.Generator | None = None,
                  record_snapshots: bool = False) -> list[Trajectory]:
    """Run episodes in lock-step.  ``mode`` is ``sample``, ``greedy`` or ``teacher``."""
    if mode not in ("sample", "greedy", "teacher"):
        raise AgentError(f"unknown rollout mode {mode!r}")
    if mode == "sample" and rng is None:
        raise AgentError("sample mode needs an rng")
    B = len(episodes)
    tok, tok_len = pad_tokens([e.tokens for e in episodes])
    HX, xmask = encode_instructions(params, tok, tok_len)
    layers = [_cell(params, f"vis.rnn.l{i}") for i in range(n_layers(params, "vis.rnn"))]
    d_v = layers[0][1].shape[0]
    hs = [HX.new_zeros(B, d_v) for _ in layers]
    cs = [HX.new_zeros(B, d_v) for _ in layers]
    trajs = [Trajectory(e.pair_id, e.env_id, e.goal) for e in episodes]
    nodes = [e.start for e in episodes]
    headings = [e.heading for e in episodes]
    active = [True] * B
    for t in range(cfg.max_steps):
        if not any(active):
            break
        ep_envs = [envs[e.env_id] for e in episodes]
        views = torch.from_numpy(np.stack([env.panorama_matrix(n) for env, n in zip(ep_envs, nodes)]))
        v_t, _ = attention(hs[-1], views, views, params["vis.att.W_q"], params["vis.att.W_k"])
        inp = v_t
        for i, W in enumerate(layers):
            hs[i], cs[i] = lstm_step(inp, hs[i], cs[i], *W)
            inp = hs[i]
        h = hs[-1]
        forced = t == cfg.max_steps - 1
        cand_lists = [env.navigable_actions(n, hd) for env, n, hd in zip(ep_envs, nodes, headings)]
        L = max(len(c) for c in cand_lists)
        built = [candidate_tensor(params, c, L) for c in cand_lists]
        cands = torch.stack([b[0] for b in built])
        cmask = torch.stack([b[1] for b in built])
        if forced:
            cmask = torch.zeros_like(cmask)
            for b, c in enumerate(cand_lists):
                cmask[b, len(c) - 1] = True
        logits, state, c_text, c_vis = action_logits(params, h, HX, xmask, views, cands, cmask)
        logp = torch.log_softmax(logits, dim=-1)
        values = h @ params["agent.value.w"] + params["agent.value.b"]
        probs = logp.detach().exp().numpy()
        for b, ep in enumerate(episodes):
            if not active[b]:
                continue
            env, cl = ep_envs[b], cand_lists[b]
            hop = env.next_hop(nodes[b], ep.goal)
            teacher = len(cl) - 1 if hop is None else [c.target for c in cl].index(hop)
            best = int(np.argmax(probs[b, : len(cl)]))
            if forced:
                action = len(cl) - 1
            elif mode == "teacher":
                action = teacher
            elif mode == "greedy":
                action = best
            else:
                p = probs[b, : len(cl)]
                action = min(int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right")),
                             len(cl) - 1)
            snap = None
            if record_snapshots:
                snap = {
                    "state": state[b].detach().numpy().copy(),
                    "candidates": cands[b, : len(cl)].detach().numpy().copy(),
                    "allowed": cmask[b, : len(cl)].numpy().copy(),
                    "h": h[b].detach().numpy().copy(),
                }
            target = cl[action].target
            trajs[b].steps.append(StepRecord(nodes[b], headings[b], action, target, teacher, forced, len(cl), best, snap))
            trajs[b].log_probs.append(logp[b, action])
            trajs[b].teacher_log_probs.append(logp[b, teacher] if not forced or teacher == len(cl) - 1
                                              else logp[b, len(cl) - 1])
            trajs[b].values.append(values[b])
            if target is None:
                trajs[b].rewards.append(1.0 if env.geodesic_distance(nodes[b], ep.goal) <= cfg.d_th else 0.0)
                trajs[b].terminal = True
                active[b] = False
            else:
                trajs[b].rewards.append(env.geodesic_distance(nodes[b], ep.goal)
                                        - env.geodesic_distance(target, ep.goal))
                headings[b] = bearing(env.node(nodes[b]).position, env.node(target).position)
                nodes[b] = target
    return trajs


def rollout(env: EnvironmentGraph, pair: InstructionPathPair, params: Params, mode: str, cfg: RlConfig,
            rng: np.random.Generator | None = None, record_snapshots: bool = False) -> Trajectory:
    return rollout_batch({env.env_id: env}, [Episode.from_pair(pair, env)], params, mode, cfg, rng,
                         record_snapshots)[0]


def visited_nodes(traj: Trajectory) -> list[str]:
    """Node sequence actually traversed (start, every move target)."""
    seq = [traj.steps[0].node]
    for s in traj.steps:
        if s.target is not None:
            seq.append(s.target)
    return seq


# -- losses ---------------------------------------------------------------------

def _supervised_steps(trajs: Sequence[Trajectory]):
    for tr in trajs:
        for s, lp in zip(tr.steps, tr.teacher_log_probs):
            if not s.forced:
                yield lp


def bc_loss(trajs: Sequence[Trajectory]) -> torch.Tensor:
    """Negative mean log-likelihood of the shortest-path (teacher) action at every
    visited state.  Used for behavioral cloning on teacher rollouts and for
    student forcing on sampled rollouts."""
    terms = list(_supervised_steps(trajs))
    if not terms:
        raise AgentError("no supervised steps in batch")
    return -torch.stack(terms).mean()


def discounted_returns(rewards: Sequence[float], gamma: float) -> list[float]:
    out = [0.0] * len(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def returns_and_advantages(traj: Trajectory, gamma: float) -> tuple[list[float], list[float]]:
    R = discounted_returns(traj.rewards, gamma)
    adv = [r - v.item() for r, v in zip(R, traj.values)]
    return R, adv


def pg_loss(trajs: Sequence[Trajectory], gamma: float, value_weight: float = 0.5,
            advantages: Sequence[Sequence[float]] | None = None) -> torch.Tensor:
    """REINFORCE with a learned baseline; advantages are constants.

    ``advantages`` pins them to given values (finite-difference checks need the
    surrogate to stay fixed while parameters move).
    """
    pol, val = [], []
    for i, tr in enumerate(trajs):
        R, adv = returns_and_advantages(tr, gamma)
        if advantages is not None:
            adv = advantages[i]
        for s, lp, v, r, a in zip(tr.steps, tr.log_probs, tr.values, R, adv):
            if not s.forced:
                pol.append(lp * a)
            val.append((v - r) ** 2)
    if not pol:
        raise AgentError("no policy steps in batch")
    return -torch.stack(pol).mean() + value_weight * torch.stack(val).mean()


def interleave_schedule(pg_batch_index: int, K0: int, rho: float) -> int:
    """Behavioral-cloning batches to run before PG batch ``pg_batch_index``."""
    return int(math.floor(K0 * rho ** (pg_batch_index // 100) + 0.5))


# -- transfer -------------------------------------------------------------------

def warm_start(agent_params: Params, checkpoint: ModelCheckpoint | Mapping[str, np.ndarray] | None,
               include: Sequence[str] | None = None) -> tuple[Params, dict]:
    """Copy every shared registry tensor from ``checkpoint`` into a copy of the
    agent parameters.  ``include`` restricts copying to name prefixes (e.g.
    ``("lang.",)`` warms only the language tower)."""
    source = {} if checkpoint is None else (
        checkpoint.params if isinstance(checkpoint, ModelCheckpoint) else dict(checkpoint))
    mismatched = [k for k in agent_params if k in source and tuple(source[k].shape) != tuple(agent_params[k].shape)]
    if mismatched:
        raise AgentError("shape mismatch on shared parameters: " + ", ".join(sorted(mismatched)))
    out, copied, fresh = {}, [], []
    for name, tensor in agent_params.items():
        use = name in source and not name.startswith(AGENT_PREFIX)
        if use and include is not None:
            use = name.startswith(tuple(include))
        if use:
            out[name] = torch.tensor(np.asarray(source[name]), dtype=DTYPE).requires_grad_(True)
            copied.append(name)
        else:
            out[name] = tensor.detach().clone().requires_grad_(True)
            fresh.append(name)
    ignored = sorted(k for k in source if k not in agent_params)
    return out, {"copied": sorted(copied), "fresh": sorted(fresh), "ignored": ignored}


def trajectory_record(traj: Trajectory, metrics: Mapping | None = None) -> dict:
    rec = {
        "pair_id": traj.pair_id,
        "env_id": traj.env_id,
        "nodes": visited_nodes(traj),
        "actions": traj.actions,
        "rewards": list(traj.rewards),
    }
    if metrics:
        rec.update(metrics)
    return rec


def write_trajectory_log(records, fp) -> None:
    for rec in records:
        fp.write(json.dumps(rec, sort_keys=True) + "\n")
