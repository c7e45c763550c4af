"""Cross-modal alignment (CMA) scoring and the next-visual-scene (NVS) loss.

Training data is consumed in *groups*: one instruction together with its
positive path and the negative paths mined for it.  The instruction is
encoded once per group and scored against every path in the group; the NVS
loss uses the group's negatives as contrastive candidates.
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import (
    DTYPE,
    EncoderError,
    Params,
    encode_instructions,
    encode_paths,
    pad_tokens,
    path_views,
)
from .envgraph import EnvironmentGraph
from .synthdata import InstructionPathPair


class AuxTaskError(ValueError):
    pass


# -- alignment ------------------------------------------------------------------

def alignment_matrix(HX: torch.Tensor, HV: torch.Tensor, proj: torch.Tensor | None = None) -> torch.Tensor:
    """``A[..., i, j] = <HX_i, HV_j>``, projecting the text states to the visual
    width first when the towers differ."""
    if HX.shape[-1] != HV.shape[-1]:
        if proj is None:
            raise AuxTaskError(
                f"text width {HX.shape[-1]} != visual width {HV.shape[-1]} and no projection given"
            )
        HX = HX @ proj
    return HX @ HV.transpose(-1, -2)


def alignment_score(A: torch.Tensor, row_mask: torch.Tensor | None = None,
                    col_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax-pool every row over columns, then softmin-pool the row values.

    Works on ``[..., n, m]``; masked rows/columns get zero weight.
    """
    n, m = A.shape[-2:]
    if row_mask is None:
        row_mask = torch.ones(A.shape[:-1], dtype=torch.bool)
    if col_mask is None:
        col_mask = torch.ones(A.shape[:-2] + (m,), dtype=torch.bool)
    if not bool(row_mask.any(-1).all()) or not bool(col_mask.any(-1).all()):
        raise AuxTaskError("alignment matrix is fully masked")
    cm = col_mask.unsqueeze(-2).expand(A.shape)
    w = torch.softmax(A.masked_fill(~cm, float("-inf")), dim=-1)
    c = (w * torch.where(cm, A, torch.zeros_like(A))).sum(-1)
    u = torch.softmax((-c).masked_fill(~row_mask, float("-inf")), dim=-1)
    return (u * torch.where(row_mask, c, torch.zeros_like(c))).sum(-1)


def softmin(z: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(-z, dim=dim)


def cma_loss(scores, labels, balanced: bool = False) -> torch.Tensor:
    """Mean binary cross-entropy with the alignment score as the logit.

    ``balanced`` switches to a weighted mean in which positives and negatives
    carry equal total weight.
    """
    scores = torch.as_tensor(scores, dtype=DTYPE)
    labels = torch.as_tensor(labels, dtype=DTYPE)
    if scores.numel() == 0:
        raise AuxTaskError("empty batch")
    if not balanced:
        return F.binary_cross_entropy_with_logits(scores, labels)
    n_pos = labels.sum()
    n_neg = labels.numel() - n_pos
    if n_pos == 0 or n_neg == 0:
        return F.binary_cross_entropy_with_logits(scores, labels)
    w = torch.where(labels > 0.5, 0.5 / n_pos, 0.5 / n_neg)
    return (w * F.binary_cross_entropy_with_logits(scores, labels, reduction="none")).sum()


# -- next visual scene ----------------------------------------------------------

def nvs_logit(v_future: torch.Tensor, h_t: torch.Tensor, W_k: torch.Tensor) -> torch.Tensor:
    return v_future @ W_k @ h_t


def infonce_terms(h_pos: torch.Tensor, pooled: torch.Tensor, lengths: torch.Tensor,
                  nvs_W: Mapping[int, torch.Tensor], horizons: Sequence[int] = (1, 2)) -> torch.Tensor:
    """Per-(group, t, k) InfoNCE terms, flattened.

    ``h_pos`` ``[G, M, d_v]`` are the positive paths' visual states, ``pooled``
    ``[G, P, M, feat]`` the pooled inputs of every path in the group with the
    positive at slot 0, ``lengths`` ``[G, P]`` (0 for empty slots).
    """
    G, P, M, _ = pooled.shape
    terms = []
    for k in horizons:
        T = M - k
        if T <= 0:
            continue
        pred = torch.einsum("gtd,fd->gtf", h_pos[:, :T], nvs_W[k])
        logits = torch.einsum("gptf,gtf->gpt", pooled[:, :, k:k + T], pred)
        steps = torch.arange(T).view(1, 1, T) + k
        cand = steps < lengths.unsqueeze(-1)  # [G, P, T]
        logp = torch.log_softmax(logits.masked_fill(~cand, float("-inf")), dim=1)
        valid = cand[:, 0]
        terms.append(-logp[:, 0][valid])
    out = torch.cat(terms) if terms else torch.zeros(0, dtype=pooled.dtype)
    return out


def infonce_loss(h_pos, pooled, lengths, nvs_W, horizons=(1, 2)) -> torch.Tensor:
    terms = infonce_terms(h_pos, pooled, lengths, nvs_W, horizons)
    if terms.numel() == 0:
        raise AuxTaskError("no valid (t, k) for the NVS loss in this batch")
    return terms.mean()


def combined_loss(L_align, L_coh, alpha: float = 0.5):
    return alpha * L_align + (1 - alpha) * L_coh


# -- batching and the forward pass ----------------------------------------------

@dataclass
class Group:
    """An instruction and the paths scored against it (positive first, if any)."""

    pairs: list[InstructionPathPair]


@dataclass
class GroupBatch:
    tokens: torch.Tensor  # [G, N]
    tok_len: torch.Tensor  # [G]
    views: torch.Tensor  # [G, P, M, K, feat]
    path_len: torch.Tensor  # [G, P], 0 marks an empty slot
    labels: torch.Tensor  # [G, P]
    pair_ids: list[list[str | None]]

    @property
    def slot_mask(self) -> torch.Tensor:
        return self.path_len > 0


def group_pairs(pairs: Iterable[InstructionPathPair]) -> list[Group]:
    """Positives with their mined negatives; order follows first appearance."""
    groups: OrderedDict[str, list[InstructionPathPair]] = OrderedDict()
    for p in pairs:
        key = p.group_id or p.pair_id
        groups.setdefault(key, []).append(p)
    out = []
    for members in groups.values():
        members.sort(key=lambda q: -q.label)  # stable: positive first
        out.append(Group(members))
    return out


def singleton_groups(pairs: Iterable[InstructionPathPair]) -> list[Group]:
    return [Group([p]) for p in pairs]


def make_batch(groups: Sequence[Group], envs: Mapping[str, EnvironmentGraph]) -> GroupBatch:
    tokens, tok_len = pad_tokens([g.pairs[0].instruction.tokens for g in groups])
    P = max(len(g.pairs) for g in groups)
    mats = [[path_views(envs[p.env_id], p.path) for p in g.pairs] for g in groups]
    M = max(x.shape[0] for row in mats for x in row)
    K, feat = mats[0][0].shape[1:]
    views = np.zeros((len(groups), P, M, K, feat))
    lens = np.zeros((len(groups), P), dtype=np.int64)
    labels = np.zeros((len(groups), P))
    ids: list[list[str | None]] = []
    for g, (group, row) in enumerate(zip(groups, mats)):
        ids.append([p.pair_id for p in group.pairs] + [None] * (P - len(group.pairs)))
        for j, (pair, x) in enumerate(zip(group.pairs, row)):
            views[g, j, : x.shape[0]] = x
            lens[g, j] = x.shape[0]
            labels[g, j] = pair.label
    return GroupBatch(tokens, tok_len, torch.from_numpy(views), torch.from_numpy(lens),
                      torch.from_numpy(labels), ids)


@dataclass
class ForwardOutput:
    scores: torch.Tensor  # [G, P]
    nvs_terms: torch.Tensor | None
    A: torch.Tensor  # [G, P, N, M]
    HX: torch.Tensor
    HV: torch.Tensor
    pooled: torch.Tensor


def forward(params: Params, batch: GroupBatch, horizons: Sequence[int] = (1, 2),
            with_nvs: bool = True) -> ForwardOutput:
    HX, xmask = encode_instructions(params, batch.tokens, batch.tok_len)
    G, P, M, K, feat = batch.views.shape
    flat_len = batch.path_len.reshape(-1)
    # empty slots are encoded with length 1 and ignored afterwards
    HV, pooled, vmask = encode_paths(params, batch.views.reshape(G * P, M, K, feat), flat_len.clamp(min=1))
    HV = HV.reshape(G, P, M, -1)
    pooled = pooled.reshape(G, P, M, feat)
    vmask = vmask.reshape(G, P, M)
    A = alignment_matrix(HX.unsqueeze(1), HV, params.get("cma.proj"))
    row_mask = xmask.unsqueeze(1).expand(G, P, -1)
    scores = alignment_score(A, row_mask, vmask)
    nvs = None
    if with_nvs:
        nvs_W = {k: params[f"nvs.W_{k}"] for k in horizons}
        lengths = batch.path_len.clone()
        nvs = infonce_terms(HV[:, 0], pooled, lengths, nvs_W, horizons)
    return ForwardOutput(scores, nvs, A, HX, HV, pooled)


def batch_losses(params: Params, batch: GroupBatch, alpha: float = 0.5,
                 horizons: Sequence[int] = (1, 2), balanced: bool = False):
    """Returns ``(combined, L_align, L_coh)``; ``L_coh`` is None when alpha == 1."""
    need_nvs = alpha < 1
    out = forward(params, batch, horizons, with_nvs=need_nvs)
    slots = batch.slot_mask
    L_align = cma_loss(out.scores[slots], batch.labels[slots], balanced)
    if not need_nvs:
        return L_align, L_align, None
    if out.nvs_terms is None or out.nvs_terms.numel() == 0:
        raise AuxTaskError("no valid (t, k) for the NVS loss in this batch")
    L_coh = out.nvs_terms.mean()
    return combined_loss(L_align, L_coh, alpha), L_align, L_coh


def score_pairs(params: Params, pairs: Sequence[InstructionPathPair], envs: Mapping[str, EnvironmentGraph],
                batch_size: int = 64) -> np.ndarray:
    """Alignment score of every pair, in input order."""
    scores = np.zeros(len(pairs))
    groups = group_pairs(pairs)
    index = {p.pair_id: i for i, p in enumerate(pairs)}
    with torch.no_grad():
        for start in range(0, len(groups), batch_size):
            chunk = groups[start: start + batch_size]
            out = forward(params, make_batch(chunk, envs), with_nvs=False)
            for g, group in enumerate(chunk):
                for j, p in enumerate(group.pairs):
                    scores[index[p.pair_id]] = float(out.scores[g, j])
    return scores


# -- evaluation utilities ---------------------------------------------------------

def auc(scores, labels) -> float:
    """Mann-Whitney AUC by exhaustive pairwise counting (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise AuxTaskError("AUC needs at least one positive and one negative")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def rank_pairs(pairs: Sequence[InstructionPathPair], scores) -> list[tuple[InstructionPathPair, float]]:
    """Stable sort by descending score."""
    order = sorted(range(len(pairs)), key=lambda i: -float(scores[i]))
    return [(pairs[i], float(scores[i])) for i in order]


def slice_size(n: int, fraction: float) -> int:
    return min(n, math.ceil(fraction * n - 1e-9))


def top_bottom(ranked: Sequence, fraction: float):
    k = slice_size(len(ranked), fraction)
    return list(ranked[:k]), list(ranked[len(ranked) - k:])


def write_score_report(ranked: Sequence[tuple[InstructionPathPair, float]], fp) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["pair_id", "split", "provenance", "corruption_flag", "score", "rank"])
    for rank, (p, s) in enumerate(ranked, start=1):
        flag = "" if p.corruption_flag is None else str(p.corruption_flag).lower()
        w.writerow([p.pair_id, p.split, p.provenance, flag, repr(s), rank])
