"""Two-tower sequence encoders and the named parameter registry.

Parameters live in a flat ``dict[str, torch.Tensor]`` keyed by registry names
(``lang.embed``, ``lang.birnn.l0.fwd.W_ih``, ``vis.rnn.l0.W_hh``,
``vis.att.W_q`` ...).  The same names are used by checkpoints, so transfer
between pretraining and the agent is a dictionary copy.  Everything runs in
float64.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .envgraph import EnvironmentGraph, Path

DTYPE = torch.float64
CHECKPOINT_FORMAT_VERSION = 1

Params = dict[str, torch.Tensor]


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    feat_dim: int  # appearance dims + 4 orientation dims
    d_emb: int = 32
    d_x: int = 32  # per direction
    d_v: int = 64
    d_att: int = 16
    d_act: int = 32
    n_lang_layers: int = 1
    n_vis_layers: int = 1
    horizons: tuple[int, ...] = (1, 2)

    @property
    def d_text(self) -> int:
        return 2 * self.d_x


# -- initialisation -------------------------------------------------------------

def _uniform(gen: torch.Generator, shape, bound: float) -> torch.Tensor:
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound


def _lstm_params(gen, prefix: str, d_in: int, d_h: int) -> Params:
    bound = 1.0 / math.sqrt(d_h)
    b = torch.zeros(4 * d_h, dtype=DTYPE)
    b[d_h: 2 * d_h] = 1.0  # forget gate
    return {
        f"{prefix}.W_ih": _uniform(gen, (d_in, 4 * d_h), 1.0 / math.sqrt(d_in)),
        f"{prefix}.W_hh": _uniform(gen, (d_h, 4 * d_h), bound),
        f"{prefix}.b": b,
    }


def _linear(gen, d_in: int, d_out: int) -> torch.Tensor:
    return _uniform(gen, (d_in, d_out), 1.0 / math.sqrt(d_in))


def init_encoder_params(dims: ModelDims, seed: int = 0) -> Params:
    """Language tower, visual tower, CMA projection and NVS predictors."""
    gen = torch.Generator().manual_seed(seed)
    p: Params = {"lang.embed": _uniform(gen, (dims.vocab_size, dims.d_emb), 0.1)}
    d_in = dims.d_emb
    for layer in range(dims.n_lang_layers):
        for direction in ("fwd", "bwd"):
            p.update(_lstm_params(gen, f"lang.birnn.l{layer}.{direction}", d_in, dims.d_x))
        d_in = 2 * dims.d_x
    d_in = dims.feat_dim
    for layer in range(dims.n_vis_layers):
        p.update(_lstm_params(gen, f"vis.rnn.l{layer}", d_in, dims.d_v))
        d_in = dims.d_v
    p["vis.att.W_q"] = _linear(gen, dims.d_v, dims.d_att)
    p["vis.att.W_k"] = _linear(gen, dims.feat_dim, dims.d_att)
    if dims.d_text != dims.d_v:
        p["cma.proj"] = _linear(gen, dims.d_text, dims.d_v)
    for k in dims.horizons:
        p[f"nvs.W_{k}"] = _linear(gen, dims.d_v, dims.feat_dim).T.contiguous()
    return {k: v.requires_grad_(True) for k, v in p.items()}


# -- primitives -----------------------------------------------------------------

def attention(query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
              W_q: torch.Tensor, W_k: torch.Tensor, mask: torch.Tensor | None = None):
    """Scaled dot-product attention with learned query/key projections.

    ``query`` is ``[..., d_q]``, ``keys``/``values`` are ``[..., K, d]``.
    Returns ``(pooled [..., d_val], weights [..., K])``; masked keys get weight 0.
    """
    if keys.shape[-2] == 0:
        raise EncoderError("attention over an empty key set")
    q = query @ W_q
    k = keys @ W_k
    logits = (k @ q.unsqueeze(-1)).squeeze(-1) / math.sqrt(W_q.shape[-1])
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    pooled = (weights.unsqueeze(-1) * values).sum(dim=-2)
    return pooled, weights


def lstm_step(x, h, c, W_ih, W_hh, b):
    """Standard LSTM cell, gate order (input, forget, cell, output)."""
    z = x @ W_ih + h @ W_hh + b
    i, f, g, o = z.chunk(4, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


def _cell(params: Params, prefix: str):
    return params[f"{prefix}.W_ih"], params[f"{prefix}.W_hh"], params[f"{prefix}.b"]


def n_layers(params: Params, prefix: str) -> int:
    n = 0
    while f"{prefix}.l{n}.W_ih" in params or f"{prefix}.l{n}.fwd.W_ih" in params:
        n += 1
    return n


# -- batching -------------------------------------------------------------------

def pad_tokens(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    if any(len(s) == 0 for s in seqs):
        raise EncoderError("cannot encode an empty token sequence")
    n = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), n), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return torch.from_numpy(out), torch.tensor([len(s) for s in seqs])


def path_views(env: EnvironmentGraph, path: Path) -> np.ndarray:
    """[m, n_views, feat] panorama matrices along a path."""
    idx = [env.index[env.node(n).node_id] for n in path.node_ids]
    return env.panorama_tensor[idx]


def pad_paths(items: Sequence[tuple[EnvironmentGraph, Path]]) -> tuple[torch.Tensor, torch.Tensor]:
    mats = [path_views(env, path) for env, path in items]
    m = max(x.shape[0] for x in mats)
    k, f = mats[0].shape[1:]
    out = np.zeros((len(mats), m, k, f))
    for i, x in enumerate(mats):
        out[i, : x.shape[0]] = x
    return torch.from_numpy(out), torch.tensor([x.shape[0] for x in mats])


def length_mask(lengths: torch.Tensor, n: int) -> torch.Tensor:
    return torch.arange(n).unsqueeze(0) < lengths.unsqueeze(1)


# -- towers ---------------------------------------------------------------------

@dataclass
class EncodedSequence:
    states: torch.Tensor  # [T, d]
    valid_length: int
    pooled_inputs: torch.Tensor | None = None  # [T, feat] (visual tower only)


def encode_instructions(params: Params, tokens: torch.Tensor, lengths: torch.Tensor):
    """Bidirectional LSTM over padded token ids ``[B, N]``.

    Returns ``(H [B, N, 2*d_x], mask [B, N])``; padded rows are zero.
    """
    if tokens.shape[1] == 0 or bool((lengths <= 0).any()):
        raise EncoderError("cannot encode an empty token sequence")
    vocab = params["lang.embed"].shape[0]
    if int(tokens.max()) >= vocab or int(tokens.min()) < 0:
        raise EncoderError(f"token id out of range for vocabulary of size {vocab}")
    B, N = tokens.shape
    mask = length_mask(lengths, N)
    m = mask.unsqueeze(-1)
    x = params["lang.embed"][tokens]
    for layer in range(n_layers(params, "lang.birnn")):
        outs = []
        for direction, steps in (("fwd", range(N)), ("bwd", range(N - 1, -1, -1))):
            W = _cell(params, f"lang.birnn.l{layer}.{direction}")
            d_h = W[1].shape[0]
            h = x.new_zeros(B, d_h)
            c = x.new_zeros(B, d_h)
            seq = [None] * N
            for t in steps:
                h_new, c_new = lstm_step(x[:, t], h, c, *W)
                h = torch.where(m[:, t], h_new, h)
                c = torch.where(m[:, t], c_new, c)
                seq[t] = h_new * m[:, t]
            outs.append(torch.stack(seq, dim=1))
        x = torch.cat(outs, dim=-1)
    return x, mask


def encode_paths(params: Params, views: torch.Tensor, lengths: torch.Tensor):
    """Visual LSTM whose input at step t is attention over the panorama views,
    queried by the previous top-layer state.

    ``views`` is ``[B, M, K, feat]``.  Returns ``(H [B, M, d_v],
    pooled [B, M, feat], mask [B, M])``.
    """
    B, M = views.shape[:2]
    mask = length_mask(lengths, M)
    m = mask.unsqueeze(-1)
    layers = [_cell(params, f"vis.rnn.l{i}") for i in range(n_layers(params, "vis.rnn"))]
    d_v = layers[0][1].shape[0]
    hs = [views.new_zeros(B, d_v) for _ in layers]
    cs = [views.new_zeros(B, d_v) for _ in layers]
    states, pooled = [], []
    for t in range(M):
        v_t, _ = attention(hs[-1], views[:, t], views[:, t], params["vis.att.W_q"], params["vis.att.W_k"])
        inp = v_t
        for i, W in enumerate(layers):
            h_new, c_new = lstm_step(inp, hs[i], cs[i], *W)
            hs[i] = torch.where(m[:, t], h_new, hs[i])
            cs[i] = torch.where(m[:, t], c_new, cs[i])
            inp = h_new
        states.append(inp * m[:, t])
        pooled.append(v_t * m[:, t])
    return torch.stack(states, 1), torch.stack(pooled, 1), mask


def encode_instruction(tokens: Sequence[int], params: Params) -> EncodedSequence:
    if len(tokens) == 0:
        raise EncoderError("cannot encode an empty token sequence")
    tok, lens = pad_tokens([tokens])
    H, _ = encode_instructions(params, tok, lens)
    return EncodedSequence(H[0], len(tokens))


def encode_path(path: Path, env: EnvironmentGraph, params: Params) -> EncodedSequence:
    views, lens = pad_paths([(env, path)])
    H, pooled, _ = encode_paths(params, views, lens)
    return EncodedSequence(H[0], len(path), pooled[0])


# -- gradients ------------------------------------------------------------------

def gradients(loss: torch.Tensor, params: Params, retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """Analytic gradient of a scalar loss w.r.t. every registry tensor."""
    if not bool(torch.isfinite(loss)):
        raise EncoderError(f"non-finite loss {float(loss.detach())}")
    names = [k for k, v in params.items() if v.requires_grad]
    grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True,
                                retain_graph=retain_graph)
    out = {k: (g if g is not None else torch.zeros_like(params[k])).detach()
           for k, g in zip(names, grads)}
    return {k: out.get(k, torch.zeros_like(v)) for k, v in params.items()}


# -- checkpoints ----------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    params: dict[str, np.ndarray]
    config_hash: str = ""
    vocab_hash: str = ""
    meta: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @classmethod
    def from_params(cls, params: Mapping[str, torch.Tensor], config_hash: str = "",
                    vocab_hash: str = "", meta: dict | None = None) -> "ModelCheckpoint":
        return cls({k: v.detach().cpu().numpy().astype(np.float64).copy() for k, v in params.items()},
                   config_hash, vocab_hash, dict(meta or {}))

    def to_params(self, names: Iterable[str] | None = None) -> Params:
        keys = self.params.keys() if names is None else names
        return {k: torch.tensor(self.params[k], dtype=DTYPE).requires_grad_(True) for k in keys}

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "config_hash": self.config_hash,
            "vocab_hash": self.vocab_hash,
            "meta": self.meta,
            "params": {
                k: {
                    "shape": list(v.shape),
                    "dtype": "float64",
                    "data": base64.b64encode(np.ascontiguousarray(v, dtype="<f8").tobytes()).decode("ascii"),
                }
                for k, v in sorted(self.params.items())
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelCheckpoint":
        if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise EncoderError(f"unsupported checkpoint format {doc.get('format_version')!r}")
        params = {}
        for name, rec in doc["params"].items():
            if rec.get("dtype") != "float64":
                raise EncoderError(f"{name}: unsupported dtype {rec.get('dtype')!r}")
            arr = np.frombuffer(base64.b64decode(rec["data"]), dtype="<f8").astype(np.float64)
            params[name] = arr.reshape(rec["shape"])
        return cls(params, doc.get("config_hash", ""), doc.get("vocab_hash", ""), doc.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fp:
            json.dump(self.to_dict(), fp, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        with open(path) as fp:
            return cls.from_dict(json.load(fp))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.params.items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()[:16]
