"""Brute-force reference implementations for tests and the gradcheck harness.

Nothing here imports the production modules: inputs are plain lists, dicts
and numpy arrays, and every formula is re-derived with explicit loops.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

ABS_TOL = 1e-12
FD_REL_TOL = 1e-4
FD_STEP = 1e-5

MAX_NODES = 12
MAX_TOKENS = 6
MAX_DIM = 4  # hidden widths
MAX_WIDTH = 16  # concatenated vectors: [h; c_text; c_visual], D_app + 4, 2 * d_x


class OracleRefusal(ValueError):
    """Input is larger than the oracle is willing to enumerate."""


def _cap(what: str, size: int, limit: int) -> None:
    if size > limit:
        raise OracleRefusal(f"{what} of size {size} exceeds the oracle cap {limit}")


# -- graphs ---------------------------------------------------------------------

def _dist(pos, a, b):
    return math.hypot(pos[b][0] - pos[a][0], pos[b][1] - pos[a][1])


def brute_shortest_path(positions: Mapping[str, Sequence[float]], edges, a: str, b: str):
    """Enumerate every simple path; return (length, node sequence) of the best,
    ties broken by the lexicographically smallest sequence."""
    if len(positions) > MAX_NODES:
        raise OracleRefusal(f"brute_shortest_path is capped at {MAX_NODES} nodes")
    adj = {n: set() for n in positions}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    best = None

    def dfs(node, seq):
        nonlocal best
        if node == b:
            length = math.fsum(_dist(positions, x, y) for x, y in zip(seq, seq[1:]))
            cand = (length, tuple(seq))
            if best is None or cand[0] < best[0] - 1e-12 or (abs(cand[0] - best[0]) <= 1e-12 and cand[1] < best[1]):
                best = cand
            return
        for nb in sorted(adj[node]):
            if nb not in seq:
                seq.append(nb)
                dfs(nb, seq)
                seq.pop()

    dfs(a, [a])
    return best


def brute_path_length(positions, seq) -> float:
    total = 0.0
    for i in range(len(seq) - 1):
        total += _dist(positions, seq[i], seq[i + 1])
    return total


# -- alignment and losses -------------------------------------------------------

def brute_alignment_matrix(HX, HV):
    n, m = len(HX), len(HV)
    _cap("instruction", n, MAX_TOKENS)
    _cap("path", m, MAX_NODES)
    _cap("state width", len(HX[0]), MAX_WIDTH)
    A = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for d in range(len(HX[i])):
                s += HX[i][d] * HV[j][d]
            A[i][j] = s
    return A


def brute_alignment_score(A) -> float:
    row_values = []
    for row in A:
        top = max(row)
        ex = [math.exp(a - top) for a in row]
        z = sum(ex)
        row_values.append(sum(e / z * a for e, a in zip(ex, row)))
    low = min(row_values)
    ex = [math.exp(-(c - low)) for c in row_values]
    z = sum(ex)
    return sum(e / z * c for e, c in zip(ex, row_values))


def _log1pexp(x: float) -> float:
    return x + math.log1p(math.exp(-x)) if x > 0 else math.log1p(math.exp(x))


def brute_cma_loss(scores, labels) -> float:
    total = 0.0
    for s, y in zip(scores, labels):
        # -[y ln sig(s) + (1-y) ln(1 - sig(s))]
        total += y * _log1pexp(-s) + (1 - y) * _log1pexp(s)
    return total / len(scores)


def brute_infonce(positive_states, candidate_inputs, W: Mapping[int, np.ndarray], horizons=(1, 2)) -> float:
    """``positive_states[t]`` is h_t of the positive path; ``candidate_inputs[p][t]``
    are pooled inputs of path p (p = 0 is the positive), ragged lengths."""
    terms = []
    m = len(positive_states)
    _cap("path", m, MAX_NODES)
    _cap("candidate set", len(candidate_inputs), MAX_NODES)
    for k in horizons:
        for t in range(m - k):
            logits = []
            for p, seq in enumerate(candidate_inputs):
                if t + k >= len(seq):
                    continue
                val = 0.0
                for a in range(len(seq[t + k])):
                    for b in range(len(positive_states[t])):
                        val += seq[t + k][a] * W[k][a][b] * positive_states[t][b]
                logits.append((p, val))
            top = max(v for _, v in logits)
            z = sum(math.exp(v - top) for _, v in logits)
            pos = [v for p, v in logits if p == 0][0]
            terms.append(-(pos - top - math.log(z)))
    if not terms:
        raise OracleRefusal("no valid terms")
    return sum(terms) / len(terms)


def brute_combined(L_align, L_coh, alpha):
    return alpha * L_align + (1.0 - alpha) * L_coh


def brute_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else (0.5 if a == b else 0.0)
    return wins / (len(pos) * len(neg))


def brute_softmax_attention(query, keys, values, W_q, W_k):
    _cap("keys", len(keys), 64)
    _cap("query width", len(query), MAX_WIDTH)
    d_att = len(W_q[0])
    q = [sum(query[i] * W_q[i][j] for i in range(len(query))) for j in range(d_att)]
    logits = []
    for key in keys:
        kp = [sum(key[i] * W_k[i][j] for i in range(len(key))) for j in range(d_att)]
        logits.append(sum(a * b for a, b in zip(q, kp)) / math.sqrt(d_att))
    top = max(logits)
    ex = [math.exp(x - top) for x in logits]
    z = sum(ex)
    w = [e / z for e in ex]
    pooled = [sum(w[i] * values[i][d] for i in range(len(values))) for d in range(len(values[0]))]
    return pooled, w


def brute_lstm_step(x, h, c, W_ih, W_hh, b):
    d = len(h)
    _cap("hidden", d, MAX_DIM)
    z = [b[j] + sum(x[i] * W_ih[i][j] for i in range(len(x))) + sum(h[i] * W_hh[i][j] for i in range(d))
         for j in range(4 * d)]
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    c_new = [sig(z[d + j]) * c[j] + sig(z[j]) * math.tanh(z[2 * d + j]) for j in range(d)]
    h_new = [sig(z[3 * d + j]) * math.tanh(c_new[j]) for j in range(d)]
    return h_new, c_new


# -- navigation -----------------------------------------------------------------

def brute_action_logits(state, candidates, W_c, W_u):
    """``state`` = concatenated [h; c_text; c_visual]; logits by explicit loops."""
    d_act = len(W_c[0])
    _cap("action width", d_act, MAX_DIM)
    left = [sum(state[i] * W_c[i][j] for i in range(len(state))) for j in range(d_act)]
    out = []
    for u in candidates:
        right = [sum(u[i] * W_u[i][j] for i in range(len(u))) for j in range(d_act)]
        out.append(sum(l * r for l, r in zip(left, right)))
    return out


def brute_log_softmax(logits, index):
    top = max(logits)
    z = sum(math.exp(x - top) for x in logits)
    return logits[index] - top - math.log(z)


def brute_reward(d_t, d_next, terminal: bool, d_th: float) -> float:
    if terminal:
        return 1.0 if d_t <= d_th else 0.0
    return d_t - d_next


def brute_returns(rewards, gamma):
    out = []
    for t in range(len(rewards)):
        total, scale = 0.0, 1.0
        for r in rewards[t:]:
            total += scale * r
            scale *= gamma
        out.append(total)
    return out


def brute_bc_loss(step_logps) -> float:
    """``step_logps``: log pi(teacher action | s) for every supervised step."""
    return -sum(step_logps) / len(step_logps)


def brute_pg_loss(trajectories, gamma, value_weight=0.5) -> float:
    """Each trajectory: dict with ``logps``, ``rewards``, ``values``, ``forced``."""
    policy, n_policy, value, n_value = 0.0, 0, 0.0, 0
    for tr in trajectories:
        R = brute_returns(tr["rewards"], gamma)
        for t in range(len(tr["rewards"])):
            adv = R[t] - tr["values"][t]
            if not tr["forced"][t]:
                policy += tr["logps"][t] * adv
                n_policy += 1
            value += (tr["values"][t] - R[t]) ** 2
            n_value += 1
    return -policy / n_policy + value_weight * value / n_value


def brute_episode_metrics(positions, edges, predicted, reference, d_th):
    pl = brute_path_length(positions, predicted)
    ne = brute_shortest_path(positions, edges, predicted[-1], reference[-1])[0]
    l = brute_shortest_path(positions, edges, reference[0], reference[-1])[0]
    success = ne <= d_th
    spl = (l / max(pl, l) if max(pl, l) > 0 else 1.0) if success else 0.0
    return {"PL": pl, "NE": ne, "success": success, "spl": spl}


# -- finite differences -----------------------------------------------------------

def fd_gradient(loss_fn: Callable[[dict], float], params: Mapping[str, np.ndarray], step: float = FD_STEP):
    """Central differences for every scalar entry of every array in ``params``."""
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(base)
            flat[i] = orig - step
            down = loss_fn(base)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def fd_gradient_forward(loss_fn, params, step: float = 1e-7):
    """One-sided differences; a coarse second opinion on :func:`fd_gradient`."""
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    f0 = loss_fn(base)
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            gflat[i] = (loss_fn(base) - f0) / step
            flat[i] = orig
        grads[name] = g
    return grads


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                       floor: float = 1e-6) -> tuple[float, str]:
    """Largest |a - n| / max(|a|, |n|, floor) over all entries, and where it occurred."""
    worst, where = 0.0, ""
    for name in numeric:
        a = np.asarray(analytic[name], dtype=np.float64)
        n = np.asarray(numeric[name], dtype=np.float64)
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if rel.size and rel.max() > worst:
            worst, where = float(rel.max()), name
    return worst, where
