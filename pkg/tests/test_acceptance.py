"""Acceptance gate: nine criteria, one summary line each.

The heavy criteria share one dataset and one pair of pretrained
discriminators per seed.  Every test records its line before asserting, so
failures still show their numbers in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from navpretrain import agent as ag
from navpretrain import cli
from navpretrain import experiments as ex
from navpretrain import gradcheck
from navpretrain.auxtasks import (
    alignment_matrix,
    alignment_score,
    auc,
    cma_loss,
    combined_loss,
    infonce_loss,
)
from navpretrain.config import RunConfig
from navpretrain.encoders import DTYPE
from navpretrain.evalmetrics import aggregate, episode_metrics
from navpretrain.optim import AgentRun, teacher_accuracy, train_agent
from navpretrain.oracles import (
    ABS_TOL,
    FD_REL_TOL,
    brute_action_logits,
    brute_alignment_matrix,
    brute_alignment_score,
    brute_auc,
    brute_bc_loss,
    brute_cma_loss,
    brute_combined,
    brute_episode_metrics,
    brute_infonce,
    brute_log_softmax,
    brute_pg_loss,
    brute_returns,
    brute_reward,
)
from navpretrain.pipeline import generate_dataset, model_dims
from navpretrain.synthdata import GenParams, generate_environment, sample_reference_path

from conftest import ACCEPTANCE_LINES, TINY_RUN

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
N_RANDOM = 100


def record(n: int, ok: bool, text: str) -> None:
    ACCEPTANCE_LINES[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}"


class SeedRuns:
    """Default-config dataset and both discriminators for each seed, built on demand."""

    def __init__(self):
        self.data, self.models = {}, {}

    def cfg(self, seed: int) -> RunConfig:
        return RunConfig().with_seed(seed)

    def ds(self, seed: int):
        if seed not in self.data:
            self.data[seed] = generate_dataset(self.cfg(seed))
        return self.data[seed]

    def discriminators(self, seed: int):
        if seed not in self.models:
            self.models[seed] = ex.pretrain_both(self.cfg(seed), self.ds(seed))
        return self.models[seed]


@pytest.fixture(scope="session")
def runs():
    return SeedRuns()


# -- 1: equation oracles ------------------------------------------------------------

def _t(x):
    return torch.tensor(x, dtype=DTYPE)


def _replayed_logp(params, step, action):
    snap = step.snapshot
    logits = brute_action_logits(snap["state"].tolist(), snap["candidates"].tolist(),
                                 params["agent.W_c"].detach().numpy().tolist(),
                                 params["agent.W_u"].detach().numpy().tolist())
    allowed = [i for i, ok in enumerate(snap["allowed"]) if ok]
    return brute_log_softmax([logits[i] for i in allowed], allowed.index(action))


def _oracle_errors() -> dict[str, float]:
    worst: dict[str, float] = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), float(err))

    for i in range(N_RANDOM):
        rng = np.random.default_rng([11, i])
        n, m, d = int(rng.integers(1, 7)), int(rng.integers(1, 13)), int(rng.integers(1, 9))
        HX, HV = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        A = alignment_matrix(_t(HX), _t(HV))
        B = brute_alignment_matrix(HX.tolist(), HV.tolist())
        note("alignment_matrix", np.abs(A.numpy() - np.array(B)).max())
        note("alignment_score", abs(float(alignment_score(A)) - brute_alignment_score(B)))

        k = int(rng.integers(1, 20))
        s, y = rng.normal(scale=3, size=k), rng.integers(0, 2, size=k)
        note("cma_loss", abs(float(cma_loss(s, y)) - brute_cma_loss(s.tolist(), y.tolist())))
        a, b, alpha = rng.normal(), rng.normal(), rng.uniform()
        note("combined_loss", abs(combined_loss(a, b, alpha) - brute_combined(a, b, alpha)))

        s = rng.integers(0, 6, size=20).astype(float)
        y = np.r_[1, 0, rng.integers(0, 2, size=18)]
        note("auc", abs(auc(s, y) - brute_auc(s.tolist(), y.tolist())))

        M, P, feat, dv = int(rng.integers(2, 6)), int(rng.integers(2, 6)), 3, 2
        h = rng.normal(size=(M, dv))
        lengths = [M] + [int(rng.integers(1, M + 1)) for _ in range(P - 1)]
        pooled = rng.normal(size=(P, M, feat))
        W = {kk: rng.normal(size=(feat, dv)) for kk in (1, 2)}
        got = infonce_loss(_t(h[None]), _t(pooled[None]), torch.tensor([lengths]), {kk: _t(v) for kk, v in W.items()})
        want = brute_infonce(h.tolist(), [pooled[p, :L].tolist() for p, L in enumerate(lengths)],
                             {kk: v.tolist() for kk, v in W.items()})
        note("infonce_loss", abs(float(got) - want))

        rewards, gamma = rng.normal(size=int(rng.integers(1, 12))).tolist(), float(rng.choice([1.0, 0.99, 0.7]))
        note("returns", np.abs(np.subtract(ag.discounted_returns(rewards, gamma), brute_returns(rewards, gamma))).max())

        # environment-level quantities on a small world
        env = generate_environment(GenParams(seed=1000 + i, n_nodes=10, area_side=8.0, connect_radius=3.5))
        positions = {nd.node_id: nd.position for nd in env.nodes}
        ref = sample_reference_path(env, rng, min_edges=1, max_edges=4, min_len=0.0)
        pred = sample_reference_path(env, rng, min_edges=1, max_edges=4, min_len=0.0)
        d_th = float(rng.uniform(0.5, 4.0))
        res = episode_metrics(env, pred, ref, d_th)
        bm = brute_episode_metrics(positions, env.edges, pred.node_ids, ref.node_ids, d_th)
        note("PL", abs(res.PL - bm["PL"]))
        note("NE", abs(res.NE - bm["NE"]))
        note("SPL", abs(res.spl_term - bm["spl"]))
        note("SR", 0.0 if res.success == bm["success"] else 1.0)
        results = [res]
        for _ in range(4):
            p2 = sample_reference_path(env, rng, min_edges=1, max_edges=4, min_len=0.0)
            results.append(episode_metrics(env, p2, ref, d_th))
        agg = aggregate(results)
        brute = [brute_episode_metrics(positions, env.edges, r.predicted.node_ids, ref.node_ids, d_th) for r in results]
        note("SR", abs(agg["SR"] - 100.0 * sum(x["success"] for x in brute) / len(brute)))
        note("SPL", abs(agg["SPL"] - 100.0 * sum(x["spl"] for x in brute) / len(brute)))

        u, v = pred.node_ids[0], pred.node_ids[1] if len(pred) > 1 else pred.node_ids[0]
        goal = ref.last
        step_r = ag.reward(env, u, v, goal, 0, 5, d_th)
        note("reward", abs(step_r - brute_reward(env.geodesic_distance(u, goal), env.geodesic_distance(v, goal),
                                                 False, d_th)))
        term = ag.reward(env, u, None, goal, 5, 5, d_th)
        note("reward", abs(term - brute_reward(env.geodesic_distance(u, goal), None, True, d_th)))

        # policy losses replayed from recorded states
        tw, pairs = gradcheck.tiny_world(i % 17)
        eps = [ag.Episode.from_pair(p, tw) for p in pairs if p.label == 1]
        params = ag.init_agent_params(gradcheck.TINY_DIMS, i)
        with torch.no_grad():
            params["agent.value.w"].normal_(generator=torch.Generator().manual_seed(i))
            teach = ag.rollout_batch({tw.env_id: tw}, eps, params, "teacher", ag.RlConfig(max_steps=6),
                                     record_snapshots=True)
            rl = ag.RlConfig(max_steps=6, gamma=0.9)
            sampled = ag.rollout_batch({tw.env_id: tw}, eps, params, "sample", rl, np.random.default_rng(i),
                                       record_snapshots=True)
        logps = [_replayed_logp(params, s, s.teacher_action) for tr in teach for s in tr.steps if not s.forced]
        note("bc_loss", abs(float(ag.bc_loss(teach)) - brute_bc_loss(logps)))
        w, b0 = params["agent.value.w"].detach().numpy(), float(params["agent.value.b"].detach())
        flat = [{"logps": [_replayed_logp(params, s, s.action) for s in tr.steps], "rewards": list(tr.rewards),
                 "values": [float(s.snapshot["h"] @ w + b0) for s in tr.steps],
                 "forced": [s.forced for s in tr.steps]} for tr in sampled]
        if any(not f for tr in flat for f in tr["forced"]):
            note("pg_loss", abs(float(ag.pg_loss(sampled, rl.gamma, rl.value_weight))
                                - brute_pg_loss(flat, rl.gamma, rl.value_weight)))
    return worst


def test_criterion_1_equation_oracles():
    t0 = time.time()
    worst = _oracle_errors()
    elapsed = time.time() - t0
    expected = {"alignment_matrix", "alignment_score", "infonce_loss", "cma_loss", "combined_loss", "reward",
                "returns", "bc_loss", "pg_loss", "auc", "SPL", "NE", "SR", "PL"}
    ok = set(worst) == expected and max(worst.values()) <= ABS_TOL and elapsed < 60
    top = max(worst, key=worst.get)
    record(1, ok, f"{len(worst)} oracles x {N_RANDOM} instances, worst abs error {worst[top]:.1e} ({top}), "
                  f"{elapsed:.0f}s")
    assert set(worst) == expected
    assert max(worst.values()) <= ABS_TOL, worst
    assert elapsed < 60


# -- 2: gradient checks ---------------------------------------------------------------

def test_criterion_2_gradient_checks():
    t0 = time.time()
    results = gradcheck.run_all(0)
    elapsed = time.time() - t0
    ok = all(r.passed for r in results) and elapsed < 300
    record(2, ok, ", ".join(f"{r.name} {r.max_rel_error:.1e}" for r in results) + f" (< {FD_REL_TOL:g}), {elapsed:.0f}s")
    assert ok


# -- 3: miner properties ----------------------------------------------------------------

def _all_pairs_geodesic(env) -> dict:
    ids = [nd.node_id for nd in env.nodes]
    idx = {n: i for i, n in enumerate(ids)}
    D = np.full((len(ids), len(ids)), np.inf)
    np.fill_diagonal(D, 0.0)
    for a, b in env.edges:
        w = math.dist(env.node(a).position, env.node(b).position)
        D[idx[a], idx[b]] = D[idx[b], idx[a]] = w
    for k in range(len(ids)):
        D = np.minimum(D, D[:, k:k + 1] + D[k:k + 1, :])
    return {(a, b): D[idx[a], idx[b]] for a in ids for b in ids}


def test_criterion_3_miner_properties(runs):
    cfg = runs.cfg(0)
    ds = runs.ds(0)
    stats = ds.stats()
    ratio_ok = all(r == 10 for r in stats["negatives_per_positive"].values())
    positives = [p for p in ds.discrimination if p.label == 1][:1000]
    keep = {p.pair_id for p in positives}
    by_id = {p.pair_id: p for p in positives}
    negatives = [p for p in ds.discrimination if p.label == 0 and p.group_id in keep]
    geo = {}
    violations = []
    counts = {"PS": 0, "RW": 0, "PR": 0}
    for neg in negatives:
        pos = by_id[neg.group_id]
        env = ds.envs[pos.env_id]
        if env.env_id not in geo:
            geo[env.env_id] = _all_pairs_geodesic(env)
        q, p = neg.path, pos.path
        kind = neg.strategy[:2]
        counts[kind] += 1
        if neg.instruction != pos.instruction:
            violations.append((neg.pair_id, "instruction changed"))
        if kind == "PR":
            if not (q.first == p.first and q.last == p.last and sorted(q.node_ids[1:-1]) == sorted(p.node_ids[1:-1])
                    and q.node_ids != p.node_ids):
                violations.append((neg.pair_id, "PR"))
        elif kind == "RW":
            if neg.strategy == "RW_start":
                good = q.first == p.first and geo[env.env_id][(q.last, p.last)] >= cfg.mining.rw_distance_threshold
            else:
                good = q.last == p.last and geo[env.env_id][(q.first, p.first)] >= cfg.mining.rw_distance_threshold
            simple = len(set(q.node_ids)) == len(q) and all(env.has_edge(a, b) for a, b in zip(q.node_ids, q.node_ids[1:]))
            if not (good and simple and q.n_edges == p.n_edges):
                violations.append((neg.pair_id, "RW"))
        else:
            if not (q.env_id == p.env_id and q.node_ids != p.node_ids):
                violations.append((neg.pair_id, "PS"))
    per_positive = len(negatives) / len(positives)
    ok = not violations and ratio_ok and len(positives) == 1000 and per_positive == 10
    record(3, ok, f"{len(positives)} positives, {len(negatives)} negatives (PS {counts['PS']}, RW {counts['RW']}, "
                  f"PR {counts['PR']}), {len(violations)} violations, dataset ratio "
                  f"{sorted(set(stats['negatives_per_positive'].values()))}")
    assert not violations, violations[:5]
    assert ok


# -- 4: auxiliary task (CMA vs CMA+NVS) -------------------------------------------------

def test_criterion_4_auxiliary_task(runs):
    t0 = time.time()
    rows = []
    for seed in SEEDS:
        ck_cma, ck_both = runs.discriminators(seed)
        rows.append(ex.auxiliary_task_row(runs.cfg(seed), runs.ds(seed), ck_cma, ck_both))
    mean_cma = float(np.mean([r["auc_cma"] for r in rows]))
    mean_both = float(np.mean([r["auc_cma_nvs"] for r in rows]))
    wins = sum(r["auc_cma_nvs"] > r["auc_cma"] for r in rows)
    ok = mean_both >= mean_cma - 0.01 and wins >= 3
    per_seed = " ".join(f"{r['auc_cma']:.3f}/{r['auc_cma_nvs']:.3f}" for r in rows)
    record(4, ok, f"val_unseen AUC (PR+RW) mean CMA {mean_cma:.3f} vs CMA+NVS {mean_both:.3f}, "
                  f"NVS ahead in {wins}/5 seeds [{per_seed}], {time.time() - t0:.0f}s")
    assert ok


# -- 5: ranking the speaker corpus ----------------------------------------------------------

def test_criterion_5_ranking(runs):
    rows = []
    for seed in SEEDS:
        ck_cma, _ = runs.discriminators(seed)
        rows.append(ex.ranking_row(runs.cfg(seed), runs.ds(seed), ck_cma, 0.10))
    enriched = [r["clean_top"] >= 1.5 * r["clean_bottom"] for r in rows]
    sr_wins = sum(r["sr_top"] > r["sr_bottom"] for r in rows)
    ok = all(enriched) and sr_wins >= 4
    detail = " ".join(f"{r['clean_top']:.2f}/{r['clean_bottom']:.2f}" for r in rows)
    srs = " ".join(f"{r['sr_top']:.1f}/{r['sr_bottom']:.1f}" for r in rows)
    record(5, ok, f"clean fraction top/bottom 10% [{detail}] (>= 1.5x in {sum(enriched)}/5); "
                  f"val_unseen SR top/bottom [{srs}] (top ahead in {sr_wins}/5)")
    assert ok


# -- 6: warm start -----------------------------------------------------------------------

def test_criterion_6_warm_start(runs):
    rows = []
    for seed in SEEDS:
        _, ck_both = runs.discriminators(seed)
        rows.append(ex.warm_start_row(runs.cfg(seed), runs.ds(seed), ck_both, "rcm"))
    wins = sum(r["sr_warm"] >= r["sr_cold"] for r in rows)
    ok = wins >= 4 and all(r["n_copied"] > 0 for r in rows)
    srs = " ".join(f"{r['sr_cold']:.1f}/{r['sr_warm']:.1f}" for r in rows)
    record(6, ok, f"RCM val_unseen SR cold/warm [{srs}], warm >= cold in {wins}/5 seeds")
    assert ok


# -- 7: RL sanity on an overfit corpus -----------------------------------------------------

OVERFIT = {"data": {"n_train_envs": 3, "n_unseen_envs": 1, "n_paths_per_env": 2, "n_paths_unseen": 2,
                    "instructions_per_path": 1, "speaker_fraction": 0.0, "val_seen_fraction": 0.0,
                    "min_count": 1}}


def test_criterion_7_rl_sanity():
    cfg = RunConfig.from_dict(OVERFIT)
    ds = generate_dataset(cfg)
    train = ds.positives("train")
    rl = cfg.agent.rl
    params = ag.init_agent_params(model_dims(cfg, ds), cfg.seed)
    eps = [ag.Episode.from_pair(p, ds.envs[p.env_id]) for p in train]

    def accuracy():
        with torch.no_grad():
            return teacher_accuracy(ag.rollout_batch(ds.envs, eps, params, "teacher", rl))

    def train_sr():
        with torch.no_grad():
            trajs = ag.rollout_batch(ds.envs, eps, params, "greedy", rl)
        return 100.0 * np.mean([ag.visited_nodes(t)[-1] == e.goal or
                                ds.envs[e.env_id].geodesic_distance(ag.visited_nodes(t)[-1], e.goal) <= rl.d_th
                                for t, e in zip(trajs, eps)])

    bc_steps = 0
    while accuracy() <= 0.95 and bc_steps < 2000:
        train_agent(params, train, ds.envs, rl, cfg.agent_optim(), AgentRun("bc", steps=100))
        bc_steps += 100
    acc = accuracy()
    sr_before = train_sr()
    logged = []
    train_agent(params, train, ds.envs, rl, cfg.agent_optim(), AgentRun("rcm", steps=100, bc_steps=0),
                on_rollouts=lambda split, trajs: logged.extend(trajs))
    sr_after = train_sr()
    reached, broken = 0, 0
    for tr in logged:
        env = ds.envs[tr.env_id]
        nodes = ag.visited_nodes(tr)
        if nodes[-1] != tr.goal:
            continue
        reached += 1
        progress = sum(tr.rewards[:-1])
        expected = env.geodesic_distance(nodes[0], tr.goal) - env.geodesic_distance(nodes[-1], tr.goal)
        R0 = ag.discounted_returns(tr.rewards, 1.0)[0]
        if progress != expected or R0 != progress + tr.rewards[-1]:
            broken += 1
    ok = acc > 0.95 and sr_after >= sr_before - 5 and reached > 0 and broken == 0
    record(7, ok, f"teacher accuracy {100 * acc:.1f}% after {bc_steps} BC batches; train SR {sr_before:.1f} -> "
                  f"{sr_after:.1f} after 100 interleaved PG batches; telescoping exact on {reached - broken}/"
                  f"{reached} goal-reaching trajectories")
    assert ok


# -- 8: determinism -------------------------------------------------------------------------

METRIC_FILES = ("pretrain/history.csv", "agent/history.csv", "eval_disc/auc.csv", "eval_agent/metrics.csv",
                "eval_ranking/slices.csv", "eval_ranking/ranked.csv", "rows_aux.csv", "rows_gap.csv")


def _pipeline(root, cfg_path):
    def run(*argv):
        code = cli.main([str(a) for a in argv])
        assert code == 0, argv

    data = root / "data"
    run("gen-data", "--config", cfg_path, "--out", data)
    run("pretrain", data, "--out", root / "pretrain")
    run("train-agent", data, "--out", root / "agent", "--warm", root / "pretrain" / "checkpoint.json")
    run("eval", root / "pretrain" / "checkpoint.json", data, "--table", "disc", "--out", root / "eval_disc")
    run("eval", root / "agent" / "agent.json", data, "--table", "agent", "--out", root / "eval_agent")
    run("eval", root / "pretrain" / "checkpoint.json", data, "--table", "ranking", "--out", root / "eval_ranking")
    cfg = RunConfig.from_dict(TINY_RUN)
    ds = generate_dataset(cfg)
    ck_cma, ck_both = ex.pretrain_both(cfg, ds)
    with open(root / "rows_aux.csv", "w") as fp:
        ex.write_rows([ex.auxiliary_task_row(cfg, ds, ck_cma, ck_both)], fp)
    with open(root / "rows_gap.csv", "w") as fp:
        ex.write_rows([ex.alignment_gap_row(cfg, ds, ck_both)], fp)


def test_criterion_8_determinism(tmp_path, capsys):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(TINY_RUN))
    for name in ("a", "b"):
        _pipeline(tmp_path / name, cfg_path)
    capsys.readouterr()
    same = [f for f in METRIC_FILES if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    ok = len(same) == len(METRIC_FILES)
    record(8, ok, f"{len(same)}/{len(METRIC_FILES)} metric CSVs bit-identical across two full runs")
    assert ok, sorted(set(METRIC_FILES) - set(same))


# -- 9: alignment gap on PR negatives -----------------------------------------------------------

def test_criterion_9_alignment_gap(runs):
    _, ck_both = runs.discriminators(0)
    row = ex.alignment_gap_row(runs.cfg(0), runs.ds(0), ck_both)
    ok = row["mean_gap"] > 0 and row["p_value"] < 0.01 and row["n_pairs"] >= 200
    record(9, ok, f"mean score(positive) - score(PR negative) = {row['mean_gap']:.4f} over {row['n_pairs']} pairs, "
                  f"sign test {row['wins']}/{row['n_untied']} p = {row['p_value']:.2e}")
    assert ok
