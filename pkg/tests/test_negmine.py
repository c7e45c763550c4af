from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from navpretrain.envgraph import Path, make_graph
from navpretrain.negmine import (
    MiningConfig,
    MiningError,
    build_discrimination_dataset,
    mine_partial_reorder,
    mine_path_substitution,
    mine_random_walk,
    rw_acceptance,
)
from navpretrain.synthdata import (
    GenParams,
    Instruction,
    InstructionPathPair,
    generate_environment,
    make_corpus,
    sample_reference_path,
)


def _is_reference(env, path):
    return 4 <= path.n_edges <= 6 and env.path_length(path) > 5.0 and len(set(path.node_ids)) == len(path)


def test_pr_unique_permutation():
    p = Path("x", ("a", "b", "c", "d"), disconnected_ok=True)
    assert mine_partial_reorder(p, np.random.default_rng(0)).node_ids == ("a", "c", "b", "d")


def test_pr_too_short():
    with pytest.raises(MiningError):
        mine_partial_reorder(Path("x", ("a", "b", "c"), disconnected_ok=True), np.random.default_rng(0))


@given(st.integers(0, 10_000))
def test_pr_seven_nodes(seed):
    p = Path("x", tuple("abcdefg"), disconnected_ok=True)
    q = mine_partial_reorder(p, np.random.default_rng(seed))
    assert q.first == "a" and q.last == "g" and q.node_ids != p.node_ids
    assert sorted(q.node_ids[1:-1]) == list("bcdef")
    assert q.disconnected_ok


def test_pr_permutation_is_uniform():
    p = Path("x", tuple("abcde"), disconnected_ok=True)
    rng = np.random.default_rng(1)
    counts = Counter(mine_partial_reorder(p, rng).node_ids for _ in range(5000))
    assert len(counts) == 5  # 3! - 1 non-identity orders
    expected = 1000
    assert all(abs(c - expected) < 5 * np.sqrt(expected) for c in counts.values())


@given(st.integers(0, 2000), st.sampled_from(["start", "end"]))
def test_random_walk_properties(seed, anchor):
    env = generate_environment(GenParams(seed=seed))
    rng = np.random.default_rng(seed)
    pos = sample_reference_path(env, rng)
    try:
        neg = mine_random_walk(env, pos, rng, anchor)
    except MiningError as exc:
        assert exc.attempts == 500
        return
    assert neg.n_edges == pos.n_edges and len(set(neg.node_ids)) == len(neg)
    if anchor == "start":
        assert neg.first == pos.first
        d = env.geodesic_distance(neg.last, pos.last)
    else:
        assert neg.last == pos.last
        d = env.geodesic_distance(neg.first, pos.first)
    assert d >= 5.0


def test_random_walk_star_graph_exhausts_budget():
    env = make_graph("star", {"c": (0, 0), "n": (0, 1), "e": (1, 0), "w": (-1, 0)},
                     [("c", "n"), ("c", "e"), ("c", "w")])
    pos = Path("star", ("n", "c", "e"))
    with pytest.raises(MiningError) as err:
        mine_random_walk(env, pos, np.random.default_rng(0), "start", 5.0, retry_budget=40)
    assert err.value.attempts == 40
    assert rw_acceptance(env, pos, "start", 5.0) == 0.0


def test_rw_acceptance_line():
    env = make_graph("line", {str(i): (0, i) for i in range(8)}, [(str(i), str(i + 1)) for i in range(7)])
    pos = Path("line", ("3", "4", "5"))
    # from 3, two edges reach 1 or 5; only 1 is >= 4 away from 5
    assert rw_acceptance(env, pos, "start", 4.0) == pytest.approx(0.5)


@given(st.integers(0, 2000))
def test_path_substitution(seed):
    env = generate_environment(GenParams(seed=seed))
    rng = np.random.default_rng(seed)
    pos = sample_reference_path(env, rng)
    neg = mine_path_substitution(env, pos, rng)
    assert neg.env_id == pos.env_id and neg.node_ids != pos.node_ids and _is_reference(env, neg)


def test_path_substitution_prefers_pool(env25):
    rng = np.random.default_rng(0)
    a = sample_reference_path(env25, rng)
    b = sample_reference_path(env25, rng)
    other_env = Path("elsewhere", b.node_ids)
    assert mine_path_substitution(env25, a, rng, pool=[a, b, other_env]).node_ids == b.node_ids


def test_dataset_ratio_and_histogram(small_world):
    envs = list(small_world.values())
    pos = [p for p in make_corpus(envs, 0, 4, speaker_fraction=0.0) if p.label == 1]
    data = build_discrimination_dataset(pos, small_world)
    by_group = Counter(p.group_id for p in data if p.label == 0)
    assert set(by_group.values()) == {10} and len(by_group) == len(pos)
    positives = {p.pair_id: p for p in data if p.label == 1}
    for neg in (p for p in data if p.label == 0):
        parent = positives[neg.group_id]
        assert neg.instruction == parent.instruction
        assert neg.split == parent.split and neg.env_id == parent.env_id
    hist = Counter()
    for gid in positives:
        hist[tuple(sorted(Counter(p.strategy[:2] for p in data if p.group_id == gid).items()))] += 1
    assert hist[(("PR", 3), ("PS", 4), ("RW", 3))] >= 0.8 * len(positives)
    again = build_discrimination_dataset(pos, small_world)
    assert [p.to_dict() for p in again] == [p.to_dict() for p in data]


def test_ineligible_positive_gets_extra_ps(small_world):
    env = small_world["w0"]
    short = sample_reference_path(env, np.random.default_rng(0), min_edges=2, max_edges=2, min_len=0.0)
    pair = InstructionPathPair("p0", Instruction(("go",), (0,)), short, 1, "human_synth", "train")
    data = build_discrimination_dataset([pair], small_world, MiningConfig(seed=3))
    strategies = Counter(p.strategy for p in data if p.label == 0)
    assert sum(strategies.values()) == 10 and "PR" not in strategies
