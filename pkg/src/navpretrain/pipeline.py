"""Glue between the config, the data generators and the two trainers.

Everything here is a pure function of the ``RunConfig`` (master seed
included), so repeating a stage reproduces its files byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import os
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

from . import agent as ag
from . import optim as op
from .config import RunConfig
from .encoders import ModelCheckpoint, ModelDims, init_encoder_params
from .envgraph import EnvironmentGraph, load_environments, save_environments
from .negmine import build_discrimination_dataset
from .synthdata import (
    InstructionPathPair,
    Vocabulary,
    build_vocab,
    encode_pairs,
    generate_environment,
    make_corpus,
    read_jsonl,
    write_jsonl,
)


class HashMismatch(ValueError):
    """Artifacts produced under different configs or vocabularies were mixed."""


ENVS_FILE = "environments.json"
CORPUS_FILE = "corpus.jsonl"
DISC_FILE = "discrimination.jsonl"
VOCAB_FILE = "vocab.json"
STATS_FILE = "stats.json"


@dataclass
class Dataset:
    envs: dict[str, EnvironmentGraph]
    pairs: list[InstructionPathPair]  # positives: human_synth in all splits, speaker_synth in train
    discrimination: list[InstructionPathPair]  # human_synth positives with mined negatives
    vocab: Vocabulary
    unseen_env_ids: tuple[str, ...]

    def positives(self, split: str, provenance: str = "human_synth") -> list[InstructionPathPair]:
        return [p for p in self.pairs if p.split == split and p.provenance == provenance]

    def disc(self, split: str) -> list[InstructionPathPair]:
        return [p for p in self.discrimination if p.split == split]

    @property
    def feat_dim(self) -> int:
        return next(iter(self.envs.values())).panorama_tensor.shape[-1]

    def stats(self) -> dict:
        pos = Counter((p.split, p.provenance) for p in self.pairs)
        neg = Counter((p.split, p.provenance) for p in self.discrimination if p.label == 0)
        n_pos = Counter(p.split for p in self.discrimination if p.label == 1)
        train_envs = sorted({p.env_id for p in self.pairs if p.split == "train"})
        unseen = sorted({p.env_id for p in self.pairs if p.split == "val_unseen"})
        return {
            "pairs": {f"{s}/{prov}": n for (s, prov), n in sorted(pos.items())},
            "negatives": {f"{s}/{prov}": n for (s, prov), n in sorted(neg.items())},
            "negatives_per_positive": {s: sum(v for (s2, _), v in neg.items() if s2 == s) / n
                                       for s, n in sorted(n_pos.items())},
            "train_env_ids": train_envs,
            "val_unseen_env_ids": unseen,
            "unseen_disjoint_from_train": not set(train_envs) & set(unseen),
            "vocab_size": len(self.vocab.tokens),
            "vocab_hash": self.vocab.vocab_hash,
        }


def environment_ids(cfg: RunConfig) -> list[str]:
    n = cfg.data.n_train_envs + cfg.data.n_unseen_envs
    return [f"e{i:03d}" for i in range(n)]


def generate_dataset(cfg: RunConfig) -> Dataset:
    """Environments, corpus, vocabulary and the mined discrimination set."""
    d = cfg.data
    d.gen.validate()
    envs = []
    for i, env_id in enumerate(environment_ids(cfg)):
        gp = dataclasses.replace(d.gen, seed=cfg.seed * 1000 + i)
        envs.append(generate_environment(gp, env_id))
    unseen = tuple(e.env_id for e in envs[d.n_train_envs:])
    raw = make_corpus(envs, cfg.seed, d.n_paths_per_env, d.instructions_per_path, d.speaker_fraction,
                      d.corruption_rate, unseen, d.val_seen_fraction, d.n_paths_unseen)
    vocab = build_vocab([p.instruction.raw_tokens for p in raw
                         if p.split == "train" and p.provenance == "human_synth"], d.min_count)
    pairs = encode_pairs(raw, vocab)
    env_map = {e.env_id: e for e in envs}
    mining = cfg.mining_config()
    disc = []
    for split in ("train", "val_seen", "val_unseen"):
        pos = [p for p in pairs if p.split == split and p.provenance == "human_synth"]
        disc.extend(build_discrimination_dataset(pos, env_map, mining))
    return Dataset(env_map, pairs, disc, vocab, unseen)


def save_dataset(ds: Dataset, out_dir: str) -> None:
    with open(os.path.join(out_dir, ENVS_FILE), "w") as fp:
        save_environments(ds.envs.values(), fp)
    with open(os.path.join(out_dir, CORPUS_FILE), "w") as fp:
        write_jsonl(ds.pairs, fp)
    with open(os.path.join(out_dir, DISC_FILE), "w") as fp:
        write_jsonl(ds.discrimination, fp)
    with open(os.path.join(out_dir, VOCAB_FILE), "w") as fp:
        json.dump(ds.vocab.to_dict(), fp, sort_keys=True, indent=1)
    with open(os.path.join(out_dir, STATS_FILE), "w") as fp:
        json.dump(ds.stats(), fp, sort_keys=True, indent=2)


def load_dataset(data_dir: str) -> Dataset:
    with open(os.path.join(data_dir, ENVS_FILE)) as fp:
        envs = {e.env_id: e for e in load_environments(fp)}
    with open(os.path.join(data_dir, CORPUS_FILE)) as fp:
        pairs = read_jsonl(fp)
    with open(os.path.join(data_dir, DISC_FILE)) as fp:
        disc = read_jsonl(fp)
    with open(os.path.join(data_dir, VOCAB_FILE)) as fp:
        vocab = Vocabulary.from_dict(json.load(fp))
    unseen = tuple(sorted({p.env_id for p in pairs if p.split == "val_unseen"}))
    return Dataset(envs, pairs, disc, vocab, unseen)


def model_dims(cfg: RunConfig, ds: Dataset) -> ModelDims:
    m = cfg.model
    return ModelDims(len(ds.vocab.tokens), ds.feat_dim, m.d_emb, m.d_x, m.d_v, m.d_att, m.d_act,
                     m.n_lang_layers, m.n_vis_layers, tuple(cfg.tasks.horizons))


def check_vocab(checkpoint: ModelCheckpoint, ds: Dataset, what: str = "checkpoint") -> None:
    if checkpoint.vocab_hash and checkpoint.vocab_hash != ds.vocab.vocab_hash:
        raise HashMismatch(f"{what} was trained with vocabulary {checkpoint.vocab_hash}, "
                           f"the dataset uses {ds.vocab.vocab_hash}; token ids would not line up")


def check_data(checkpoint: ModelCheckpoint, cfg: RunConfig, what: str = "checkpoint") -> None:
    """Refuse checkpoints trained on data generated under a different config or seed."""
    theirs = checkpoint.meta.get("data_hash")
    if theirs and theirs != cfg.data_hash:
        raise HashMismatch(f"{what} was trained on data with hash {theirs}, "
                           f"the current config and seed give {cfg.data_hash}")


# -- training stages ------------------------------------------------------------

def pretrain(cfg: RunConfig, ds: Dataset, alpha: float | None = None,
             log: Callable[[dict], None] | None = None) -> tuple[ModelCheckpoint, list[dict]]:
    """Train the discriminator; ``alpha`` overrides the task mix (1 = CMA only)."""
    run = cfg.discriminator_run(alpha)
    params = init_encoder_params(model_dims(cfg, ds), cfg.seed)
    ck, hist = op.train_discriminator(params, ds.disc("train"), ds.envs, cfg.pretrain_optim(), run,
                                      ds.disc("val_seen"), cfg.config_hash, ds.vocab.vocab_hash, log)
    ck.meta.update({"alpha": run.alpha, "seed": cfg.seed, "data_hash": cfg.data_hash, "kind": "discriminator"})
    return ck, hist


def train_agent(cfg: RunConfig, ds: Dataset, mode: str | None = None, warm: ModelCheckpoint | None = None,
                train_pairs: Sequence[InstructionPathPair] | None = None, steps: int | None = None,
                log: Callable[[dict], None] | None = None) -> tuple[ModelCheckpoint, list[dict], dict]:
    """Train the navigation agent, optionally warm-started.

    Returns the checkpoint, the metrics history and the warm-start manifest.
    ``train_pairs`` defaults to the human_synth training positives.
    """
    run = cfg.agent_run(mode)
    if steps is not None:
        run = dataclasses.replace(run, steps=steps)
    params = ag.init_agent_params(model_dims(cfg, ds), cfg.seed)
    manifest = {"copied": [], "fresh": sorted(params), "ignored": []}
    if warm is not None:
        check_vocab(warm, ds, "warm-start checkpoint")
        params, manifest = ag.warm_start(params, warm)
    pairs = ds.positives("train") if train_pairs is None else list(train_pairs)
    ck, hist = op.train_agent(params, pairs, ds.envs, cfg.agent.rl, cfg.agent_optim(), run, manifest["copied"],
                              cfg.config_hash, ds.vocab.vocab_hash, log)
    ck.meta.update({"seed": cfg.seed, "warm": warm is not None, "data_hash": cfg.data_hash, "kind": "agent"})
    return ck, hist, manifest


def agent_params(checkpoint: ModelCheckpoint, cfg: RunConfig, ds: Dataset):
    """Agent parameters restored from an agent checkpoint."""
    check_vocab(checkpoint, ds)
    expected = ag.init_agent_params(model_dims(cfg, ds), cfg.seed)
    missing = sorted(set(expected) - set(checkpoint.params))
    if missing:
        raise HashMismatch("not an agent checkpoint; missing " + ", ".join(missing[:4]))
    return checkpoint.to_params(sorted(expected))


def encoder_params(checkpoint: ModelCheckpoint, cfg: RunConfig, ds: Dataset):
    check_vocab(checkpoint, ds)
    expected = init_encoder_params(model_dims(cfg, ds), cfg.seed)
    missing = sorted(set(expected) - set(checkpoint.params))
    if missing:
        raise HashMismatch("not a discriminator checkpoint; missing " + ", ".join(missing[:4]))
    return checkpoint.to_params(sorted(expected))
