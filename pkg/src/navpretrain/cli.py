"""Command-line entry point: ``navpretrain <subcommand> ...``.

Every subcommand writes a ``manifest.json`` next to its outputs and, on
failure, prints a one-line JSON error object to stderr and exits nonzero.
Set ``NAVPRETRAIN_VERBOSE=1`` for training progress on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

from . import evalmetrics as ev
from . import gradcheck
from . import pipeline as pl
from .auxtasks import rank_pairs, score_pairs, write_score_report
from .config import ConfigError, RunConfig, load_config
from .encoders import ModelCheckpoint
from .optim import write_history
from .synthdata import Vocabulary, read_jsonl, write_jsonl

EXIT_ERROR = 1
EXIT_REFUSED = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


def _git_rev() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _log(row: dict) -> None:
    if os.environ.get("NAVPRETRAIN_VERBOSE"):
        print(json.dumps(row, sort_keys=True), file=sys.stderr, flush=True)


def _prepare_out(path: str, force: bool) -> None:
    if os.path.exists(path) and (not os.path.isdir(path) or os.listdir(path)) and not force:
        raise CliError(f"output directory {path} already exists; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


def _write_manifest(out_dir: str, command: str, cfg: RunConfig, started: float, extra: dict | None = None):
    doc = {
        "command": command,
        "config_hash": cfg.config_hash,
        "data_hash": cfg.data_hash,
        "git_rev": _git_rev(),
        "seed": cfg.seed,
        "wall_time_s": round(time.time() - started, 3),
    }
    doc.update(extra or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fp:
        json.dump(doc, fp, sort_keys=True, indent=2)


def _write_config(out_dir: str, cfg: RunConfig) -> None:
    with open(os.path.join(out_dir, "config.json"), "w") as fp:
        json.dump(cfg.to_dict(), fp, sort_keys=True, indent=2)


def _resolve_config(args, data_dir: str | None = None) -> RunConfig:
    """``--config`` if given, else the config saved with the data; ``--seed`` wins over both.

    A config whose data sections disagree with the data directory is refused.
    """
    stored = None
    if data_dir is not None:
        path = os.path.join(data_dir, "config.json")
        if os.path.exists(path):
            stored = load_config(path)
    if args.config:
        cfg = load_config(args.config, args.seed)
    elif stored is not None:
        cfg = stored if args.seed is None else stored.with_seed(args.seed)
    else:
        cfg = load_config(None, args.seed)
    if stored is not None and stored.data_hash != cfg.data_hash:
        raise CliError(f"config/seed describe different data (hash {cfg.data_hash}) than {data_dir} "
                       f"(hash {stored.data_hash}); regenerate the data or drop --config/--seed",
                       EXIT_REFUSED)
    return cfg


def _load_checkpoint(path: str) -> ModelCheckpoint:
    if not os.path.exists(path):
        raise CliError(f"checkpoint {path} not found")
    return ModelCheckpoint.load(path)


# -- subcommands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    t0 = time.time()
    cfg = _resolve_config(args)
    _prepare_out(args.out, args.force)
    ds = pl.generate_dataset(cfg)
    pl.save_dataset(ds, args.out)
    _write_config(args.out, cfg)
    stats = ds.stats()
    _write_manifest(args.out, "gen-data", cfg, t0, {"vocab_hash": ds.vocab.vocab_hash})
    for key, n in stats["pairs"].items():
        print(f"pairs {key} = {n}")
    for key, n in stats["negatives"].items():
        print(f"negatives {key} = {n}")
    for split, r in stats["negatives_per_positive"].items():
        print(f"negatives per positive [{split}] = {r:g}")
    print(f"train envs = {len(stats['train_env_ids'])}, val_unseen envs = {len(stats['val_unseen_env_ids'])}, "
          f"disjoint = {stats['unseen_disjoint_from_train']}")
    return 0


def cmd_pretrain(args) -> int:
    t0 = time.time()
    cfg = _resolve_config(args, args.data_dir)
    ds = pl.load_dataset(args.data_dir)
    _prepare_out(args.out, args.force)
    ck, hist = pl.pretrain(cfg, ds, log=_log)
    ck.save(os.path.join(args.out, "checkpoint.json"))
    with open(os.path.join(args.out, "history.csv"), "w") as fp:
        write_history(hist, fp)
    _write_config(args.out, cfg)
    _write_manifest(args.out, "pretrain", cfg, t0, {"vocab_hash": ds.vocab.vocab_hash, "best": ck.meta})
    print(f"best val_seen AUC {ck.meta.get('val_auc', float('nan')):.4f} at step {ck.meta.get('step')}")
    return 0


def cmd_score(args) -> int:
    t0 = time.time()
    data_dir = os.path.dirname(os.path.abspath(args.pairs))
    cfg = _resolve_config(args, data_dir)
    ds = pl.load_dataset(data_dir)
    ck = _load_checkpoint(args.checkpoint)
    pl.check_data(ck, cfg)
    with open(args.pairs) as fp:
        pairs = read_jsonl(fp)
    scores = score_pairs(pl.encoder_params(ck, cfg, ds), pairs, ds.envs)
    out = args.out or "scores.csv"
    with open(out, "w") as fp:
        write_score_report(rank_pairs(pairs, scores), fp)
    _write_manifest(os.path.dirname(os.path.abspath(out)), "score", cfg, t0, {"scored": len(pairs)})
    print(f"scored {len(pairs)} pairs -> {out}")
    return 0


def cmd_train_agent(args) -> int:
    t0 = time.time()
    cfg = _resolve_config(args, args.data_dir)
    ds = pl.load_dataset(args.data_dir)
    warm = None
    if args.warm:
        warm = _load_checkpoint(args.warm)
        pl.check_vocab(warm, ds, "warm-start checkpoint")
        pl.check_data(warm, cfg, "warm-start checkpoint")
    _prepare_out(args.out, args.force)
    ck, hist, manifest = pl.train_agent(cfg, ds, args.mode, warm, log=_log)
    ck.save(os.path.join(args.out, "agent.json"))
    with open(os.path.join(args.out, "history.csv"), "w") as fp:
        write_history(hist, fp)
    _write_config(args.out, cfg)
    _write_manifest(args.out, "train-agent", cfg, t0, {"vocab_hash": ds.vocab.vocab_hash,
                                                       "mode": args.mode or cfg.agent.mode,
                                                       "warm": args.warm, "warm_start": manifest})
    print(f"trained {args.mode or cfg.agent.mode} agent for {len(hist)} updates; "
          f"{len(manifest['copied'])} tensors warm-started")
    return 0


def cmd_eval(args) -> int:
    t0 = time.time()
    cfg = _resolve_config(args, args.data_dir)
    ds = pl.load_dataset(args.data_dir)
    ck = _load_checkpoint(args.checkpoint)
    pl.check_data(ck, cfg)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), f"eval_{args.table}")
    _prepare_out(out, True)
    if args.table == "agent":
        params = pl.agent_params(ck, cfg, ds)
        pairs = [p for split in ("val_seen", "val_unseen") for p in ds.positives(split)]
        with open(os.path.join(out, "episodes.jsonl"), "w") as fp:
            table = ev.evaluate_agent(params, pairs, ds.envs, cfg.agent.rl, log_fp=fp)
        with open(os.path.join(out, "metrics.csv"), "w") as fp:
            table.to_csv(fp)
        for split, r in table.rows.items():
            print(f"{split}: n={r['n']} PL={r['PL']:.3f} NE={r['NE']:.3f} SR={r['SR']:.2f} SPL={r['SPL']:.2f}")
    elif args.table == "disc":
        params = pl.encoder_params(ck, cfg, ds)
        restrict = tuple(cfg.eval.restrict_strategies)
        aucs = ev.evaluate_discriminator(params, ds.discrimination, ds.envs, restrict)
        with open(os.path.join(out, "auc.csv"), "w") as fp:
            fp.write("split,negatives,auc\n")
            for split, a in aucs.items():
                fp.write(f"{split},{'+'.join(restrict)},{a!r}\n")
        for split, a in aucs.items():
            print(f"{split}: AUC ({'+'.join(restrict)} negatives only) = {a:.4f}")
    else:
        params = pl.encoder_params(ck, cfg, ds)
        corpus = ds.positives("train", "speaker_synth")
        if not corpus:
            raise CliError("the dataset has no speaker_synth pairs; set data.speaker_fraction > 0")
        report = ev.ranking_experiment(params, corpus, ds.envs, tuple(cfg.eval.fractions))
        with open(os.path.join(out, "ranked.csv"), "w") as fp:
            write_score_report(report["ranked"], fp)
        with open(os.path.join(out, "slices.csv"), "w") as fp:
            fp.write("fraction,n,clean_top,clean_bottom,enrichment\n")
            for q, sl in report["slices"].items():
                fp.write(f"{q!r},{len(sl['top'])},{sl['clean_top']!r},{sl['clean_bottom']!r},{sl['enrichment']!r}\n")
                for side in ("top", "bottom"):
                    with open(os.path.join(out, f"slice_{q:g}_{side}.jsonl"), "w") as sfp:
                        write_jsonl(sl[side], sfp)
                print(f"fraction {q:g}: n={len(sl['top'])} clean top={sl['clean_top']:.3f} "
                      f"bottom={sl['clean_bottom']:.3f} enrichment={sl['enrichment']:.2f}")
    _write_manifest(out, f"eval --table {args.table}", cfg, t0, {"checkpoint": ck.digest()})
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    cfg = _resolve_config(args)
    results = gradcheck.run_all(cfg.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status} {r.name}: max relative error {r.max_rel_error:.3e} ({r.where}, {r.n_params} scalars)")
    if args.out:
        _prepare_out(args.out, True)
        _write_manifest(args.out, "gradcheck", cfg, t0,
                        {"results": {r.name: r.max_rel_error for r in results}})
    return 0 if all(r.passed for r in results) else EXIT_ERROR


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="navpretrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, force=True):
        p.add_argument("--config", metavar="PATH", help="JSON run config (defaults built in)")
        p.add_argument("--seed", type=int, help="master seed; overrides the config")
        if force:
            p.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    p = sub.add_parser("gen-data", help="generate environments, corpus, vocabulary and negatives")
    common(p)
    p.add_argument("--out", metavar="PATH", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the instruction/path discriminator")
    common(p)
    p.add_argument("data_dir")
    p.add_argument("--out", metavar="PATH", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("score", help="score instruction/path pairs with a discriminator")
    common(p, force=False)
    p.add_argument("checkpoint")
    p.add_argument("pairs", help="pairs JSONL inside a gen-data directory")
    p.add_argument("--out", metavar="PATH", help="CSV destination (default scores.csv)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train-agent", help="train the navigation agent")
    common(p)
    p.add_argument("data_dir")
    p.add_argument("--out", metavar="PATH", required=True)
    p.add_argument("--warm", metavar="PATH", help="discriminator checkpoint to warm-start from")
    p.add_argument("--mode", choices=("sf", "rcm"))
    p.set_defaults(func=cmd_train_agent)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, force=False)
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--table", choices=("agent", "disc", "ranking"), required=True)
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every loss")
    common(p, force=False)
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        code = exc.code
    except pl.HashMismatch as exc:
        err = {"error": "HashMismatch", "message": f"refusing to continue: {exc}"}
        code = EXIT_REFUSED
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        code = EXIT_ERROR
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
