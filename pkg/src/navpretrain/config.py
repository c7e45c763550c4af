"""Run configuration: one JSON document, sectioned, hashed canonically."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from typing import Any

from .agent import RlConfig
from .negmine import MiningConfig
from .optim import AgentRun, DiscriminatorRun, OptimConfig
from .synthdata import GenParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    gen: GenParams = GenParams()
    n_train_envs: int = 80
    n_unseen_envs: int = 5
    n_paths_per_env: int = 6
    n_paths_unseen: int = 20
    instructions_per_path: int = 3
    speaker_fraction: float = 1.0
    corruption_rate: float = 0.5
    val_seen_fraction: float = 0.2
    min_count: int = 5


@dataclass(frozen=True)
class ModelSection:
    d_emb: int = 32
    d_x: int = 32
    d_v: int = 64
    d_att: int = 16
    d_act: int = 32
    n_lang_layers: int = 1
    n_vis_layers: int = 1


@dataclass(frozen=True)
class TasksSection:
    alpha: float = 0.5
    horizons: tuple[int, ...] = (1, 2)
    steps: int = 600
    eval_every: int = 100
    balanced: bool = True


@dataclass(frozen=True)
class OptimSection:
    pretrain: OptimConfig = OptimConfig(kind="adam", lr0=3e-3, batch_size=16)
    agent: OptimConfig = OptimConfig(kind="adam", lr0=1e-3, batch_size=32)


@dataclass(frozen=True)
class AgentSection:
    rl: RlConfig = RlConfig()
    mode: str = "rcm"
    steps: int = 20
    bc_steps: int = 300
    lr_cold: float = 1e-3
    lr_warm: float = 1e-3


@dataclass(frozen=True)
class EvalSection:
    fractions: tuple[float, ...] = (0.01, 0.02, 0.10)
    restrict_strategies: tuple[str, ...] = ("PR", "RW")
    ranking_bc_steps: int = 300


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataSection = DataSection()
    mining: MiningConfig = MiningConfig()
    model: ModelSection = ModelSection()
    tasks: TasksSection = TasksSection()
    optim: OptimSection = OptimSection()
    agent: AgentSection = AgentSection()
    eval: EvalSection = EvalSection()

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _from_plain(cls(), doc, "")

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @property
    def data_hash(self) -> str:
        """Digest of the sections that determine generated data (seed, data, mining, model)."""
        d = self.to_dict()
        canon = json.dumps({k: d[k] for k in ("seed", "data", "mining", "model")}, sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed)

    # derived component configs; the master seed flows into each of them
    def mining_config(self) -> MiningConfig:
        return dataclasses.replace(self.mining, seed=self.seed)

    def pretrain_optim(self) -> OptimConfig:
        return dataclasses.replace(self.optim.pretrain, seed=self.seed)

    def agent_optim(self) -> OptimConfig:
        return dataclasses.replace(self.optim.agent, seed=self.seed)

    def discriminator_run(self, alpha: float | None = None) -> DiscriminatorRun:
        t = self.tasks
        return DiscriminatorRun(t.alpha if alpha is None else alpha, tuple(t.horizons), t.steps, t.eval_every,
                                tuple(self.eval.restrict_strategies), t.balanced)

    def agent_run(self, mode: str | None = None) -> AgentRun:
        a = self.agent
        return AgentRun(mode or a.mode, a.steps, a.bc_steps, a.lr_cold, a.lr_warm)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(x) for x in obj]
    return obj


def _from_plain(defaults, doc: Any, where: str):
    """Overlay ``doc`` onto the dataclass instance ``defaults``."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(defaults)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in doc.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _from_plain(current, value, path)
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
            kwargs[name] = tuple(value)
        elif value is None and "None" in str(known[name].type):
            kwargs[name] = None
        elif isinstance(value, bool) != isinstance(current, bool):
            raise ConfigError(f"{path}: expected {type(current).__name__}, got {type(value).__name__}")
        elif current is None or isinstance(value, type(current)) or (
                isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool)):
            kwargs[name] = float(value) if isinstance(current, float) else value
        else:
            raise ConfigError(f"{path}: expected {type(current).__name__}, got {type(value).__name__}")
    try:
        return dataclasses.replace(defaults, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def load_config(path=None, seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path) as fp:
            try:
                doc = json.load(fp)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = RunConfig.from_dict(doc)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg
