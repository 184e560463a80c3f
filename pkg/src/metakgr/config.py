"""Flat ``key = value`` run configuration with file, environment and flag layers.

Resolution order, later layers winning: built-in defaults, the ``--config``
file, ``METAKGR_<KEY>`` environment variables, command-line flags. Unknown keys
are rejected in every layer.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .embed import EmbedConfig
from .errors import InvalidArgument
from .evaluate import AdaptConfig
from .meta import MetaConfig
from .policy import PolicyConfig
from .reinforce import TrainConfig

ENV_PREFIX = "METAKGR_"


@dataclass
class RunConfig:
    # paths
    graph: str = ""
    split: str = ""
    reward_model: str = ""
    checkpoint: str = ""
    out: str = ""
    # general
    seed: int = 0
    workers: int = 0                 # 0 = all available cores
    K: str = ""                      # threshold for split; comma list for sweep
    add_inverses: bool = True
    # environment and policy
    horizon: int = 3
    action_cap: int = 256
    dim: int = 64
    hidden: int = 64
    mlp: int = 64
    # REINFORCE
    rollouts: int = 20
    baseline: str = "moving-average"
    baseline_decay: float = 0.95
    entropy_weight: float = 0.01
    entropy_anneal: bool = True
    action_dropout: float = 0.1
    # meta-learning
    inner_lr: float = 1e-2
    outer_lr: float = 1e-3
    outer_optimizer: str = "adam"
    task_batch: int = 4
    support_size: int = 32
    query_size: int = 32
    inner_steps: int = 1
    outer_steps: int = 1000
    task_distribution: str = "uniform"
    eval_every: int = 0
    patience: int = 0
    # few-shot adaptation and decoding
    adapt_lr: float = 0.05
    adapt_steps: int = 20
    beam: int = 128
    score_mode: str = "max"
    filtered: bool = True
    top_k: int = 10
    # reward model
    embed_kind: str = "conve"
    embed_dim: int = 32
    embed_epochs: int = 100
    embed_lr: float = 0.01
    embed_batch_size: int = 128
    label_smoothing: float = 0.1
    reshape_height: int = 4
    filters: int = 8
    kernel: int = 3

    def resolved_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(self.dim, self.hidden, self.mlp, self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(rollouts=self.rollouts, lr=self.inner_lr, steps=self.inner_steps,
                           baseline=self.baseline, baseline_decay=self.baseline_decay,
                           entropy_weight=self.entropy_weight, entropy_anneal=self.entropy_anneal,
                           action_dropout=self.action_dropout)

    def meta_config(self) -> MetaConfig:
        return MetaConfig(inner_lr=self.inner_lr, outer_lr=self.outer_lr,
                          outer_optimizer=self.outer_optimizer, task_batch=self.task_batch,
                          support_size=self.support_size, query_size=self.query_size,
                          inner_steps=self.inner_steps, outer_steps=self.outer_steps,
                          task_distribution=self.task_distribution, eval_every=self.eval_every,
                          patience=self.patience)

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(lr=self.adapt_lr, steps=self.adapt_steps, beam_width=self.beam,
                           workers=self.resolved_workers(), score_mode=self.score_mode,
                           seed=self.seed)

    def embed_config(self) -> EmbedConfig:
        return EmbedConfig(kind=self.embed_kind, dim=self.embed_dim, epochs=self.embed_epochs,
                           lr=self.embed_lr, batch_size=self.embed_batch_size,
                           label_smoothing=self.label_smoothing,
                           reshape_height=self.reshape_height, filters=self.filters,
                           kernel=self.kernel, seed=self.seed)

    def render(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, raw):
    kind = type(getattr(RunConfig, key))
    text = str(raw).strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise InvalidArgument(f"config key {key!r}: cannot read {text!r} as {kind.__name__}") from None


def _apply(values: dict, source: str, out: dict):
    for key, raw in values.items():
        if key not in _FIELDS:
            raise InvalidArgument(f"unknown config key {key!r} in {source}")
        out[key] = _coerce(key, raw)


def read_file(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), delimiters=("=",))
    parser.optionxform = str  # keep key case (``K``)
    text = Path(path).read_text(encoding="utf-8")
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise InvalidArgument(f"{path}: malformed config ({exc})") from None
    return dict(parser["run"])


def resolve(config_path=None, flags=None, environ=None) -> RunConfig:
    """Merge the four layers; ``flags`` holds only the values given on the command line."""
    values: dict = {}
    if config_path:
        _apply(read_file(config_path), str(config_path), values)
    environ = os.environ if environ is None else environ
    env_values = {k[len(ENV_PREFIX):]: v for k, v in sorted(environ.items())
                  if k.startswith(ENV_PREFIX)}
    env_values = {(k if k in _FIELDS else k.lower()): v for k, v in env_values.items()}
    _apply(env_values, "environment", values)
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise InvalidArgument(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return RunConfig(**values)
