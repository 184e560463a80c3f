"""Relation-specific REINFORCE training of the walk policy."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import policy
from .errors import InvalidArgument
from .optim import ParamSet, sgd_step
from .policy import action_dropout  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "mean_reward", "loss", "hit_rate")


@dataclass
class TrainConfig:
    rollouts: int = 20
    lr: float = 0.01
    steps: int = 1
    batch_size: int = 0            # triples per step; 0 = the whole task
    baseline: str = "moving-average"
    baseline_decay: float = 0.95
    entropy_weight: float = 0.01
    entropy_anneal: bool = True
    action_dropout: float = 0.1

    def validate(self):
        if self.lr < 0:
            raise InvalidArgument(f"learning rate must be >= 0, got {self.lr}")
        if self.rollouts < 1:
            raise InvalidArgument("rollouts must be >= 1")
        if self.baseline not in ("none", "moving-average"):
            raise InvalidArgument(f"unknown baseline {self.baseline!r}")
        for name in ("baseline_decay", "action_dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must lie in [0, 1)")
        if self.entropy_weight < 0:
            raise InvalidArgument("entropy_weight must be >= 0")


class Baseline:
    """Exponential moving average of batch-mean rewards (or a constant 0)."""

    def __init__(self, kind="moving-average", decay=0.95):
        self.kind, self.decay = kind, decay
        self.value = None

    def current(self, rewards) -> float:
        if self.kind == "none":
            return 0.0
        return float(np.mean(rewards)) if self.value is None else self.value

    def update(self, rewards):
        if self.kind == "none":
            return
        m = float(np.mean(rewards))
        self.value = m if self.value is None else self.decay * self.value + (1 - self.decay) * m


def batch_loss(p, env, batch: policy.RolloutBatch, baseline=0.0, entropy_weight=0.0):
    """REINFORCE surrogate ``-(1/N) sum_i (R_i - b) sum_t log pi - w * mean entropy``.

    ``p`` maps parameter names to Tensors. Its gradient is the score-function
    estimate of the gradient of the expected terminal reward's negation.
    """
    if len(batch) == 0:
        raise InvalidArgument("cannot compute a loss over an empty batch")
    logp_sum, entropy = policy.replay_log_probs(p, env, batch)
    advantage = np.asarray(batch.rewards, dtype=np.float64) - baseline
    loss = ad.neg(ad.mean(ad.mul(logp_sum, advantage)))
    if entropy_weight:
        loss = ad.sub(loss, ad.mul(ad.mean(entropy), entropy_weight))
    return loss


def policy_gradient(params: ParamSet, env, batch, baseline=0.0, entropy_weight=0.0):
    return ad.value_and_grad(lambda p: batch_loss(p, env, batch, baseline, entropy_weight), params)


def sample_batch(params, env, triples, config: TrainConfig, rng, reward_model=None):
    src, rq, ans = policy.query_arrays(triples, config.rollouts)
    return policy.rollout(params, env, src, rq, ans, rng=rng, mode="sample",
                          action_dropout=config.action_dropout, reward_model=reward_model)


class TrainLog:
    """Tab-separated training log: a header line, then one row per update."""

    def __init__(self, stream=None):
        self.stream = stream
        self.rows = []
        if stream is not None:
            stream.write("\t".join(LOG_COLUMNS) + "\n")

    def write(self, step, mean_reward, loss, hit_rate):
        row = (step, mean_reward, loss, hit_rate)
        self.rows.append(row)
        if self.stream is not None:
            self.stream.write(f"{step}\t{mean_reward:.6f}\t{loss:.6f}\t{hit_rate:.6f}\n")


def train_relation(params: ParamSet, env, triples, config: TrainConfig, rng, *,
                   reward_model=None, baseline: Baseline | None = None, frozen=None,
                   train_log: TrainLog | None = None) -> ParamSet:
    """Take ``config.steps`` plain SGD steps on the REINFORCE loss for one task.

    Returns a new ParamSet; ``params`` is never modified. ``frozen`` replaces
    sampling with a fixed RolloutBatch (re-scored under the current parameters
    at every step), which is how gradient-equivalence checks pin trajectories.
    """
    config.validate()
    triples = list(triples)
    if not triples and frozen is None:
        raise InvalidArgument("cannot train on an empty task")
    baseline = baseline if baseline is not None else Baseline(config.baseline, config.baseline_decay)
    theta = params.copy()
    if config.lr == 0 or config.steps == 0:
        return theta
    for step in range(config.steps):
        if frozen is not None:
            batch = frozen
        else:
            subset = triples
            if config.batch_size and len(triples) > config.batch_size:
                pick = rng.choice(len(triples), size=config.batch_size, replace=False)
                subset = [triples[i] for i in sorted(pick)]
            batch = sample_batch(theta, env, subset, config, rng, reward_model)
        weight = config.entropy_weight
        if config.entropy_anneal:
            weight *= 1.0 - step / config.steps
        b = baseline.current(batch.rewards)
        loss, grads = policy_gradient(theta, env, batch, b, weight)
        baseline.update(batch.rewards)
        theta = sgd_step(theta, grads, config.lr)
        if train_log is not None:
            train_log.write(step, float(np.mean(batch.rewards)), loss, float(np.mean(batch.hits)))
    return theta
