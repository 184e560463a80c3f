"""First-order MAML over relation tasks: meta-initialisation and few-shot adaptation."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import reinforce
from .errors import InvalidArgument
from .kg import sample_support_query
from .optim import ParamSet, add_grads, make_optimizer
from .reinforce import Baseline, TrainConfig

log = logging.getLogger(__name__)

META_LOG_COLUMNS = ("outer_step", "relation", "query_loss", "meta_val_mrr")


@dataclass
class MetaConfig:
    inner_lr: float = 1e-2
    outer_lr: float = 1e-3
    outer_optimizer: str = "adam"
    task_batch: int = 4
    support_size: int = 32
    query_size: int = 32
    inner_steps: int = 1
    outer_steps: int = 1000
    first_order: bool = True
    task_distribution: str = "uniform"
    eval_every: int = 0          # 0 disables meta-validation / early stopping
    patience: int = 0            # evaluations without improvement before stopping; 0 = never

    def validate(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise InvalidArgument("learning rates must be >= 0")
        if self.task_batch < 1:
            raise InvalidArgument("task batch size must be >= 1")
        if not self.first_order:
            raise InvalidArgument("only the first-order meta-gradient is implemented")
        if self.task_distribution not in ("uniform", "frequency"):
            raise InvalidArgument(f"unknown task distribution {self.task_distribution!r}")


def inner_adapt(params: ParamSet, env, support, lr, steps, train_config: TrainConfig, rng, *,
                reward_model=None, baseline=None, frozen=None) -> ParamSet:
    """``theta'_r = theta - lr * grad L^{D_S}(theta)``, repeated ``steps`` times."""
    cfg = replace(train_config, lr=lr, steps=steps)
    return reinforce.train_relation(params, env, support, cfg, rng, reward_model=reward_model,
                                    baseline=baseline, frozen=frozen)


class MetaLearner:
    """Holds the meta-parameters, the outer optimiser, and per-relation baselines."""

    def __init__(self, params: ParamSet, env, config: MetaConfig, train_config: TrainConfig, *,
                 rng, reward_model=None, log_stream=None):
        config.validate()
        train_config.validate()
        self.params = params.copy()
        self.env = env
        self.config = config
        self.train_config = train_config
        self.rng = rng
        self.reward_model = reward_model
        self.optimizer = make_optimizer(config.outer_optimizer, config.outer_lr)
        self.baselines: dict[int, Baseline] = {}
        self.step_count = 0
        self.log_stream = log_stream
        if log_stream is not None:
            log_stream.write("\t".join(META_LOG_COLUMNS) + "\n")

    def _baseline(self, relation):
        if relation not in self.baselines:
            tc = self.train_config
            self.baselines[relation] = Baseline(tc.baseline, tc.baseline_decay)
        return self.baselines[relation]

    def task_gradient(self, relation, support, query, frozen=None):
        """First-order outer gradient of one task: grad of L^{D_Q} taken at theta'_r.

        ``frozen`` optionally pins ``(support_batch, query_batch)`` rollouts.
        """
        cfg, tc = self.config, self.train_config
        baseline = self._baseline(relation)
        adapted = inner_adapt(self.params, self.env, support, cfg.inner_lr, cfg.inner_steps, tc,
                              self.rng, reward_model=self.reward_model, baseline=baseline,
                              frozen=None if frozen is None else frozen[0])
        if frozen is not None:
            qbatch = frozen[1]
        else:
            qbatch = reinforce.sample_batch(adapted, self.env, query, tc, self.rng, self.reward_model)
        b = baseline.current(qbatch.rewards)
        loss, grads = reinforce.policy_gradient(adapted, self.env, qbatch, b, tc.entropy_weight)
        baseline.update(qbatch.rewards)
        return loss, grads

    def meta_step(self, batch, frozen=None):
        """One outer update from ``batch`` = list of ``(relation, D_S, D_Q)``.

        The per-task gradients are summed and handed to the outer optimiser with
        rate beta. ``frozen`` maps relation -> ``(support_batch, query_batch)``.
        """
        if not batch:
            raise InvalidArgument("meta-step needs at least one task")
        total, losses = None, []
        for relation, support, query in batch:
            loss, grads = self.task_gradient(
                relation, support, query, None if frozen is None else frozen[relation])
            total = add_grads(total, grads)
            losses.append((relation, loss))
        self.params = self.optimizer.step(self.params, total)
        self.step_count += 1
        return losses

    def sample_tasks(self, tasks: dict):
        relations = sorted(tasks)
        if self.config.task_distribution == "uniform":
            weights = None
        else:
            sizes = np.array([len(tasks[r]) for r in relations], dtype=np.float64)
            weights = sizes / sizes.sum()
        k = self.config.task_batch
        pick = self.rng.choice(len(relations), size=k, replace=k > len(relations), p=weights)
        out = []
        for i in pick:
            r = relations[i]
            ds, dq = sample_support_query(tasks[r], self.config.support_size,
                                          self.config.query_size, self.rng)
            out.append((r, ds, dq))
        return out

    def train(self, tasks: dict, validate=None):
        """Run outer steps until exhausted or early-stopped; return the best theta*.

        ``tasks`` maps relation id -> training triples of normal relations.
        ``validate(params) -> MRR`` is called every ``eval_every`` steps.
        """
        if not tasks:
            raise InvalidArgument("meta-training needs at least one normal task")
        cfg = self.config
        best, best_mrr, stale = self.params.copy(), -1.0, 0
        for _ in range(cfg.outer_steps):
            losses = self.meta_step(self.sample_tasks(tasks))
            mrr = None
            if validate is not None and cfg.eval_every and self.step_count % cfg.eval_every == 0:
                mrr = float(validate(self.params))
                if mrr > best_mrr:
                    best, best_mrr, stale = self.params.copy(), mrr, 0
                else:
                    stale += 1
            self._log(losses, mrr)
            if cfg.patience and stale >= cfg.patience:
                log.info("early stop at outer step %d (best meta-val MRR %.4f)",
                         self.step_count, best_mrr)
                break
        if validate is None or not cfg.eval_every or best_mrr < 0:
            return self.params.copy()
        return best

    def _log(self, losses, mrr):
        if self.log_stream is None:
            return
        shown = "" if mrr is None else f"{mrr:.6f}"
        for relation, loss in losses:
            self.log_stream.write(f"{self.step_count}\t{relation}\t{loss:.6f}\t{shown}\n")


def meta_train(params, env, tasks, config: MetaConfig, train_config: TrainConfig, rng, *,
               reward_model=None, validate=None, log_stream=None) -> ParamSet:
    learner = MetaLearner(params, env, config, train_config, rng=rng,
                          reward_model=reward_model, log_stream=log_stream)
    return learner.train(tasks, validate)


def adapt_fewshot(theta_star: ParamSet, env, triples, lr, steps, train_config: TrainConfig, rng,
                  *, reward_model=None) -> ParamSet:
    """Fine-tune the meta-initialisation on a few-shot relation's training triples."""
    if steps == 0:
        return theta_star.copy()
    cfg = copy.copy(train_config)
    cfg.lr, cfg.steps = lr, steps
    return reinforce.train_relation(theta_star, env, triples, cfg, rng, reward_model=reward_model)
