"""Path-history LSTM and action scorer, plus batched rollouts.

Parameter layout (row-vector convention, ``x @ W``):

    entity      (n_entities, d)
    relation    (n_relations, d)     shared by actions, queries and START
    lstm_w      (2d + h, 4h)         gate order: input, forget, cell, output
    lstm_b      (4h,)
    w1          (d + h + d, h1)      input is [e_t; h_t; r_q]
    w2          (h1, 2d)

An action ``(r, e)`` is represented by ``[relation[r]; entity[e]]`` and scored
by its dot product with ``w2 . relu(w1 . [e_t; h_t; r_q])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .env import NO_ANSWER, Action, Environment, Query, State
from .errors import ContractViolation, InvalidArgument
from .optim import ParamSet

# additive logit for padded or masked actions; exp underflows to exactly 0
MASK_LOGIT = -1e30


@dataclass
class PolicyConfig:
    dim: int = 64
    hidden: int = 64
    mlp: int = 64
    seed: int = 0


def init_params(n_entities, n_relations, config: PolicyConfig, rng=None) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; forget-gate bias 1."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    d, h, h1 = config.dim, config.hidden, config.mlp

    def u(fan_in, shape):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, shape)

    lstm_b = np.zeros(4 * h)
    lstm_b[h:2 * h] = 1.0
    return ParamSet(
        entity=u(d, (n_entities, d)),
        relation=u(d, (n_relations, d)),
        lstm_w=u(2 * d + h, (2 * d + h, 4 * h)),
        lstm_b=lstm_b,
        w1=u(2 * d + h, (2 * d + h, h1)),
        w2=u(h1, (h1, 2 * d)),
    )


def dims(params):
    d = params["entity"].shape[1]
    h = params["lstm_b"].shape[0] // 4
    return d, h


def _as_tensors(params):
    return {k: (v if isinstance(v, ad.Tensor) else ad.Tensor(v)) for k, v in params.items()}


def encode_step(p, state, relations, entities):
    """One LSTM update fed the action embedding ``[relation; entity]``.

    ``state`` is ``(h, c)``, each ``(N, hidden)``.
    """
    h, c = state
    action = ad.concat([ad.gather_rows(p["relation"], relations),
                        ad.gather_rows(p["entity"], entities)], axis=-1)
    return lstm_cell(p, action, h, c)


def lstm_cell(p, x, h, c):
    hid = h.shape[-1]
    if x.shape[-1] + hid != p["lstm_w"].shape[0]:
        raise InvalidArgument(
            f"LSTM input of shape {x.shape} does not fit weights of shape {p['lstm_w'].shape}")
    z = ad.add(ad.matmul(ad.concat([x, h], axis=-1), p["lstm_w"]), p["lstm_b"])
    zi, zf, zg, zo = (ad.index_last(z, np.arange(k * hid, (k + 1) * hid)) for k in range(4))
    c_new = ad.add(ad.mul(ad.sigmoid(zf), c), ad.mul(ad.sigmoid(zi), ad.tanh(zg)))
    h_new = ad.mul(ad.sigmoid(zo), ad.tanh(c_new))
    return h_new, c_new


def initial_state(p, sources, start_relation):
    """History after the reserved START action ``[relation[START]; entity[e_s]]``."""
    n = len(sources)
    hid = p["lstm_b"].shape[0] // 4
    zero = ad.Tensor(np.zeros((n, hid)))
    return encode_step(p, (zero, zero), np.full(n, start_relation), sources)


def action_log_probs(p, current, h, query_relations, act_rel, act_ent, valid):
    """``log pi(a | s)`` over padded action tables, shape ``(N, width)``.

    Invalid columns receive MASK_LOGIT before the softmax, so their probability
    is exactly zero and the valid entries are normalised among themselves.
    """
    x = ad.concat([ad.gather_rows(p["entity"], current), h,
                   ad.gather_rows(p["relation"], query_relations)], axis=-1)
    u = ad.matmul(ad.relu(ad.matmul(x, p["w1"])), p["w2"])  # (N, 2d)
    acts = ad.concat([ad.gather_rows(p["relation"], act_rel),
                      ad.gather_rows(p["entity"], act_ent)], axis=-1)  # (N, A, 2d)
    n, width = act_rel.shape
    logits = ad.reshape(ad.matmul(acts, ad.reshape(u, (n, -1, 1))), (n, width))
    logits = ad.add(logits, np.where(valid, 0.0, MASK_LOGIT))
    return ad.log_softmax(logits, axis=-1)


def action_distribution(params, state: State, history, actions: list[Action]) -> np.ndarray:
    """Probability vector over an explicit action list for one state.

    ``history`` is the ``(h, c)`` pair (arrays of shape ``(hidden,)`` or
    ``(1, hidden)``) describing the path so far.
    """
    if not actions:
        raise ContractViolation("action list is empty; the self-loop should always be present")
    p = _as_tensors(params)
    h = ad.Tensor(np.reshape(history[0], (1, -1)))
    rel = np.array([[a.relation for a in actions]])
    ent = np.array([[a.target for a in actions]])
    logp = action_log_probs(p, np.array([state.current]), h, np.array([state.query_relation]),
                            rel, ent, np.ones_like(rel, dtype=bool))
    return np.exp(logp.data[0])


# ------------------------------------------------------------------ rollouts

@dataclass
class Trajectory:
    query: Query
    actions: list[Action]
    log_probs: list[float]
    reward: float

    @property
    def final_entity(self) -> int:
        return self.actions[-1].target if self.actions else self.query.source


@dataclass
class RolloutBatch:
    """Arrays describing ``N`` rollouts of length ``T``.

    ``columns`` holds the chosen column of each step's action table, which is
    enough to replay the batch against different parameters.
    """

    sources: np.ndarray
    query_relations: np.ndarray
    answers: np.ndarray
    columns: np.ndarray      # (N, T)
    relations: np.ndarray    # (N, T)
    entities: np.ndarray     # (N, T)
    log_probs: np.ndarray    # (N, T), under the unmasked policy
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self):
        return len(self.sources)

    @property
    def final_entities(self):
        return self.entities[:, -1]

    def trajectories(self) -> list[Trajectory]:
        out = []
        for i in range(len(self)):
            ans = int(self.answers[i])
            q = Query(int(self.sources[i]), int(self.query_relations[i]),
                      None if ans == NO_ANSWER else ans)
            acts = [Action(int(r), int(e)) for r, e in zip(self.relations[i], self.entities[i])]
            out.append(Trajectory(q, acts, self.log_probs[i].tolist(), float(self.rewards[i])))
        return out

    def select(self, idx) -> "RolloutBatch":
        return RolloutBatch(*(getattr(self, f)[idx] for f in (
            "sources", "query_relations", "answers", "columns", "relations", "entities",
            "log_probs", "rewards", "hits")))


def query_arrays(triples, repeats=1):
    arr = np.asarray([tuple(t) for t in triples], dtype=np.int64).reshape(-1, 3)
    arr = np.repeat(arr, repeats, axis=0)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def action_dropout(probs, valid, rate, rng):
    """Sampling distribution after dropping each non-self-loop action with prob ``rate``.

    Column 0 is the self-loop and is never dropped. A row whose other valid
    actions are all dropped, or whose surviving actions carry no probability
    mass at all, keeps the full distribution. Only sampling uses this;
    log-probabilities for learning come from the undropped policy.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    valid = np.atleast_2d(np.asarray(valid, dtype=bool))
    if not 0 <= rate < 1:
        raise InvalidArgument(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0:
        return probs
    keep = rng.random(probs.shape) >= rate
    keep[:, 0] = True
    keep &= valid
    starved = ~keep[:, 1:].any(axis=1) & valid[:, 1:].any(axis=1)
    keep[starved] = valid[starved]
    out = probs * keep
    mass = out.sum(axis=1, keepdims=True)
    empty = mass[:, 0] <= 0
    out[empty], mass[empty] = probs[empty], probs[empty].sum(axis=1, keepdims=True)
    return out / mass


def _sample_columns(probs, valid, rng, dropout):
    dist = action_dropout(probs, valid, dropout, rng)
    cdf = np.cumsum(dist, axis=1)
    u = rng.random(len(dist)) * cdf[:, -1]
    return np.argmax(cdf > u[:, None], axis=1)


def rollout(params, env: Environment, sources, query_relations, answers=None, *,
            rng=None, mode="sample", action_dropout=0.0, reward_model=None) -> RolloutBatch:
    """Run ``T`` steps for every query in the batch without recording gradients."""
    if mode not in ("sample", "greedy"):
        raise InvalidArgument(f"unknown rollout mode {mode!r}")
    if mode == "sample" and rng is None:
        raise InvalidArgument("sample mode needs an rng")
    p = _as_tensors(params)
    sources = np.asarray(sources, dtype=np.int64)
    query_relations = np.asarray(query_relations, dtype=np.int64)
    n = len(sources)
    answers = (np.full(n, NO_ANSWER, dtype=np.int64) if answers is None
               else np.asarray(answers, dtype=np.int64))
    T = env.horizon
    cols = np.zeros((n, T), dtype=np.int64)
    rels = np.zeros((n, T), dtype=np.int64)
    ents = np.zeros((n, T), dtype=np.int64)
    logps = np.zeros((n, T))
    h, c = initial_state(p, sources, env.graph.start)
    current = sources
    rows = np.arange(n)
    for t in range(T):
        act_rel, act_ent, valid = env.batch_actions(current, sources, query_relations, answers)
        logp = action_log_probs(p, current, h, query_relations, act_rel, act_ent, valid).data
        if mode == "greedy":
            # argmax returns the first maximum: ties go to the lowest column
            choice = np.argmax(np.where(valid, logp, -np.inf), axis=1)
        else:
            choice = _sample_columns(np.exp(logp), valid, rng, action_dropout)
        cols[:, t] = choice
        rels[:, t] = act_rel[rows, choice]
        ents[:, t] = act_ent[rows, choice]
        logps[:, t] = logp[rows, choice]
        h, c = encode_step(p, (h, c), rels[:, t], ents[:, t])
        current = ents[:, t]
    batch = RolloutBatch(sources, query_relations, answers, cols, rels, ents, logps)
    if (answers != NO_ANSWER).all():
        batch.rewards, batch.hits = env.batch_rewards(current, sources, query_relations,
                                                      answers, reward_model)
    else:
        batch.rewards, batch.hits = np.zeros(n), np.zeros(n, dtype=bool)
    return batch


def replay_log_probs(p, env: Environment, batch: RolloutBatch):
    """Tape-recorded ``(sum_t log pi(a_t), mean_t entropy)``, each of shape ``(N,)``.

    ``p`` maps names to Tensors; the recorded columns are re-scored under them.
    """
    n, T = batch.columns.shape
    h, c = initial_state(p, batch.sources, env.graph.start)
    current = batch.sources
    total = None
    entropy = None
    for t in range(T):
        act_rel, act_ent, valid = env.batch_actions(current, batch.sources,
                                                    batch.query_relations, batch.answers)
        logp = action_log_probs(p, current, h, batch.query_relations, act_rel, act_ent, valid)
        chosen = ad.reshape(ad.take_along(logp, batch.columns[:, t:t + 1], axis=1), (n,))
        step_h = ad.neg(ad.sum(ad.mul(ad.exp(logp), logp), axis=1))
        total = chosen if total is None else ad.add(total, chosen)
        entropy = step_h if entropy is None else ad.add(entropy, step_h)
        h, c = encode_step(p, (h, c), batch.relations[:, t], batch.entities[:, t])
        current = batch.entities[:, t]
    return total, ad.mul(entropy, 1.0 / T)


def sample_rollout(params, env: Environment, query: Query, mode="sample", rng=None,
                   reward_model=None) -> Trajectory:
    env._check_query(query)
    answers = None if query.answer is None else [query.answer]
    batch = rollout(params, env, [query.source], [query.relation], answers, rng=rng, mode=mode,
                    reward_model=reward_model)
    return batch.trajectories()[0]
