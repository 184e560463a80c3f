"""The walk MDP: states, self-loop-augmented action spaces, transitions, terminal reward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InvalidArgument
from .kg import Graph

NO_ANSWER = -1


@dataclass(frozen=True)
class Query:
    source: int
    relation: int
    answer: int | None = None


@dataclass(frozen=True)
class State:
    query_relation: int
    source: int
    current: int
    t: int


@dataclass(frozen=True)
class Action:
    relation: int
    target: int


class Environment:
    """Stateless walk environment over an immutable graph.

    Every entity's action list is the self-loop followed by its outgoing edges in
    ``(relation, target)`` order, truncated to ``action_cap`` entries. The lists
    are materialised once as padded ``(n_entities, width)`` tables so batched
    rollouts only gather rows.

    With ``mask_answer_edge`` on, a query with a known answer hides the edge
    ``(e_s, r_q, e_o)`` and its inverse ``(e_o, r_q^-1, e_s)`` wherever they
    would be offered, so the agent cannot copy the answer edge.
    """

    def __init__(self, graph: Graph, horizon: int = 3, action_cap: int = 256,
                 mask_answer_edge: bool = True):
        if horizon < 1:
            raise InvalidArgument(f"horizon must be >= 1, got {horizon}")
        if action_cap < 1:
            raise InvalidArgument(f"action cap must be >= 1, got {action_cap}")
        self.graph = graph
        self.horizon = horizon
        self.action_cap = action_cap
        self.mask_answer_edge = mask_answer_edge
        n = graph.n_entities
        degree = np.diff(graph.offsets)
        width = int(min(action_cap, 1 + (degree.max() if n else 0)))
        self.counts = np.minimum(degree + 1, action_cap).astype(np.int64)
        self.table_rel = np.full((n, width), graph.self_loop, dtype=np.int64)
        self.table_ent = np.repeat(np.arange(n, dtype=np.int64)[:, None], width, axis=1)
        for e in range(n):
            adj = graph.adjacency(e)[: self.counts[e] - 1]
            self.table_rel[e, 1:1 + len(adj)] = adj[:, 0]
            self.table_ent[e, 1:1 + len(adj)] = adj[:, 1]
        for arr in (self.counts, self.table_rel, self.table_ent):
            arr.setflags(write=False)

    # ------------------------------------------------------------ single state

    def _check_query(self, query: Query):
        g = self.graph
        if not 0 <= query.source < g.n_entities:
            raise InvalidArgument(f"unknown source entity id {query.source}")
        if not 0 <= query.relation < g.n_relations:
            raise InvalidArgument(f"unknown query relation id {query.relation}")
        if query.answer is not None and not 0 <= query.answer < g.n_entities:
            raise InvalidArgument(f"unknown answer entity id {query.answer}")

    def reset(self, query: Query) -> State:
        self._check_query(query)
        return State(query.relation, query.source, query.source, 0)

    def action_space(self, state: State, answer: int | None = None) -> list[Action]:
        rel, ent, valid = self.batch_actions(
            np.array([state.current]), np.array([state.source]),
            np.array([state.query_relation]),
            np.array([NO_ANSWER if answer is None else answer]))
        return [Action(int(r), int(e)) for r, e, ok in zip(rel[0], ent[0], valid[0]) if ok]

    def step(self, state: State, action: Action, answer: int | None = None) -> State:
        if state.t >= self.horizon:
            raise ContractViolation(f"cannot step past the horizon T={self.horizon}")
        if action not in self.action_space(state, answer):
            raise ContractViolation(f"{action} is not available from entity {state.current}")
        return State(state.query_relation, state.source, action.target, state.t + 1)

    def terminal_reward(self, state: State, query: Query, reward_model=None) -> float:
        if state.t != self.horizon:
            raise ContractViolation(f"reward requested at t={state.t} before horizon T={self.horizon}")
        if state.current == query.answer:
            return 1.0
        if reward_model is None:
            return 0.0
        return float(reward_model.score(query.source, query.relation, state.current))

    def replay(self, query: Query, path) -> State:
        """Step through ``path`` (``(relation, entity)`` pairs) and return the end state.

        Raises ContractViolation if any step is not an available action.
        """
        state = self.reset(query)
        for relation, entity in path:
            state = self.step(state, Action(int(relation), int(entity)), query.answer)
        return state

    # ------------------------------------------------------------ batched

    def inverse_relations(self, relations):
        nf = self.graph.n_forward
        r = np.asarray(relations)
        return np.where(r < nf, r + nf, np.where(r < 2 * nf, r - nf, r))

    def batch_actions(self, current, sources, query_relations, answers):
        """Padded action tables for a batch of states.

        Returns ``(relations, entities, valid)``, each ``(N, width)``, where the
        width is trimmed to the widest action list in the batch. Column 0 is
        always the self-loop.
        """
        current = np.asarray(current, dtype=np.int64)
        counts = self.counts[current]
        width = int(counts.max()) if len(current) else 1
        rel = self.table_rel[current, :width]
        ent = self.table_ent[current, :width]
        valid = np.arange(width)[None, :] < counts[:, None]
        if self.mask_answer_edge:
            answers = np.asarray(answers, dtype=np.int64)
            sources = np.asarray(sources, dtype=np.int64)
            rq = np.asarray(query_relations, dtype=np.int64)
            has = answers != NO_ANSWER
            fwd = ((has & (current == sources))[:, None] & (rel == rq[:, None])
                   & (ent == answers[:, None]))
            inv = ((has & (current == answers))[:, None]
                   & (rel == self.inverse_relations(rq)[:, None]) & (ent == sources[:, None]))
            valid = valid & ~(fwd | inv)
        return rel, ent, valid

    def batch_rewards(self, final, sources, query_relations, answers, reward_model=None):
        final = np.asarray(final)
        hits = final == np.asarray(answers)
        if reward_model is None:
            return hits.astype(np.float64), hits
        shaped = np.asarray(reward_model.score(np.asarray(sources), np.asarray(query_relations), final))
        return np.where(hits, 1.0, shaped), hits
