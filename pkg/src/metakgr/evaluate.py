"""Beam-search decoding, filtered ranking metrics, and the K-robustness sweep."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kg, meta, policy
from .env import NO_ANSWER, Environment, Query
from .errors import InvalidArgument

KMAX = "max"


@dataclass
class Candidate:
    entity: int
    score: float                     # log-probability (max or log-sum over beams)
    path: list[tuple[int, int]]      # (relation, entity) per step, self-loops included


@dataclass
class RankedAnswer:
    query: Query
    candidates: list[Candidate]
    rank: int | None = None          # filled in by compute_metrics

    def entities(self) -> list[int]:
        return [c.entity for c in self.candidates]


def beam_search(params, env: Environment, query: Query, beam_width=128, *, score_mode="max",
                mask_answer=True) -> RankedAnswer:
    """Keep the ``beam_width`` most probable partial paths for ``env.horizon`` steps.

    Each distinct final entity is scored by the best (``"max"``) or the
    log-summed (``"sum"``) probability of the beams ending there and carries the
    most probable such path. Candidates are sorted by score, ties by entity id.
    """
    if beam_width < 1:
        raise InvalidArgument(f"beam width must be >= 1, got {beam_width}")
    if score_mode not in ("max", "sum"):
        raise InvalidArgument(f"unknown score mode {score_mode!r}")
    env._check_query(query)
    p = policy._as_tensors(params)
    answer = query.answer if (mask_answer and query.answer is not None) else NO_ANSWER
    h, c = policy.initial_state(p, np.array([query.source]), env.graph.start)
    current = np.array([query.source])
    scores = np.zeros(1)
    pointers = []
    for _ in range(env.horizon):
        n = len(current)
        src, rq, ans = (np.full(n, v, dtype=np.int64) for v in (query.source, query.relation, answer))
        rel, ent, valid = env.batch_actions(current, src, rq, ans)
        logp = policy.action_log_probs(p, current, h, rq, rel, ent, valid).data
        total = np.where(valid, scores[:, None] + logp, -np.inf).ravel()
        keep = min(beam_width, int(valid.sum()))
        # stable sort: equal scores keep (parent beam, action column) order
        order = np.argsort(-total, kind="stable")[:keep]
        parent, col = np.divmod(order, rel.shape[1])
        scores = total[order]
        chosen_rel, chosen_ent = rel[parent, col], ent[parent, col]
        pointers.append((parent, chosen_rel, chosen_ent))
        h, c = policy.encode_step(p, (ad.Tensor(h.data[parent]), ad.Tensor(c.data[parent])),
                                  chosen_rel, chosen_ent)
        current = chosen_ent

    paths = _backtrack(pointers, len(current))
    best: dict[int, int] = {}
    for i, e in enumerate(current.tolist()):
        if e not in best:  # beams are sorted, so the first hit is the best path
            best[e] = i
    cands = []
    for e, i in best.items():
        if score_mode == "max":
            s = float(scores[i])
        else:
            s = float(np.logaddexp.reduce(scores[current == e]))
        cands.append(Candidate(e, s, paths[i]))
    cands.sort(key=lambda c: (-c.score, c.entity))
    return RankedAnswer(query, cands)


def _backtrack(pointers, n_beams):
    paths = [[] for _ in range(n_beams)]
    idx = np.arange(n_beams)
    for parent, rel, ent in reversed(pointers):
        for b in range(n_beams):
            paths[b].append((int(rel[idx[b]]), int(ent[idx[b]])))
        idx = parent[idx]
    return [list(reversed(p)) for p in paths]


def decode(params, env, triples, beam_width=128, *, workers=1, score_mode="max"):
    """Beam-search every ``(e_s, r_q, e_o)`` triple; order of results matches input."""
    queries = [Query(int(h), int(r), int(t)) for h, r, t in triples]
    run = lambda q: beam_search(params, env, q, beam_width, score_mode=score_mode)  # noqa: E731
    if workers <= 1 or len(queries) < 2:
        return [run(q) for q in queries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, queries))


# ------------------------------------------------------------------ metrics

@dataclass
class MetricReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    count: int
    per_relation: dict[int, "MetricReport"] = field(default_factory=dict)

    def row(self, scale=100.0):
        return (self.mrr * scale, self.hits1 * scale, self.hits10 * scale)


def filtered_rank(answer: RankedAnswer, known=frozenset(), filtered=True):
    q = answer.query
    position = 0
    for c in answer.candidates:
        if c.entity == q.answer:
            return position + 1
        if filtered and (q.source, q.relation, c.entity) in known:
            continue
        position += 1
    return None


def _summarise(ranks):
    rr = np.array([0.0 if r is None else 1.0 / r for r in ranks])
    hit = lambda n: float(np.mean([r is not None and r <= n for r in ranks]))  # noqa: E731
    return MetricReport(float(rr.mean()), hit(1), hit(3), hit(10), len(ranks))


def compute_metrics(answers, known=frozenset(), filtered=True) -> MetricReport:
    """MRR and Hits@N; a gold entity missing from the candidates scores 0 on all."""
    answers = list(answers)
    if not answers:
        raise InvalidArgument("cannot compute metrics over zero answers")
    known = set(known)
    by_rel: dict[int, list] = {}
    ranks = []
    for a in answers:
        a.rank = filtered_rank(a, known, filtered)
        ranks.append(a.rank)
        by_rel.setdefault(a.query.relation, []).append(a.rank)
    report = _summarise(ranks)
    report.per_relation = {r: _summarise(v) for r, v in sorted(by_rel.items())}
    return report


def format_table(report: MetricReport, relation_names=None, label="ALL") -> str:
    """Tab-separated table: MRR, Hits@1, Hits@10 multiplied by 100."""
    lines = ["relation\tqueries\tMRR\tHits@1\tHits@10"]
    for r, sub in report.per_relation.items():
        name = relation_names[r] if relation_names is not None else str(r)
        lines.append(_table_line(name, sub))
    lines.append(_table_line(label, report))
    return "\n".join(lines) + "\n"


def _table_line(name, rep):
    mrr, h1, h10 = rep.row()
    return f"{name}\t{rep.count}\t{mrr:.2f}\t{h1:.2f}\t{h10:.2f}"


def render_path(source, path, graph) -> str:
    """``(e1) -r1-> (e2) -r2-> (e3)``, with self-loop steps omitted."""
    out = [f"({graph.entities.name(source)})"]
    for rel, ent in path:
        if rel == graph.self_loop:
            continue
        out.append(f"-{graph.relations.name(rel)}-> ({graph.entities.name(ent)})")
    return " ".join(out)


def answer_record(answer: RankedAnswer, graph, top_k=10) -> dict:
    q = answer.query
    cands = []
    for c in answer.candidates[:top_k]:
        names = [graph.entities.name(q.source)]
        for rel, ent in c.path:
            names += [graph.relations.name(rel), graph.entities.name(ent)]
        cands.append({"entity": graph.entities.name(c.entity), "score": c.score, "path": names})
    return {"source": graph.entities.name(q.source), "relation": graph.relations.name(q.relation),
            "answer": None if q.answer is None else graph.entities.name(q.answer),
            "rank": answer.rank, "candidates": cands}


def dump_answers(stream, answers, graph, top_k=10):
    for a in answers:
        stream.write(json.dumps(answer_record(a, graph, top_k), sort_keys=True) + "\n")


def check_explanations(answers, env: Environment) -> int:
    """Replay every candidate path; return how many failed to reach their entity."""
    failures = 0
    for a in answers:
        q = Query(a.query.source, a.query.relation, a.query.answer)
        for c in a.candidates:
            try:
                state = env.replay(q, c.path)
            except Exception:
                failures += 1
                continue
            if state.current != c.entity or state.t != env.horizon:
                failures += 1
    return failures


# ------------------------------------------------------------------ few-shot pipeline

@dataclass
class AdaptConfig:
    lr: float = 0.05
    steps: int = 20
    beam_width: int = 128
    workers: int = 1
    score_mode: str = "max"
    seed: int = 0


def truncate_task(triples, K, seed, relation):
    """Seeded subset of ``K`` training triples (the whole task when K is max or large)."""
    triples = list(triples)
    if K == KMAX or K is None or K >= len(triples):
        return triples
    if K < 1:
        raise InvalidArgument(f"K must be >= 1 or 'max', got {K!r}")
    rng = np.random.default_rng([seed, relation, K])
    keep = np.sort(rng.choice(len(triples), size=K, replace=False))
    return [triples[i] for i in keep]


def evaluate_fewshot(theta, dataset: kg.Dataset, relations, train_config, adapt: AdaptConfig, *,
                     horizon=3, action_cap=256, K=KMAX, reward_model=None, split="test",
                     filtered=True):
    """Adapt ``theta`` to each few-shot relation and decode its ``split`` queries.

    With a finite ``K`` each relation keeps only ``K`` training triples and the
    dropped ones are also removed from the graph. Returns ``(answers, report)``.
    """
    relations = sorted(relations)
    kept, dropped = {}, set()
    for r in relations:
        task = dataset.task(r)
        kept[r] = truncate_task(task.train, K, adapt.seed, r)
        dropped |= set(task.train) - set(kept[r])
    graph = dataset.graph
    if dropped:
        train = [t for t in dataset.train if t not in dropped]
        graph = kg.build_graph(train, dataset.entities, dataset.relations, graph.add_inverses)
    env = Environment(graph, horizon, action_cap)
    answers = []
    for r in relations:
        queries = getattr(dataset.task(r), split)
        if not queries:
            continue
        rng = np.random.default_rng([adapt.seed, r])
        theta_r = meta.adapt_fewshot(theta, env, kept[r], adapt.lr, adapt.steps, train_config, rng,
                                     reward_model=reward_model) if kept[r] else theta
        answers += decode(theta_r, env, queries, adapt.beam_width, workers=adapt.workers,
                          score_mode=adapt.score_mode)
    if not answers:
        raise InvalidArgument(f"no {split} queries for the requested relations")
    report = compute_metrics(answers, dataset.known_triples(), filtered)
    return answers, report


def robustness_sweep(theta, dataset, relations, K_list, train_config, adapt: AdaptConfig, **kw):
    """One MetricReport per threshold K (``"max"`` keeps every triple)."""
    rows = []
    for K in K_list:
        if K != KMAX and (not isinstance(K, (int, np.integer)) or K < 1):
            raise InvalidArgument(f"K must be a positive integer or 'max', got {K!r}")
        _, report = evaluate_fewshot(theta, dataset, relations, train_config, adapt, K=K, **kw)
        rows.append((K, report))
    return rows


def format_sweep(rows) -> str:
    lines = ["K\tMRR\tHits@1\tHits@10"]
    for K, rep in rows:
        mrr, h1, h10 = rep.row()
        lines.append(f"{K}\t{mrr:.2f}\t{h1:.2f}\t{h10:.2f}")
    return "\n".join(lines) + "\n"
