import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import exhaustive_ranking, random_dataset, small_policy
from metakgr import evaluate, kg, policy, synthetic
from metakgr.env import Environment, Query
from metakgr.errors import InvalidArgument
from metakgr.evaluate import Candidate, RankedAnswer
from metakgr.reinforce import TrainConfig


def _answer(source, relation, gold, ranking):
    return RankedAnswer(Query(source, relation, gold), [Candidate(e, -i, []) for i, e in enumerate(ranking)])


def metric_fixture():
    """Three queries whose gold answers rank 1, 4 and not at all."""
    return [_answer(0, 0, 5, [5, 1, 2]),
            _answer(1, 0, 9, [3, 4, 6, 9, 7]),
            _answer(2, 1, 8, [1, 2])]


def test_metric_fixture():
    report = evaluate.compute_metrics(metric_fixture())
    assert abs(report.mrr - 0.41667) <= 1e-5
    assert report.mrr == pytest.approx((1 + 0.25 + 0) / 3, abs=1e-12)
    assert report.hits1 == pytest.approx(1 / 3) and report.hits10 == pytest.approx(2 / 3)
    assert report.count == 3 and set(report.per_relation) == {0, 1}


def test_rank_four():
    [a] = [_answer(1, 0, 9, [3, 4, 6, 9])]
    report = evaluate.compute_metrics([a])
    assert a.rank == 4 and report.mrr == 0.25 and report.hits1 == 0 and report.hits10 == 1


def test_filtering_skips_other_true_tails():
    a = _answer(0, 0, 9, [3, 4, 9])
    known = {kg.Triple(0, 0, 3), kg.Triple(0, 0, 9)}
    assert evaluate.filtered_rank(a, known, filtered=True) == 2
    assert evaluate.filtered_rank(a, known, filtered=False) == 3


def test_empty_answers_rejected():
    with pytest.raises(InvalidArgument):
        evaluate.compute_metrics([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.permutations(list(range(12))), st.integers(0, 14),
                          st.sets(st.integers(0, 11))), min_size=1, max_size=8))
def test_metric_invariants_and_filtered_not_worse(rows):
    answers, known = [], set()
    for i, (ranking, gold, true_tails) in enumerate(rows):
        answers.append(_answer(i, 0, gold, ranking))
        known |= {kg.Triple(i, 0, t) for t in true_tails}
    raw = [evaluate.filtered_rank(a, known, filtered=False) for a in answers]
    filt = [evaluate.filtered_rank(a, known, filtered=True) for a in answers]
    for r, f in zip(raw, filt):
        assert (r is None) == (f is None)
        assert r is None or f <= r
    rep = evaluate.compute_metrics(answers, known)
    assert 0 <= rep.hits1 <= rep.mrr <= 1 and rep.hits1 <= rep.hits10 <= 1


@pytest.mark.parametrize("seed", range(4))
def test_saturated_beam_matches_exhaustive_enumeration(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n_entities=12, n_relations=2, n_edges=20)
    env = Environment(ds.graph, horizon=3)
    params = small_policy(ds.graph, seed=seed)
    for h, r, t in ds.train[:3]:
        q = Query(h, r, t)
        got = evaluate.beam_search(params, env, q, beam_width=10**6)
        oracle = exhaustive_ranking(params, env, q)
        assert got.entities() == [e for e, _ in oracle]
        assert np.allclose([c.score for c in got.candidates], [s for _, s in oracle],
                           rtol=0, atol=1e-9)


def test_width_one_is_greedy():
    rng = np.random.default_rng(1)
    ds = random_dataset(rng, n_entities=15, n_edges=40)
    env = Environment(ds.graph, horizon=3)
    params = small_policy(ds.graph, seed=1)
    for h, r, t in ds.train[:10]:
        top = evaluate.beam_search(params, env, Query(h, r, t), beam_width=1).candidates
        greedy = policy.sample_rollout(params, env, Query(h, r, t), mode="greedy")
        assert len(top) == 1 and top[0].entity == greedy.final_entity
        assert top[0].path == [(a.relation, a.target) for a in greedy.actions]


def test_self_loop_only_source():
    ds = kg.from_triples(kg.Vocab(["a", "b", "alone"]), kg.Vocab(["r"]), [kg.Triple(0, 0, 1)])
    env = Environment(ds.graph, horizon=3)
    ans = evaluate.beam_search(small_policy(ds.graph), env, Query(2, 0), beam_width=8)
    assert [(c.entity, c.score) for c in ans.candidates] == [(2, 0.0)]
    assert np.exp(ans.candidates[0].score) == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_wider_beam_never_lowers_top_score(seed, width):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n_entities=12, n_edges=30)
    env = Environment(ds.graph, horizon=3)
    params = small_policy(ds.graph, seed=seed % 50)
    q = Query(*ds.train[0])
    narrow = evaluate.beam_search(params, env, q, width).candidates[0].score
    wide = evaluate.beam_search(params, env, q, width + 1).candidates[0].score
    assert wide >= narrow - 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["max", "sum"]))
def test_candidates_sorted_distinct_and_replayable(seed, mode):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n_entities=15, n_edges=40)
    env = Environment(ds.graph, horizon=3)
    params = small_policy(ds.graph, seed=seed % 50)
    answers = evaluate.decode(params, env, ds.train[:4], beam_width=16, score_mode=mode)
    for a in answers:
        keys = [(-c.score, c.entity) for c in a.candidates]
        assert keys == sorted(keys)
        assert len(set(a.entities())) == len(a.candidates)
    assert evaluate.check_explanations(answers, env) == 0


def test_sum_mode_scores_dominate_max():
    rng = np.random.default_rng(2)
    ds = random_dataset(rng, n_entities=10, n_edges=30)
    env = Environment(ds.graph, horizon=3)
    params = small_policy(ds.graph, seed=2)
    q = Query(*ds.train[0])
    best = {c.entity: c.score for c in evaluate.beam_search(params, env, q, 64).candidates}
    total = {c.entity: c.score for c in evaluate.beam_search(params, env, q, 64, score_mode="sum").candidates}
    assert best.keys() == total.keys()
    assert all(total[e] >= best[e] - 1e-12 for e in best)


def test_broken_explanation_detected(chain, chain_env):
    a = RankedAnswer(Query(0, 0, 1), [Candidate(5, 0.0, [(0, 1), (0, 2), (0, 3)])])
    assert evaluate.check_explanations([a], chain_env) == 1
    a = RankedAnswer(Query(0, 0, 1), [Candidate(5, 0.0, [(0, 5)])])
    assert evaluate.check_explanations([a], chain_env) == 1


def test_parallel_decode_preserves_order(chain, chain_env):
    params = small_policy(chain.graph, seed=3)
    one = evaluate.decode(params, chain_env, chain.train, beam_width=8, workers=1)
    many = evaluate.decode(params, chain_env, chain.train, beam_width=8, workers=3)
    assert [(a.query, a.entities(), [c.score for c in a.candidates]) for a in one] == \
           [(a.query, a.entities(), [c.score for c in a.candidates]) for a in many]


def test_bad_beam_arguments(chain, chain_env):
    params = small_policy(chain.graph)
    with pytest.raises(InvalidArgument):
        evaluate.beam_search(params, chain_env, Query(0, 0), beam_width=0)
    with pytest.raises(InvalidArgument):
        evaluate.beam_search(params, chain_env, Query(0, 0), score_mode="mean")


def test_table_and_path_rendering(chain):
    g = chain.graph
    report = evaluate.compute_metrics(metric_fixture())
    table = evaluate.format_table(report, ["r0", "r1"])
    lines = table.splitlines()
    assert lines[0] == "relation\tqueries\tMRR\tHits@1\tHits@10"
    assert lines[-1] == "ALL\t3\t41.67\t33.33\t66.67"
    path = [(0, 1), (g.self_loop, 1), (1, 3)]
    assert evaluate.render_path(0, path, g) == "(c0) -next-> (c1) -skip-> (c3)"


def test_answer_dump_is_json_lines(chain):
    g = chain.graph
    a = RankedAnswer(Query(0, 1, 2), [Candidate(2, -0.5, [(0, 1), (0, 2), (g.self_loop, 2)])], rank=1)
    out = io.StringIO()
    evaluate.dump_answers(out, [a], g)
    rec = json.loads(out.getvalue())
    assert rec["answer"] == "c2" and rec["rank"] == 1
    assert rec["candidates"][0]["path"] == ["c0", "next", "c1", "next", "c2", "NO_OP", "c2"]


# ------------------------------------------------------------------ few-shot pipeline

@pytest.fixture(scope="module")
def toy():
    return synthetic.compositional_kg(n_entities=30, n_base=3, n_normal=4, n_fewshot=2,
                                      support=6, n_valid=2, n_test=5, seed=0)


TC = TrainConfig(rollouts=3, entropy_weight=0.0, action_dropout=0.0)


def test_truncate_task():
    triples = [kg.Triple(i, 0, i + 1) for i in range(6)]
    assert evaluate.truncate_task(triples, "max", 0, 0) == triples
    assert evaluate.truncate_task(triples, 10, 0, 0) == triples
    one = evaluate.truncate_task(triples, 1, 0, 0)
    assert len(one) == 1 and one[0] in triples
    assert evaluate.truncate_task(triples, 3, 7, 0) == evaluate.truncate_task(triples, 3, 7, 0)
    with pytest.raises(InvalidArgument):
        evaluate.truncate_task(triples, 0, 0, 0)


def _snapshot(answers):
    return [(a.query, a.entities(), [c.score for c in a.candidates], [c.path for c in a.candidates])
            for a in answers]


def test_k_max_equals_untruncated_run(toy):
    params = small_policy(toy.dataset.graph, seed=0)
    adapt = evaluate.AdaptConfig(lr=0.1, steps=2, beam_width=8)
    a, ra = evaluate.evaluate_fewshot(params, toy.dataset, toy.fewshot, TC, adapt)
    b, rb = evaluate.evaluate_fewshot(params, toy.dataset, toy.fewshot, TC, adapt, K=evaluate.KMAX)
    c, _ = evaluate.evaluate_fewshot(params, toy.dataset, toy.fewshot, TC, adapt, K=100)
    assert _snapshot(a) == _snapshot(b) == _snapshot(c)
    assert ra.mrr == rb.mrr


def test_zero_adaptation_steps_evaluate_theta(toy):
    params = small_policy(toy.dataset.graph, seed=0)
    adapt = evaluate.AdaptConfig(steps=0, beam_width=8)
    answers, _ = evaluate.evaluate_fewshot(params, toy.dataset, toy.fewshot, TC, adapt)
    env = Environment(toy.dataset.graph, 3)
    direct = evaluate.decode(params, env, [t for r in toy.fewshot for t in toy.dataset.task(r).test], 8)
    assert _snapshot(answers) == _snapshot(direct)


def test_k_one_keeps_a_single_support_triple(toy):
    for r in toy.fewshot:
        assert len(evaluate.truncate_task(toy.dataset.task(r).train, 1, 0, r)) == 1


def test_sweep_rows(toy):
    params = small_policy(toy.dataset.graph, seed=0)
    adapt = evaluate.AdaptConfig(steps=0, beam_width=4)
    rows = evaluate.robustness_sweep(params, toy.dataset, toy.fewshot, [1, 5, 10, "max"], TC, adapt)
    assert [k for k, _ in rows] == [1, 5, 10, "max"]
    text = evaluate.format_sweep(rows).splitlines()
    assert text[0] == "K\tMRR\tHits@1\tHits@10" and len(text) == 5
    with pytest.raises(InvalidArgument):
        evaluate.robustness_sweep(params, toy.dataset, toy.fewshot, [0], TC, adapt)


def test_fewshot_eval_is_deterministic(toy):
    params = small_policy(toy.dataset.graph, seed=0)
    adapt = evaluate.AdaptConfig(lr=0.1, steps=2, beam_width=8, seed=3)
    a, _ = evaluate.evaluate_fewshot(params, toy.dataset, toy.fewshot, TC, adapt, K=2)
    b, _ = evaluate.evaluate_fewshot(params, toy.dataset, toy.fewshot, TC, adapt, K=2)
    assert _snapshot(a) == _snapshot(b)
