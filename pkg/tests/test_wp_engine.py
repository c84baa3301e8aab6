import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from warnprop.alphabet import ConstantRule, KCoreRule, MessageMultiset, ParityRule, binary_alphabet
from warnprop.dist_fixed_point import ProbDistMatrix
from warnprop.errors import DomainError
from warnprop.graph_model import TypedGraph, peel_core, sample_binomial_multitype
from warnprop.wp_engine import (changes_since, dump_messaged_graph, extract_core, initialize, load_messaged_graph,
                                project, run, wp_step)

A = binary_alphabet(1, [(0, 0)])
ONES = ProbDistMatrix.point_mass(A, "1")


def graph(n, edges):
    return TypedGraph.from_edges(1, np.zeros(n, dtype=int), edges)


PATH = graph(3, [(0, 1), (1, 2)])
TRIANGLE = graph(3, [(0, 1), (1, 2), (0, 2)])


def brute_step(g, rule, msg):
    """Independent oracle: evaluate each directed edge from its explicit multiset."""
    out = {}
    for v in range(g.n):
        nb = g.neighbours(v).tolist()
        for w in nb:
            incoming = [msg[(u, v)] for u in nb if u != w]
            out[(v, w)] = rule.evaluate(MessageMultiset.from_symbols(rule.alphabet, incoming),
                                        (int(g.types[v]), int(g.types[w])))
    return out


def as_dict(mg, t=None):
    g = mg.graph
    m = mg.messages if t is None else mg.at(t)
    return {(int(u), int(v)): int(x) for u, v, x in zip(g.row, g.indices, m)}


def test_initialize_point_mass():
    mg = initialize(TRIANGLE, ONES, np.random.default_rng(0))
    assert mg.round == 0 and set(mg.messages.tolist()) == {1}


def test_initialize_empty():
    mg = initialize(graph(5, []), ONES, np.random.default_rng(0))
    assert len(mg.messages) == 0 and mg.round == 0


def test_initialize_bernoulli():
    g = sample_binomial_multitype([100_000], [[3.0]], np.random.default_rng(1))
    Q = ProbDistMatrix.by_label(A, {"0": 0.7, "1": 0.3})
    m = initialize(g, Q, np.random.default_rng(2)).messages
    assert abs(m.mean() - 0.3) < 3 * math.sqrt(0.21 / len(m))


def test_initialize_missing_entry():
    A2 = binary_alphabet(2, [(0, 1), (1, 0)])
    Q = ProbDistMatrix.point_mass(A2, "1", pairs=[(0, 1)])
    g = TypedGraph.from_edges(2, [0, 1], [(0, 1)])
    with pytest.raises(DomainError):
        initialize(g, Q, np.random.default_rng(0))


def test_path_two_core():
    rule = KCoreRule(A, k_core=2)
    mg = initialize(PATH, ONES, np.random.default_rng(0))
    wp_step(mg, rule)
    assert mg.message(0, 1) == 0 and mg.message(2, 1) == 0
    assert mg.message(1, 0) == 1 and mg.message(1, 2) == 1
    wp_step(mg, rule)
    assert set(mg.messages.tolist()) == {0}
    mg2, trace = run(initialize(PATH, ONES, np.random.default_rng(0)), rule, 50)
    assert trace.final_round == 3 and trace.changes == [2, 2, 0]
    assert extract_core(mg2, rule).tolist() == []


def test_triangle_two_core():
    rule = KCoreRule(A, k_core=2)
    mg, trace = run(initialize(TRIANGLE, ONES, np.random.default_rng(0)), rule, 10)
    assert set(mg.messages.tolist()) == {1} and trace.changes == [0]
    assert extract_core(mg, rule).tolist() == [0, 1, 2]


def test_constant_rule_fixed_after_one_step():
    rule = ConstantRule(A, "0")
    g = sample_binomial_multitype([200], [[3.0]], np.random.default_rng(0))
    mg, trace = run(initialize(g, ONES, np.random.default_rng(0)), rule, 10)
    assert trace.final_round == 2 and trace.changes == [g.num_directed, 0]
    assert changes_since(trace, 1) == 0
    assert changes_since(trace, trace.final_round) == 0


def test_run_requires_positive_cap():
    with pytest.raises(DomainError):
        run(initialize(PATH, ONES, np.random.default_rng(0)), KCoreRule(A, k_core=2), 0)


def test_terminates_quickly():
    n = 10_000
    g = sample_binomial_multitype([n], [[3.5]], np.random.default_rng(3))
    _, trace = run(initialize(g, ONES, np.random.default_rng(0), keep_history=False), KCoreRule(A, k_core=3),
                   1000)
    assert trace.converged and trace.final_round < 10 * math.log(n)
    assert all(0 <= c <= g.num_directed for c in trace.changes)
    assert all(0 <= c <= g.num_directed for c in trace.since)


def test_project():
    rule = KCoreRule(A, k_core=2)
    mg0 = initialize(PATH, ONES, np.random.default_rng(0))
    assert np.array_equal(project(mg0).histories(), mg0.histories())
    mg, _ = run(mg0, rule, 5)
    p = project(mg)
    assert len(p.history) == 1 and np.array_equal(p.messages, mg.messages)
    pp = project(p)
    assert np.array_equal(pp.messages, p.messages) and pp.round == p.round


def test_extract_core_requires_fixpoint():
    rule = KCoreRule(A, k_core=2)
    mg = initialize(PATH, ONES, np.random.default_rng(0))
    with pytest.raises(DomainError):
        extract_core(mg, rule)


def test_dump_load_roundtrip():
    rule = KCoreRule(A, k_core=3)
    g = sample_binomial_multitype([60], [[3.5]], np.random.default_rng(4))
    mg, _ = run(initialize(g, ONES, np.random.default_rng(0)), rule, 4, stop_on_fixpoint=False)
    back = load_messaged_graph(dump_messaged_graph(mg), A)
    assert np.array_equal(back.histories(), mg.histories())
    assert back.round == mg.round


def test_trace_csv():
    _, trace = run(initialize(PATH, ONES, np.random.default_rng(0)), KCoreRule(A, k_core=2), 10)
    assert trace.to_csv().splitlines() == ["round,changes,changes_since", "0,,4", "1,2,2", "2,2,0", "3,0,0"]


# -- properties ------------------------------------------------------------------

RULES = [KCoreRule(A, k_core=2), KCoreRule(A, k_core=3), ParityRule(A), ConstantRule(A, "1")]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3), st.floats(0.5, 5.0))
def test_step_matches_brute_force(seed, which, c):
    rule = RULES[which]
    r = np.random.default_rng(seed)
    g = sample_binomial_multitype([40], [[c]], r)
    mg = initialize(g, ProbDistMatrix.by_label(A, {"0": 0.5, "1": 0.5}), r)
    for _ in range(3):
        before = as_dict(mg)
        wp_step(mg, rule)
        assert as_dict(mg) == brute_step(g, rule, before)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_relabelling_invariance(seed):
    rule = KCoreRule(A, k_core=3)
    r = np.random.default_rng(seed)
    g = sample_binomial_multitype([80], [[3.5]], r)
    mg = initialize(g, ProbDistMatrix.by_label(A, {"0": 0.3, "1": 0.7}), r)
    perm = r.permutation(g.n)
    h = TypedGraph.from_edges(1, g.types, perm[g.edges()])
    # carry the same initial messages across the relabelling
    init = as_dict(mg)
    msg_h = np.array([init[(int(np.flatnonzero(perm == u)[0]), int(np.flatnonzero(perm == v)[0]))]
                      for u, v in zip(h.row, h.indices)])
    mh = initialize(h, ONES, r)
    mh.history[0] = msg_h.astype(np.uint8)
    run(mg, rule, 5, stop_on_fixpoint=False)
    run(mh, rule, 5, stop_on_fixpoint=False)
    got_g, got_h = as_dict(mg), as_dict(mh)
    assert all(got_g[(u, v)] == got_h[(int(perm[u]), int(perm[v]))] for (u, v) in got_g)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_history_prefix(seed, rounds):
    rule = ParityRule(A)
    r = np.random.default_rng(seed)
    g = sample_binomial_multitype([50], [[3.0]], r)
    init = initialize(g, ProbDistMatrix.by_label(A, {"0": 0.5, "1": 0.5}), r)
    short = initialize(g, ONES, r)
    short.history[0] = init.history[0].copy()
    run(init, rule, rounds, stop_on_fixpoint=False)
    s = r.integers(0, rounds + 1)
    if s:
        run(short, rule, int(s), stop_on_fixpoint=False)
    assert np.array_equal(init.histories()[:, : s + 1], short.histories())


@pytest.mark.parametrize("seed", range(20))
def test_core_equals_peeling(seed):
    r = np.random.default_rng(seed)
    c = [2.0, 3.0, 4.0][seed % 3]
    k_core = 2 + seed % 2
    g = sample_binomial_multitype([1000], [[c]], r)
    rule = KCoreRule(A, k_core=k_core)
    mg, trace = run(initialize(g, ONES, r, keep_history=False), rule, 10_000)
    assert trace.converged
    assert np.array_equal(extract_core(mg, rule), np.flatnonzero(peel_core(g, k_core)))
    # one more step leaves the fixed point untouched
    before = mg.messages
    wp_step(mg, rule)
    assert np.array_equal(before, mg.messages)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 1.0))
def test_kcore_limit_independent_of_dominated_init(seed, p1):
    # any all-1-dominated start whose core edges carry 1 reaches the same limit
    r = np.random.default_rng(seed)
    g = sample_binomial_multitype([300], [[4.0]], r)
    rule = KCoreRule(A, k_core=3)
    a, _ = run(initialize(g, ONES, r), rule, 10_000)
    core = peel_core(g, 3)
    m = initialize(g, ProbDistMatrix.by_label(A, {"0": 1 - p1, "1": p1}), r)
    inside = core[g.row] & core[g.indices]
    m.history[0] = np.where(inside, 1, m.history[0]).astype(np.uint8)
    b, _ = run(m, rule, 10_000)
    assert np.array_equal(a.messages, b.messages)
