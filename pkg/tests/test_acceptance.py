"""Exit criteria, each at its stated tolerance. Every test prints one PASS/FAIL line."""

import json
import time

import numpy as np
import pytest
from scipy import stats

from warnprop import change_process as cp
from warnprop import ghat_model as gh
from warnprop.alphabet import KCoreRule, binary_alphabet
from warnprop.cli import execute
from warnprop.dist_fixed_point import bisect_threshold, iterate_to_limit, phi_step_exact
from warnprop.graph_model import peel_core, sample_binomial_multitype
from warnprop.gw_tree import history_distribution
from warnprop.instances import constant_instance, kcore_core_fraction, kcore_instance
from warnprop.wp_engine import changes_since, extract_core, initialize, run

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

A = binary_alphabet(1, [(0, 0)])


def scalar_oracle_threshold(lo=2.5, hi=4.5, tol=1e-7):
    """Smallest c for which x = Pr(Po(cx) >= 2) has a root in (0, 1], by grid check and bisection."""
    x = np.linspace(1e-4, 1.0, 200_001)

    def nontrivial(c):
        return bool(np.any(stats.poisson.sf(1, c * x) >= x))

    while hi - lo > tol:
        mid = (lo + hi) / 2
        lo, hi = (lo, mid) if nontrivial(mid) else (mid, hi)
    return (lo + hi) / 2


def test_criterion_1_wp_equals_peeling(verdict):
    v = verdict(1, "WP core equals peeling core")
    mismatched = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        c = (2.0, 3.0, 4.0)[seed % 3]
        k_core = 2 + (seed // 3) % 2
        g = sample_binomial_multitype([1000], [[c]], r)
        rule = KCoreRule(A, k_core=k_core)
        mg, _ = run(initialize(g, kcore_instance(k_core).Q0, r, keep_history=False), rule, 100_000)
        wp = np.zeros(g.n, dtype=bool)
        wp[extract_core(mg, rule)] = True
        mismatched += int(np.count_nonzero(wp != peel_core(g, k_core)))
    elapsed = time.perf_counter() - v.start
    ok = mismatched == 0 and elapsed < 60
    assert v.report(ok, f"{mismatched} mismatched vertices over 100 graphs")


def test_criterion_2_threshold_and_core_fraction(verdict):
    v = verdict(2, "3-core threshold and core fraction")
    b = kcore_instance(3)
    res = bisect_threshold(lambda c: kcore_instance(3, c).model, b.rule, b.Q0, 3.0, 4.0,
                           lambda P: P.prob_of_label(0, 0, "1"), tol=1e-5)
    oracle = scalar_oracle_threshold()
    gap = abs(res.threshold - oracle)
    c = res.threshold + 0.15
    bc = kcore_instance(3, c)
    P = iterate_to_limit(bc.model, bc.rule, bc.Q0, tol=1e-13, max_iters=100_000).P
    pred = float(kcore_core_fraction(bc, P)[0])
    errs = []
    for seed in range(3):
        r = np.random.default_rng(1000 + seed)
        g = sample_binomial_multitype([200_000], [[c]], r)
        mg, _ = run(initialize(g, bc.Q0, r, keep_history=False), bc.rule, 100_000)
        errs.append(abs(len(extract_core(mg, bc.rule)) / g.n - pred))
    elapsed = time.perf_counter() - v.start
    ok = gap < 1e-3 and max(errs) < 0.01 and elapsed < 600
    assert v.report(ok, f"bisection {res.threshold:.5f} vs oracle {oracle:.5f} (gap {gap:.1e}); "
                        f"core fraction {pred:.4f}, max error {max(errs):.4f}")


def test_criterion_3_t0_independent_of_n(verdict):
    v = verdict(3, "t0 independent of n")
    b = kcore_instance(3, 3.5)
    t0s = {}
    monotone = True
    for n in (10_000, 100_000):
        for seed in range(5):
            r = np.random.default_rng([n, seed])
            g = sample_binomial_multitype([n], [[3.5]], r)
            _, tr = run(initialize(g, b.Q0, r, keep_history=False), b.rule, 100_000)
            since = [changes_since(tr, t) for t in range(tr.final_round + 1)]
            t0 = next(t for t, s in enumerate(since) if s < 0.01 * g.num_directed)
            t0s.setdefault(n, []).append(t0)
            tail = since[t0:]
            monotone &= all(x > y for x, y in zip(tail, tail[1:]) if x > 0) and tail[-1] == 0
    # across n: every seed's t0 lies within 2 rounds of the other size's median
    med = {n: float(np.median(t)) for n, t in t0s.items()}
    worst = max(max(abs(t - med[100_000]) for t in t0s[10_000]),
                max(abs(t - med[10_000]) for t in t0s[100_000]))
    elapsed = time.perf_counter() - v.start
    ok = worst <= 2 and monotone and elapsed < 600
    assert v.report(ok, f"t0 at n=1e4 {t0s[10_000]}, at n=1e5 {t0s[100_000]}, worst distance to the other "
                        f"median {worst:g}, monotone after t0: {monotone}")


def _marginal_check(bundle, rng):
    n = 100_000
    Qh = history_distribution(bundle.model, bundle.rule, 4, bundle.Q0, n, rng)
    Q = bundle.Q0
    worst = 0.0
    for t in range(5):
        for (i, j) in Q.pairs():
            p = Q.entry(i, j)
            emp = Qh.marginal(i, j, t)
            tv = 0.5 * float(np.abs(emp - p).sum())
            bound = 0.5 * float(np.sqrt(p * (1 - p) / Qh.entries[(i, j)].total).sum())
            if bound == 0:
                if tv != 0:
                    return float("inf")
            else:
                worst = max(worst, tv / bound)
        Q = phi_step_exact(bundle.model, bundle.rule, Q)
    return worst


def test_criterion_4_marginal_consistency(verdict):
    v = verdict(4, "history marginals match the fixed-point iterates")
    rng = np.random.default_rng(4)
    kc = _marginal_check(kcore_instance(3, 3.5), rng)
    co = _marginal_check(constant_instance("0"), rng)
    elapsed = time.perf_counter() - v.start
    ok = kc < 3 and co < 3 and elapsed < 120
    assert v.report(ok, f"worst TV/bound k-core {kc:.2f}, constant {co:.2f} (limit 3)")


def test_criterion_5_ghat_soundness(verdict):
    v = verdict(5, "Ghat construction soundness")
    b = kcore_instance(3, 3.5)
    rng = np.random.default_rng(5)
    Qh = history_distribution(b.model, b.rule, 3, b.Q0, 1_000_000, rng)
    q = gh.q_table(Qh)
    symmetric = all(q[(m2, m1)] == p for (m1, m2), p in q.items())
    sound = True
    frac = {}
    zmax = 0.0
    for n in (1000, 10_000, 100_000):
        runs = []
        for _ in range(3):
            res = gh.build_ghat(b.model, b.rule, [n], b.Q0, 3, rng, Qhist=Qh)
            sound &= gh.check_matching(res) and res.mg.graph.is_simple()
            runs.append(res.deleted.total / n)
            if n == 100_000:
                z = gh.census_zscores(res.halfedges, gh.mbar(b.model, [n], q, b.alphabet))
                zmax = max(zmax, max(abs(x) for x in z.values()))
        frac[n] = float(np.mean(runs))
    decreasing = frac[1000] > frac[10_000] > frac[100_000]
    elapsed = time.perf_counter() - v.start
    ok = symmetric and sound and zmax < 4 and decreasing and elapsed < 600
    assert v.report(ok, f"matching/simple {sound}, q symmetric {symmetric}, census max |z| {zmax:.2f}, "
                        f"|E0|/n " + ", ".join(f"{frac[n]:.4f}" for n in sorted(frac)))


def test_criterion_6_compilation_gap(verdict):
    v = verdict(6, "in-compilation frequencies of Ghat and G")
    b = kcore_instance(3, 3.5)
    t0 = 3
    rng = np.random.default_rng(6)
    Qh = history_distribution(b.model, b.rule, t0, b.Q0, 1_000_000, rng)
    G, H, G2 = [], [], []
    for seed in range(5):
        r = np.random.default_rng([6, seed])
        g = sample_binomial_multitype([10_000], [[3.5]], r)
        G.append(gh.wp_messaged_graph(g, b.rule, b.Q0, t0, r))
        H.append(gh.build_ghat(b.model, b.rule, [g.n], b.Q0, t0, r, Qhist=Qh).mg)
        # a second independent G sample shows the gap sampling noise alone produces
        r2 = np.random.default_rng([60, seed])
        G2.append(gh.wp_messaged_graph(sample_binomial_multitype([10_000], [[3.5]], r2), b.rule, b.Q0, t0, r2))
    f = gh.compilation_frequencies(G)
    gaps = gh.compilation_gap(f, gh.compilation_frequencies(H), 0.01)
    worst = max(gaps.values())
    noise = max(gh.compilation_gap(f, gh.compilation_frequencies(G2), 0.01).values())
    elapsed = time.perf_counter() - v.start
    ok = worst <= 0.05 and elapsed < 300
    assert v.report(ok, f"{len(gaps)} compilations at >= 1%, worst relative gap {worst:.3f} (limit 0.05); "
                        f"G against an independent G: {noise:.3f}")


def test_criterion_7_subcriticality(verdict):
    v = verdict(7, "subcriticality of the change process")
    rng = np.random.default_rng(7)
    b = kcore_instance(3, 3.5)
    rep = cp.subcriticality_verdict(b.model, b.rule, b.Q0, {"samples": 200_000}, rng)
    T, pd = rep.matrix.T, rep.perron
    cert = bool(np.all(T @ pd.alpha <= (1 - pd.gamma) * pd.alpha))
    main_ok = rep.rho + 2 * rep.stderr < 1 and cert and rep.verdict == cp.SUBCRITICAL
    thr = scalar_oracle_threshold()
    offsets = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    rhos = []
    for off in offsets:
        bc = kcore_instance(3, thr + off)
        rhos.append(cp.subcriticality_verdict(bc.model, bc.rule, bc.Q0, {"samples": 100_000}, rng).rho)
    monotone = all(x > y for x, y in zip(rhos, rhos[1:]))
    const = constant_instance("0")
    crep = cp.subcriticality_verdict(const.model, const.rule, const.Q0, {"samples": 10_000}, rng)
    S = len(const.alphabet)
    const_ok = crep.rho <= S * S * crep.perron.pad * (1 + 1e-12)
    elapsed = time.perf_counter() - v.start
    ok = main_ok and monotone and const_ok and elapsed < 600
    assert v.report(ok, f"rho {rep.rho:.4f} +- {rep.stderr:.4f}, certificate {cert}; grid rho "
                        + " ".join(f"{r:.3f}" for r in rhos)
                        + f"; constant rule rho {crep.rho:.2e}")


def test_criterion_8_perron_oracle(verdict):
    v = verdict(8, "Perron root against a dense eigensolver")
    r = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        n = int(r.integers(1, 9))
        T = r.random((n, n)) * (r.random((n, n)) < r.uniform(0.2, 1.0)) * r.uniform(0.01, 4.0)
        pd = cp.perron(T, 1e-6)
        oracle = float(np.max(np.abs(np.linalg.eigvals(T + 1e-6))))
        worst = max(worst, abs(pd.rho - oracle))
    assert v.report(worst < 1e-8, f"max |rho - oracle| {worst:.2e} over 1000 matrices")


CLI_CONFIGS = {
    "converge": {"instance": {"name": "kcore", "params": {"k_core": 3, "degree_family": 3.5}},
                 "n": [5000, 20_000], "replicates": 2, "deltas": [0.01, 0.05]},
    "threshold": {"instance": {"name": "kcore", "params": {"k_core": 3}}, "n": [5000], "replicates": 2,
                  "grid": [3.0, 3.5, 4.0], "bisect": {"lo": 3.0, "hi": 4.0}},
    "contiguity": {"instance": {"name": "kcore", "params": {"k_core": 3, "degree_family": 3.5}},
                   "n": [5000], "replicates": 2, "history_samples": 100_000},
    "subcritical": {"instance": {"name": "kcore", "params": {"k_core": 3}}, "grid": [3.5, 4.0],
                    "samples": 50_000, "t0": 4},
    "assumptions": {"instance": {"name": "kcore", "params": {"k_core": 3, "degree_family": 3.5}},
                    "n": [5000], "radius": 2, "tree_samples": 10_000},
}


def test_criterion_9_cli_determinism(verdict, tmp_path):
    v = verdict(9, "byte-identical CLI output")
    differing = []
    for verb, cfg in CLI_CONFIGS.items():
        text = json.dumps(cfg)
        outs = []
        for k, threads in enumerate((1, 4)):
            out = tmp_path / f"{verb}{k}"
            execute(verb, text, out, seed=2024, threads=threads)
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        if outs[0] != outs[1] or not outs[0]:
            differing.append(verb)
    assert v.report(not differing, f"{len(CLI_CONFIGS)} verbs, differing: {differing or 'none'}")
