"""Half-edge model with pre-generated stories, and graph comparisons.

Every vertex gets half-edges with an in-story drawn from the history law and
an out-story computed from the vertex's other in-stories. Half-edges are then
paired with half-edges carrying the swapped story, avoiding loops and
multi-edges. Stories are stored as integer codes: sum h[r] * S**r.
"""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .alphabet import UpdateRule
from .degree_model import DegreeModel
from .dist_fixed_point import HistoryDistMatrix, ProbDistMatrix
from .errors import DomainError
from .graph_model import TypedGraph
from .gw_tree import history_distribution
from .wp_engine import MessagedGraph, initialize, run

__all__ = [
    "HalfEdges",
    "DeletionReport",
    "GhatResult",
    "sample_halfedges",
    "compute_out_stories",
    "match_halfedges",
    "build_ghat",
    "story_census",
    "census_to_csv",
    "q_table",
    "q_table_to_csv",
    "mbar",
    "census_zscores",
    "check_matching",
    "ClosenessReport",
    "closeness",
    "OutStoryReport",
    "out_story_law_check",
    "in_compilations",
    "compilation_frequencies",
    "compilation_gap",
    "wp_messaged_graph",
]


def encode(histories: np.ndarray, S: int) -> np.ndarray:
    h = np.asarray(histories, dtype=np.int64)
    return h @ (S ** np.arange(h.shape[1], dtype=np.int64))


def decode(codes, S: int, length: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return (codes[:, None] // (S ** np.arange(length, dtype=np.int64))) % S


@dataclass
class HalfEdges:
    """Step-2 state plus the derived out-stories (all arrays aligned per half-edge)."""

    types: np.ndarray        # vertex types
    owner: np.ndarray
    target: np.ndarray       # type on the other end
    in_story: np.ndarray     # (m, t0+1), typed (target, owner type)
    out0: np.ndarray         # round-0 out-message, typed (owner type, target)
    out_story: np.ndarray | None = None

    @property
    def t0(self) -> int:
        return self.in_story.shape[1] - 1

    def __len__(self) -> int:
        return len(self.owner)


@dataclass
class DeletionReport:
    imbalance: int = 0
    parity: int = 0
    simplicity: int = 0

    @property
    def total(self) -> int:
        return self.imbalance + self.parity + self.simplicity


@dataclass
class GhatResult:
    mg: MessagedGraph
    census: Counter
    deleted: DeletionReport
    halfedges: HalfEdges
    edges: np.ndarray = field(repr=False)         # matched half-edge index pairs
    repaired: int = 0

    @property
    def n(self) -> int:
        return len(self.halfedges.types)


def sample_halfedges(model: DegreeModel, sizes: Sequence[int], Qhist: HistoryDistMatrix,
                     Q0: ProbDistMatrix, rng) -> HalfEdges:
    """Half-edge counts from Z_i, in-stories from Qhist[j, i], out0 from Q0[i, j]."""
    k = model.k
    types = np.repeat(np.arange(k), np.asarray(sizes, dtype=np.int64))
    n = len(types)
    counts = np.zeros((n, k), dtype=np.int64)
    for i in range(k):
        hit = types == i
        if hit.any():
            counts[hit] = model.laws[i].sample(rng, int(hit.sum()))
    flat = counts.reshape(-1)
    owner = np.repeat(np.repeat(np.arange(n, dtype=np.int64), k), flat)
    target = np.repeat(np.tile(np.arange(k, dtype=np.int64), n), flat)
    own_t = types[owner]
    t0 = Qhist.t
    in_story = np.empty((len(owner), t0 + 1), dtype=np.int64)
    key = target * k + own_t
    for kk in np.unique(key):
        j, i = divmod(int(kk), k)
        hit = key == kk
        if not Qhist.present(j, i):
            raise DomainError(f"no history law for edge type {(j + 1, i + 1)}")
        in_story[hit] = Qhist.sample(j, i, int(hit.sum()), rng)
    out0 = Q0.sample(own_t, target, rng)
    return HalfEdges(types, owner, target, in_story, out0)


def compute_out_stories(he: HalfEdges, rule: UpdateRule) -> np.ndarray:
    """Out-story entry s >= 1 is phi of the owner's other in-messages at round s-1."""
    S = len(rule.alphabet)
    n = len(he.types)
    m, L = he.in_story.shape
    out = np.empty((m, L), dtype=np.int64)
    out[:, 0] = he.out0
    rows = np.arange(m)
    src, tgt = he.types[he.owner], he.target
    for s in range(1, L):
        prev = he.in_story[:, s - 1]
        tot = np.bincount(he.owner * S + prev, minlength=n * S).reshape(n, S)
        c = tot[he.owner]
        c[rows, prev] -= 1
        out[:, s] = rule.evaluate_counts(c, src, tgt)
    he.out_story = out
    return out


def _edge_key(u, v, n):
    return np.minimum(u, v) * n + np.maximum(u, v)


def match_halfedges(he: HalfEdges, S: int, rng, passes: int = 50):
    """Pair half-edges with swapped stories into a simple graph.

    Each dual class pair is shuffled and paired greedily; loops and repeated
    edges are then re-paired by swapping partners within the same class pair
    (up to ``passes`` sweeps) and whatever still conflicts is deleted.
    """
    n = len(he.types)
    k = int(he.types.max()) + 1 if n else 1
    own_t = he.types[he.owner]
    cin, cout = encode(he.in_story, S), encode(he.out_story, S)
    # class: (owner type, target type, out, in); dual swaps both
    base = int(max(cin.max(initial=0), cout.max(initial=0))) + 1
    cls = ((own_t * k + he.target) * base + cout) * base + cin
    dual = ((he.target * k + own_t) * base + cin) * base + cout
    order = np.argsort(cls, kind="stable")
    ucls, start, cnt = np.unique(cls[order], return_index=True, return_counts=True)
    where = {int(c): (int(s), int(m)) for c, s, m in zip(ucls, start, cnt)}
    report = DeletionReport()
    pairs, groups = [], []
    for c, (s, m) in where.items():
        d = int(dual[order[s]])
        if d < c:
            continue
        mine = rng.permutation(order[s:s + m])
        if d == c:
            half = m // 2
            report.parity += m - 2 * half
            pairs.append(np.column_stack([mine[:half], mine[half:2 * half]]))
            groups.append(np.full(half, c))
            continue
        if d in where:
            ds, dm = where[d]
            other = rng.permutation(order[ds:ds + dm])
        else:
            other = np.empty(0, dtype=np.int64)
        r = min(len(mine), len(other))
        report.imbalance += len(mine) + len(other) - 2 * r
        pairs.append(np.column_stack([mine[:r], other[:r]]))
        groups.append(np.full(r, c))
    E = np.concatenate(pairs) if pairs else np.empty((0, 2), dtype=np.int64)
    G = np.concatenate(groups) if groups else np.empty(0, dtype=np.int64)
    E, repaired, dropped = _repair(E, G, he.owner, n, rng, passes)
    report.simplicity = 2 * dropped
    return E, report, repaired


def _bad_mask(E, owner, n):
    u, v = owner[E[:, 0]], owner[E[:, 1]]
    key = _edge_key(u, v, n)
    _, first = np.unique(key, return_index=True)
    dup = np.ones(len(E), dtype=bool)
    dup[first] = False
    return (u == v) | dup


def _repair(E, G, owner, n, rng, passes):
    """Swap partners inside a class pair to remove loops and multi-edges."""
    E = E.copy()
    bad = _bad_mask(E, owner, n) if len(E) else np.zeros(0, dtype=bool)
    repaired = 0
    if bad.any():
        keys = Counter(_edge_key(owner[E[:, 0]], owner[E[:, 1]], n).tolist())
        members: dict[int, np.ndarray] = {}
        for _ in range(passes):
            todo = np.flatnonzero(bad)
            if len(todo) == 0:
                break
            for e in todo.tolist():
                g = int(G[e])
                if g not in members:
                    members[g] = np.flatnonzero(G == g)
                f = int(rng.choice(members[g]))
                if f == e:
                    continue
                x, y = owner[E[e, 0]], owner[E[e, 1]]
                x2, y2 = owner[E[f, 0]], owner[E[f, 1]]
                if x == y2 or x2 == y:
                    continue
                k_new1, k_new2 = int(_edge_key(x, y2, n)), int(_edge_key(x2, y, n))
                if k_new1 == k_new2 or keys[k_new1] or keys[k_new2]:
                    continue
                for kk in (int(_edge_key(x, y, n)), int(_edge_key(x2, y2, n))):
                    keys[kk] -= 1
                keys[k_new1] += 1
                keys[k_new2] += 1
                E[e, 1], E[f, 1] = E[f, 1], E[e, 1]
                bad[e] = False
                bad[f] = False
                repaired += 1
            bad = _bad_mask(E, owner, n)
    dropped = int(bad.sum()) if len(E) else 0
    return E[~bad] if len(E) else E, repaired, dropped


def story_census(he: HalfEdges) -> Counter:
    """(out-story, in-story) tuples -> number of half-edges, before any deletion."""
    if he.out_story is None:
        raise DomainError("out-stories have not been computed")
    rows = np.concatenate([he.out_story, he.in_story], axis=1)
    if len(rows) == 0:
        return Counter()
    u, c = np.unique(rows, axis=0, return_counts=True)
    L = he.in_story.shape[1]
    return Counter({(tuple(int(x) for x in r[:L]), tuple(int(x) for x in r[L:])): int(m)
                    for r, m in zip(u, c)})


def census_to_csv(census: Counter, alphabet, extra: dict | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    extra = extra or {}
    w.writerow(["out_story", "in_story", "count", *extra])
    for (mu1, mu2), c in sorted(census.items()):
        w.writerow([alphabet.format_history(mu1), alphabet.format_history(mu2), c, *extra.values()])
    return buf.getvalue()


def _assemble(he: HalfEdges, E: np.ndarray, k: int, alphabet) -> MessagedGraph:
    n = len(he.types)
    u, v = he.owner[E[:, 0]], he.owner[E[:, 1]]
    g = TypedGraph.from_edges(k, he.types, np.column_stack([u, v]) if len(E) else np.empty((0, 2)))
    L = he.in_story.shape[1]
    H = np.zeros((g.num_directed, L), dtype=np.int64)
    key = g.row * max(n, 1) + g.indices
    order = np.argsort(key)
    pos_uv = order[np.searchsorted(key[order], u * max(n, 1) + v)]
    pos_vu = order[np.searchsorted(key[order], v * max(n, 1) + u)]
    H[pos_uv] = he.out_story[E[:, 0]]
    H[pos_vu] = he.out_story[E[:, 1]]
    hist = [H[:, s].astype(np.uint8 if len(alphabet) <= 256 else np.int32) for s in range(L)]
    return MessagedGraph(g, alphabet, hist, L - 1)


def build_ghat(model: DegreeModel, rule: UpdateRule, sizes, Q0: ProbDistMatrix, t0: int, rng,
               Qhist: HistoryDistMatrix | None = None, history_samples: int = 1_000_000,
               passes: int = 50) -> GhatResult:
    """Steps: class sizes, half-edges with stories, out-stories, matching.

    ``sizes`` is a sequence of class sizes or a callable ``rng -> sizes``.
    """
    if t0 < 0:
        raise DomainError("t0 must be nonnegative")
    if callable(sizes):
        sizes = sizes(rng)
    if Qhist is None:
        Qhist = history_distribution(model, rule, t0, Q0, history_samples, rng)
    elif Qhist.t < t0:
        raise DomainError("history law is shorter than t0")
    elif Qhist.t > t0:
        Qhist = Qhist.truncate(t0)
    he = sample_halfedges(model, sizes, Qhist, Q0, rng)
    compute_out_stories(he, rule)
    census = story_census(he)
    S = len(rule.alphabet)
    E, report, repaired = match_halfedges(he, S, rng, passes)
    mg = _assemble(he, E, model.k, rule.alphabet)
    return GhatResult(mg, census, report, he, E, repaired)


def check_matching(res: GhatResult) -> bool:
    """Every matched pair carries swapped stories and the graph is simple."""
    he, E = res.halfedges, res.edges
    ok = (np.array_equal(he.in_story[E[:, 0]], he.out_story[E[:, 1]])
          and np.array_equal(he.out_story[E[:, 0]], he.in_story[E[:, 1]])
          and np.array_equal(he.types[he.owner[E[:, 0]]], he.target[E[:, 1]])
          and np.array_equal(he.target[E[:, 0]], he.types[he.owner[E[:, 1]]]))
    return bool(ok and res.mg.graph.is_simple())


# -- q-table and expected census --------------------------------------------------

def q_table(Qhist: HistoryDistMatrix) -> dict[tuple[tuple, tuple], float]:
    """q(mu1, mu2) = P(mu1) P(mu2) over compatible story pairs."""
    A = Qhist.alphabet
    out = {}
    for (i, j) in Qhist.pairs():
        if not Qhist.present(j, i):
            continue
        for mu1, p1 in Qhist.items(i, j):
            for mu2, p2 in Qhist.items(j, i):
                out[(mu1, mu2)] = p1 * p2
    return dict(sorted(out.items()))


def q_value(Qhist: HistoryDistMatrix, mu1, mu2) -> float:
    A = Qhist.alphabet
    g1 = A.typing[int(mu1[0])]
    if A.typing[int(mu2[0])] != (g1[1], g1[0]):
        return 0.0
    return Qhist.prob(g1[0], g1[1], mu1) * Qhist.prob(g1[1], g1[0], mu2)


def q_table_to_csv(q: dict, alphabet, extra: dict | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    extra = extra or {}
    w.writerow(["mu1", "mu2", "q", *extra])
    for (mu1, mu2), p in sorted(q.items()):
        w.writerow([alphabet.format_history(mu1), alphabet.format_history(mu2), repr(p), *extra.values()])
    return buf.getvalue()


def mbar(model: DegreeModel, sizes: Sequence[int], q: dict, alphabet) -> dict:
    """Expected census E[Z_{g(mu1)}] * n_{source type} * q(mu1, mu2)."""
    out = {}
    for (mu1, mu2), p in q.items():
        i, j = alphabet.typing[int(mu1[0])]
        out[(mu1, mu2)] = float(model.laws[i].mean_vector()[j]) * sizes[i] * p
    return out


def census_zscores(he: HalfEdges, expected: dict) -> dict:
    """(m - mbar) / sd per story class, sd from the per-vertex count variance.

    Half-edges at one vertex share the vertex's other in-stories, so class
    counts are sums of per-vertex counts rather than Poisson.
    """
    L = he.in_story.shape[1]
    rows = np.concatenate([he.out_story, he.in_story], axis=1)
    n = len(he.types)
    out = {}
    if len(rows) == 0:
        return out
    u, inv = np.unique(rows, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    for c, r in enumerate(u):
        key = (tuple(int(x) for x in r[:L]), tuple(int(x) for x in r[L:]))
        per_vertex = np.bincount(he.owner[inv == c], minlength=n)
        sd = float(np.sqrt(n * per_vertex.var(ddof=1))) if n > 1 else 0.0
        m = int(per_vertex.sum())
        out[key] = (m - expected.get(key, 0.0)) / sd if sd > 0 else 0.0
    return out


# -- comparisons --------------------------------------------------------------------

@dataclass
class ClosenessReport:
    edge_difference: int
    disagreements: int
    delta: float
    strict: bool


def closeness(mg1: MessagedGraph, mg2: MessagedGraph, compare_histories: bool = False) -> ClosenessReport:
    g1, g2 = mg1.graph, mg2.graph
    if g1.n != g2.n or not np.array_equal(g1.types, g2.types):
        raise DomainError("graphs must share the labelled vertex set")
    n = max(g1.n, 1)
    k1 = g1.row * n + g1.indices
    k2 = g2.row * n + g2.indices
    common, i1, i2 = np.intersect1d(k1, k2, return_indices=True)
    sym = (len(k1) - len(common) + len(k2) - len(common)) // 2
    if compare_histories:
        a, b = mg1.histories()[i1], mg2.histories()[i2]
        if a.shape[1] != b.shape[1]:
            raise DomainError("histories have different lengths")
        dis = int(np.count_nonzero(np.any(a != b, axis=1)))
    else:
        dis = int(np.count_nonzero(mg1.messages[i1] != mg2.messages[i2]))
    return ClosenessReport(int(sym), dis, max(sym, dis) / n, sym == 0)


@dataclass
class OutStoryReport:
    tv: dict[tuple[int, int], float]
    bound: dict[tuple[int, int], float]

    @property
    def ok(self) -> bool:
        return all(self.tv[key] <= 3 * self.bound[key] for key in self.tv)


def _law(rows: np.ndarray) -> dict:
    if len(rows) == 0:
        return {}
    u, c = np.unique(rows, axis=0, return_counts=True)
    return {tuple(int(x) for x in r): m / len(rows) for r, m in zip(u, c)}


def out_story_law_check(model: DegreeModel, rule: UpdateRule, Q0: ProbDistMatrix, t0: int,
                        samples: int, rng, Qhist: HistoryDistMatrix | None = None,
                        n: int | None = None) -> OutStoryReport:
    """Out-story law at (i, j) half-edges before deletion vs the history law at (i, j).

    The bound per entry is the sum over stories of the binomial standard
    errors of both empirical laws, halved (TV convention).
    """
    if Qhist is None:
        Qhist = history_distribution(model, rule, t0, Q0, samples, rng)
    Qhist = Qhist.truncate(t0) if Qhist.t > t0 else Qhist
    k = model.k
    n = n or samples
    he = sample_halfedges(model, [n] * k, Qhist, Q0, rng)
    compute_out_stories(he, rule)
    own_t = he.types[he.owner]
    tv, bound = {}, {}
    for (i, j) in Qhist.pairs():
        hit = (own_t == i) & (he.target == j)
        emp = _law(he.out_story[hit])
        ref = dict(Qhist.items(i, j))
        m1, m2 = int(hit.sum()), int(Qhist.entries[(i, j)].total)
        keys = sorted(set(emp) | set(ref))
        tv[(i, j)] = 0.5 * sum(abs(emp.get(h, 0.0) - ref.get(h, 0.0)) for h in keys)
        bound[(i, j)] = 0.5 * sum(
            np.sqrt(p * (1 - p) / max(m1, 1)) + np.sqrt(p * (1 - p) / max(m2, 1))
            for p in ((emp.get(h, 0.0) + ref.get(h, 0.0)) / 2 for h in keys))
    return OutStoryReport(tv, bound)


def wp_messaged_graph(graph: TypedGraph, rule: UpdateRule, Q0: ProbDistMatrix, t0: int, rng) -> MessagedGraph:
    """G with t0 rounds of WP and full histories."""
    mg = initialize(graph, Q0, rng)
    if t0 > 0:
        mg, _ = run(mg, rule, t0, stop_on_fixpoint=False)
    return mg


def in_compilations(mg: MessagedGraph) -> list[tuple]:
    """Per vertex: sorted tuple of (in-story, round-0 out-message) over its edges."""
    g = mg.graph
    H = mg.histories()
    S = len(mg.alphabet)
    code_in = encode(H[g.rev], S)          # story arriving along each slot
    out0 = H[:, 0]
    pairs = code_in * S + out0
    order = np.lexsort((pairs, g.row))
    sorted_pairs = pairs[order].tolist()
    out = []
    for v in range(g.n):
        out.append(tuple(sorted_pairs[g.indptr[v]:g.indptr[v + 1]]))
    return out


def compilation_frequencies(mgs: Sequence[MessagedGraph]) -> dict[tuple[int, tuple], float]:
    """Pooled frequency of (vertex type, in-compilation) over the given graphs."""
    c: Counter = Counter()
    total: Counter = Counter()
    for mg in mgs:
        for t, comp in zip(mg.graph.types.tolist(), in_compilations(mg)):
            c[(t, comp)] += 1
            total[t] += 1
    return {key: m / total[key[0]] for key, m in sorted(c.items())}


def compilation_gap(f1: dict, f2: dict, min_freq: float = 0.01) -> dict:
    """Relative gap |f1 - f2| / max(f1, f2) for compilations frequent in either."""
    out = {}
    for key in sorted(set(f1) | set(f2)):
        a, b = f1.get(key, 0.0), f2.get(key, 0.0)
        if max(a, b) >= min_freq:
            out[key] = abs(a - b) / max(a, b)
    return out
