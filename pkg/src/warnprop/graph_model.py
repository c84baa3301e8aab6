"""Multi-type random graphs, type-degree sequences and local statistics."""
from __future__ import annotations

import hashlib
import io
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError

__all__ = [
    "TypedGraph",
    "type_degree_sequence",
    "edge_type_counts",
    "sample_binomial_multitype",
    "sample_configuration",
    "build_dsat_factor_graph",
    "ball",
    "certificate",
    "tree_certificate",
    "empirical_neighbourhoods",
    "tv_to_tree",
    "count_near_short_cycle",
    "vertices_on_short_cycles",
    "max_degree",
    "class_sizes",
    "peel_core",
    "write_graph",
    "read_graph",
]


class TypedGraph:
    """Simple undirected k-type graph in CSR form.

    Directed edge ids are CSR positions: position p in row u is the edge
    u -> indices[p]; ``rev[p]`` is the position of the opposite direction.
    """

    def __init__(self, k: int, types, indptr, indices):
        self.k = int(k)
        self.types = np.asarray(types, dtype=np.int64)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.n = len(self.types)
        if len(self.indptr) != self.n + 1:
            raise DomainError("indptr length must be n + 1")
        if self.n and (self.types.min() < 0 or self.types.max() >= self.k):
            raise DomainError("vertex type outside [0, k)")
        self.row = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))
        self.rev = self._reverse_positions()

    @classmethod
    def from_edges(cls, k: int, types, edges, allow_loops: bool = False) -> "TypedGraph":
        types = np.asarray(types, dtype=np.int64)
        n = len(types)
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(e) and (e.min() < 0 or e.max() >= n):
            raise DomainError("edge endpoint outside the vertex range")
        if not allow_loops and np.any(e[:, 0] == e[:, 1]):
            raise DomainError("loops are not allowed")
        lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
        key = lo * max(n, 1) + hi
        if len(np.unique(key)) != len(key):
            raise DomainError("multi-edges are not allowed")
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        return cls(k, types, np.cumsum(indptr), dst)

    def _reverse_positions(self) -> np.ndarray:
        if len(self.indices) == 0:
            return np.empty(0, dtype=np.int64)
        n = max(self.n, 1)
        fwd = self.row * n + self.indices
        back = self.indices * n + self.row
        order = np.argsort(fwd)
        pos = np.searchsorted(fwd[order], back)
        return order[pos]

    # -- accessors ----------------------------------------------------------
    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def num_directed(self) -> int:
        return len(self.indices)

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbours(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def edges(self) -> np.ndarray:
        """Undirected edges (u < v), sorted."""
        keep = self.row < self.indices
        return np.column_stack([self.row[keep], self.indices[keep]])

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.types, minlength=self.k)

    def is_simple(self) -> bool:
        if np.any(self.row == self.indices):
            return False
        key = self.row * max(self.n, 1) + self.indices
        return len(np.unique(key)) == len(key)

    def adjacency_sets(self) -> list[set[int]]:
        return [set(self.neighbours(v).tolist()) for v in range(self.n)]

    def __repr__(self):
        return f"TypedGraph(k={self.k}, n={self.n}, m={self.num_edges})"


def class_sizes(graph: TypedGraph) -> np.ndarray:
    return graph.class_sizes()


def max_degree(graph: TypedGraph) -> int:
    return int(graph.degrees().max()) if graph.n else 0


def type_degree_sequence(graph: TypedGraph) -> np.ndarray:
    """Rows (type, d_1..d_k) per vertex."""
    out = np.zeros((graph.n, graph.k + 1), dtype=np.int64)
    out[:, 0] = graph.types
    if graph.num_directed:
        np.add.at(out, (graph.row, 1 + graph.types[graph.indices]), 1)
    return out


def edge_type_counts(graph: TypedGraph) -> np.ndarray:
    """e[i, j] = number of directed edges from type i to type j."""
    e = np.zeros((graph.k, graph.k), dtype=np.int64)
    np.add.at(e, (graph.types[graph.row], graph.types[graph.indices]), 1)
    return e


# -- generators -----------------------------------------------------------------

def _types_from_sizes(n_vec: Sequence[int]) -> np.ndarray:
    return np.repeat(np.arange(len(n_vec)), np.asarray(n_vec, dtype=np.int64))


def _sample_distinct_pairs(rng, count: int, a_vertices, b_vertices, same: bool) -> np.ndarray:
    """``count`` distinct unordered pairs, uniformly among all admissible pairs."""
    if count == 0:
        return np.empty((0, 2), dtype=np.int64)
    na, nb = len(a_vertices), len(b_vertices)
    chosen = np.empty(0, dtype=np.int64)
    while len(chosen) < count:
        need = count - len(chosen)
        x = rng.integers(0, na, size=int(need * 1.1) + 8)
        y = rng.integers(0, nb, size=len(x))
        if same:
            keep = x != y
            x, y = np.minimum(x[keep], y[keep]), np.maximum(x[keep], y[keep])
        key = x * nb + y
        merged = np.concatenate([chosen, key])
        _, first = np.unique(merged, return_index=True)
        # preserve draw order so truncation keeps a uniform subset
        chosen = merged[np.sort(first)][:count]
    x, y = np.divmod(chosen, nb)
    return np.column_stack([a_vertices[x], b_vertices[y]])


def sample_binomial_multitype(n_vec: Sequence[int], kernel, rng) -> TypedGraph:
    """Each pair u in V_i, v in V_j is an edge w.p. min(kernel[i, j] / n, 1)."""
    kernel = np.asarray(kernel, dtype=float)
    k = len(n_vec)
    if kernel.shape != (k, k):
        raise DomainError("kernel must be k x k")
    if not np.allclose(kernel, kernel.T) or np.any(kernel < 0):
        raise DomainError("kernel must be symmetric and nonnegative")
    types = _types_from_sizes(n_vec)
    n = len(types)
    starts = np.concatenate([[0], np.cumsum(n_vec)])
    blocks = []
    for i in range(k):
        for j in range(i, k):
            if kernel[i, j] == 0 or n == 0:
                continue
            p = min(kernel[i, j] / n, 1.0)
            vi = np.arange(starts[i], starts[i + 1])
            vj = np.arange(starts[j], starts[j + 1])
            npairs = len(vi) * (len(vi) - 1) // 2 if i == j else len(vi) * len(vj)
            m = int(rng.binomial(npairs, p)) if npairs else 0
            blocks.append(_sample_distinct_pairs(rng, m, vi, vj, same=(i == j)))
    edges = np.concatenate(blocks) if blocks else np.empty((0, 2), dtype=np.int64)
    return TypedGraph.from_edges(k, types, edges)


@dataclass
class ConfigurationResult:
    graph: TypedGraph
    restarts: int
    erased: int = 0
    deviation: bool = False


def sample_configuration(typedeg, rng, max_restarts: int = 100, k: int | None = None,
                         return_info: bool = False):
    """Uniform simple matching of typed half-edges.

    ``typedeg`` rows are (type, d_1..d_k). Restarts on loops or multi-edges;
    after ``max_restarts`` failures the offending edges are erased and the
    result is flagged.
    """
    td = np.asarray(typedeg, dtype=np.int64)
    if td.size == 0:
        td = td.reshape(0, (k or 1) + 1)
    k = td.shape[1] - 1
    types = td[:, 0]
    n = len(types)
    for i in range(k):
        for j in range(k):
            a = td[types == i, 1 + j].sum()
            b = td[types == j, 1 + i].sum()
            if a != b:
                raise DomainError(f"edge balance fails for types {(i + 1, j + 1)}: {a} vs {b}")
            if i == j and a % 2:
                raise DomainError(f"odd number of half-edges inside type {i + 1}")
    stubs = {}
    for i in range(k):
        for j in range(k):
            owners = np.flatnonzero(types == i)
            stubs[(i, j)] = np.repeat(owners, td[owners, 1 + j])

    def attempt():
        parts = []
        for i in range(k):
            for j in range(i, k):
                if i == j:
                    s = rng.permutation(stubs[(i, i)])
                    parts.append(s.reshape(-1, 2))
                else:
                    a = stubs[(i, j)]
                    b = rng.permutation(stubs[(j, i)])
                    parts.append(np.column_stack([a, b]))
        return np.concatenate(parts) if parts else np.empty((0, 2), dtype=np.int64)

    for restart in range(max_restarts + 1):
        e = attempt()
        bad = _bad_edges(e, n)
        if not bad.any():
            g = TypedGraph.from_edges(k, types, e)
            return ConfigurationResult(g, restart) if return_info else g
    e = e[~bad]
    lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
    g = TypedGraph.from_edges(k, types, np.column_stack([lo, hi]))
    info = ConfigurationResult(g, max_restarts, erased=int(bad.sum()), deviation=True)
    return info if return_info else g


def _bad_edges(e: np.ndarray, n: int) -> np.ndarray:
    """Loops and every copy of a repeated edge beyond the first."""
    loops = e[:, 0] == e[:, 1]
    lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
    key = lo * max(n, 1) + hi
    _, first = np.unique(key, return_index=True)
    dup = np.ones(len(e), dtype=bool)
    dup[first] = False
    return loops | dup


@dataclass
class DSatFormula:
    """Factor-graph encoding plus the underlying clause list."""

    graph: TypedGraph
    clauses: list[list[int]] = field(default_factory=list)  # signed 1-based literals
    n_vars: int = 0


def build_dsat_factor_graph(n_vars: int, m_clauses: int, d: int, rng,
                            return_formula: bool = False):
    """Types 0 variables, 1 clauses, 2 positive and 3 negative occurrences.

    Each clause picks d distinct variables uniformly with fair random signs;
    every occurrence vertex sits between its variable and its clause.
    """
    if d < 1:
        raise DomainError("clause size must be at least 1")
    if m_clauses and d > n_vars:
        raise DomainError("clause size exceeds the number of variables")
    clauses = []
    for _ in range(m_clauses):
        vs = rng.choice(n_vars, size=d, replace=False)
        signs = rng.random(d) < 0.5
        clauses.append([int(v) + 1 if s else -(int(v) + 1) for v, s in zip(vs, signs)])
    g = formula_graph(n_vars, clauses)
    return DSatFormula(g, clauses, n_vars) if return_formula else g


def formula_graph(n_vars: int, clauses: Sequence[Sequence[int]]) -> TypedGraph:
    """Four-type factor graph of an explicit CNF (signed 1-based literals)."""
    m = len(clauses)
    pos = [(a, lit) for a, c in enumerate(clauses) for lit in c if lit > 0]
    neg = [(a, lit) for a, c in enumerate(clauses) for lit in c if lit < 0]
    types = np.concatenate([np.zeros(n_vars), np.ones(m), np.full(len(pos), 2), np.full(len(neg), 3)])
    edges = []
    base = n_vars + m
    for t, occ in enumerate((pos, neg)):
        for idx, (a, lit) in enumerate(occ):
            o = base + idx + (len(pos) if t else 0)
            edges.append((abs(lit) - 1, o))
            edges.append((n_vars + a, o))
    return TypedGraph.from_edges(4, types.astype(np.int64), edges)


# -- rooted balls and certificates ----------------------------------------------

def ball(graph: TypedGraph, root: int, r: int) -> tuple[list[int], dict[int, int]]:
    """Vertices within distance r of root (BFS order) and their distances."""
    dist = {root: 0}
    order = [root]
    q = deque([root])
    while q:
        u = q.popleft()
        if dist[u] == r:
            continue
        for w in graph.neighbours(u):
            w = int(w)
            if w not in dist:
                dist[w] = dist[u] + 1
                order.append(w)
                q.append(w)
    return order, dist


def tree_certificate(types: Sequence[int], children: Sequence[Sequence[int]], root: int = 0) -> str:
    """Canonical string of a rooted typed tree (children listed per vertex)."""
    memo: dict[int, str] = {}
    stack = [(root, False)]
    while stack:
        v, done = stack.pop()
        if done:
            memo[v] = "(" + str(int(types[v])) + "".join(sorted(memo[c] for c in children[v])) + ")"
        else:
            stack.append((v, True))
            stack.extend((c, False) for c in children[v])
    return memo[root]


def certificate(graph: TypedGraph, root: int, r: int) -> str:
    """Isomorphism-invariant label of the rooted, typed r-ball at root.

    Tree balls get an exact canonical string. Balls with cycles get a colour
    refinement signature, which may merge refinement-equivalent balls.
    """
    verts, dist = ball(graph, root, r)
    inside = set(verts)
    adj = {v: [int(w) for w in graph.neighbours(v) if int(w) in inside] for v in verts}
    n_edges = sum(len(a) for a in adj.values()) // 2
    if n_edges == len(verts) - 1:
        children = {v: [w for w in adj[v] if dist[w] == dist[v] + 1] for v in verts}
        idx = {v: i for i, v in enumerate(verts)}
        return tree_certificate([graph.types[v] for v in verts],
                                [[idx[c] for c in children[v]] for v in verts], 0)
    colour = {v: f"{int(graph.types[v])}/{dist[v]}{'*' if v == root else ''}" for v in verts}
    for _ in range(len(verts)):
        new = {v: _digest(colour[v] + "|" + ",".join(sorted(colour[w] for w in adj[v]))) for v in verts}
        if len(set(new.values())) == len(set(colour.values())):
            colour = new
            break
        colour = new
    hist = sorted(Counter(colour.values()).items())
    return "cyc:" + _digest(f"{colour[root]};{n_edges};{hist}")


def _digest(s: str) -> str:
    return hashlib.blake2b(s.encode(), digest_size=12).hexdigest()


@dataclass
class NeighbourhoodStats:
    i: int
    r: int
    freq: dict[str, float]
    count: int

    def tv(self, other: dict[str, float]) -> float:
        keys = set(self.freq) | set(other)
        return 0.5 * math.fsum(abs(self.freq.get(c, 0.0) - other.get(c, 0.0)) for c in keys)


def empirical_neighbourhoods(graph: TypedGraph, i: int, r: int) -> NeighbourhoodStats:
    """Frequencies of r-ball certificates over type-i roots."""
    if r > 5:
        raise DomainError("radius capped at 5")
    roots = np.flatnonzero(graph.types == i)
    counts = Counter(certificate(graph, int(v), r) for v in roots)
    total = max(len(roots), 1)
    return NeighbourhoodStats(i, r, {c: m / total for c, m in sorted(counts.items())}, len(roots))


def tv_to_tree(stats: NeighbourhoodStats, model, i: int, r: int, tree_samples: int, rng):
    """TV between the empirical r-ball law and T_i^r, plus a sampling bound.

    The bound is the sum over certificates of the standard errors of both
    empirical frequencies, halved as in the TV definition.
    """
    from .gw_tree import sample_forest

    counts = Counter(sample_forest(model, i, r, tree_samples, rng).certificates())
    tree_freq = {c: m / tree_samples for c, m in counts.items()}
    tv = stats.tv(tree_freq)
    keys = sorted(set(tree_freq) | set(stats.freq))
    bound = 0.5 * math.fsum(
        math.sqrt(tree_freq.get(c, 0.0) * (1 - tree_freq.get(c, 0.0)) / tree_samples)
        + math.sqrt(stats.freq.get(c, 0.0) * (1 - stats.freq.get(c, 0.0)) / max(stats.count, 1))
        for c in keys)
    return tv, bound


# -- short cycles ---------------------------------------------------------------

def vertices_on_short_cycles(graph: TypedGraph, length: int) -> np.ndarray:
    """Boolean mask of vertices lying on a cycle of length <= ``length``."""
    on = np.zeros(graph.n, dtype=bool)
    if length < 3:
        return on
    core = peel_core(graph, 2)
    depth = length // 2
    nbrs = [graph.neighbours(v) for v in range(graph.n)]
    for v in np.flatnonzero(core):
        dist = {v: 0}
        branch = {}
        frontier = []
        for w in nbrs[v]:
            w = int(w)
            if core[w]:
                dist[w], branch[w] = 1, w
                frontier.append(w)
        seen = list(frontier)
        d = 1
        while frontier and d < depth:
            nxt = []
            for x in frontier:
                for y in nbrs[x]:
                    y = int(y)
                    if core[y] and y not in dist:
                        dist[y], branch[y] = d + 1, branch[x]
                        nxt.append(y)
            seen.extend(nxt)
            frontier = nxt
            d += 1
        found = False
        for x in seen:
            for y in nbrs[x]:
                y = int(y)
                if y != v and y in branch and branch[y] != branch[x] and dist[x] + dist[y] + 1 <= length:
                    found = True
                    break
            if found:
                break
        on[v] = found
    return on


def count_near_short_cycle(graph: TypedGraph, t0: int) -> int:
    """|W_t0|: vertices within distance t0 of a cycle of length <= t0."""
    if t0 > 10:
        raise DomainError("t0 capped at 10")
    w = vertices_on_short_cycles(graph, t0)
    for _ in range(t0):
        if not w.any():
            break
        hit = np.zeros(graph.n, dtype=bool)
        hit[graph.indices[w[graph.row]]] = True
        w = w | hit
    return int(w.sum())


def peel_core(graph: TypedGraph, k_core: int) -> np.ndarray:
    """Mask of the k-core: repeatedly delete vertices of degree < k_core."""
    deg = graph.degrees().copy()
    alive = np.ones(graph.n, dtype=bool)
    stack = list(np.flatnonzero(deg < k_core))
    alive[stack] = False
    while stack:
        v = stack.pop()
        for w in graph.neighbours(v):
            if alive[w]:
                deg[w] -= 1
                if deg[w] < k_core:
                    alive[w] = False
                    stack.append(int(w))
    return alive


# -- file format ----------------------------------------------------------------

def write_graph(graph: TypedGraph, fh=None, edge_suffix=None) -> str | None:
    """Header ``k n_1 .. n_k``, then ``v type`` lines, then ``u v`` lines (types 1-based)."""
    buf = io.StringIO()
    sizes = graph.class_sizes()
    buf.write(" ".join(str(x) for x in [graph.k, *sizes.tolist()]) + "\n")
    for v, t in enumerate(graph.types.tolist()):
        buf.write(f"{v} {t + 1}\n")
    for u, v in graph.edges().tolist():
        tail = edge_suffix(u, v) if edge_suffix else ""
        buf.write(f"{u} {v}{(' ' + tail) if tail else ''}\n")
    text = buf.getvalue()
    if fh is None:
        return text
    fh.write(text)
    return None


def read_graph(text_or_lines, with_extra: bool = False):
    lines = text_or_lines.splitlines() if isinstance(text_or_lines, str) else list(text_or_lines)
    lines = [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]
    head = [int(x) for x in lines[0].split()]
    k, sizes = head[0], head[1:]
    if len(sizes) != k:
        raise DomainError("header must list k class sizes")
    n = sum(sizes)
    types = np.empty(n, dtype=np.int64)
    for ln in lines[1:1 + n]:
        v, t = ln.split()
        types[int(v)] = int(t) - 1
    edges, extra = [], []
    for ln in lines[1 + n:]:
        parts = ln.split()
        edges.append((int(parts[0]), int(parts[1])))
        extra.append(parts[2:])
    g = TypedGraph.from_edges(k, types, edges)
    if not np.array_equal(g.class_sizes(), np.asarray(sizes)):
        raise DomainError("class sizes in header disagree with vertex lines")
    return (g, edges, extra) if with_extra else g


def assumption_report(graph: TypedGraph, model=None, r: int = 2, tree_samples: int = 10_000,
                      t0: int = 3, rng=None) -> list[tuple[str, int, float]]:
    """Rows (metric, type, value): class sizes, max degree, edge balance, short
    cycles, and (given a degree model) the r-ball TV to the tree law with its bound."""
    rows: list[tuple[str, int, float]] = []
    n = max(graph.n, 1)
    for i, m in enumerate(graph.class_sizes().tolist()):
        rows.append(("class_fraction", i + 1, m / n))
    rows.append(("max_degree", 0, float(max_degree(graph))))
    e = edge_type_counts(graph)
    rows.append(("edge_balance_defect", 0, float(np.abs(e - e.T).max()) if e.size else 0.0))
    rows.append(("near_short_cycle_fraction", 0, count_near_short_cycle(graph, t0) / n))
    if model is not None:
        rng = np.random.default_rng(rng)
        for i in range(graph.k):
            if not np.any(graph.types == i):
                continue
            st = empirical_neighbourhoods(graph, i, r)
            tv, bound = tv_to_tree(st, model, i, r, tree_samples, rng)
            rows.append((f"ball_tv_r{r}", i + 1, tv))
            rows.append((f"ball_tv_bound_r{r}", i + 1, bound))
    return rows
