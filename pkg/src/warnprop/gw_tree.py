"""Multi-type Galton-Watson trees and root message histories.

Trees are grown level by level for a whole batch at once. Level 0 holds the
roots; each vertex stores the index of its parent in the previous level.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .alphabet import UpdateRule
from .degree_model import DegreeModel
from .dist_fixed_point import HistoryDistMatrix, ProbDistMatrix
from .errors import DomainError, ResourceError
from .graph_model import tree_certificate

__all__ = [
    "Forest",
    "GWTree",
    "sample_forest",
    "sample_tree_i",
    "sample_tree_ij",
    "root_histories",
    "root_history",
    "history_distribution",
    "expected_generation_sizes",
    "history_population",
]

DEFAULT_CAP = 10_000_000


@dataclass
class Forest:
    """Batch of trees stored level-wise.

    ``types[L]``, ``parent[L]`` (index into level L-1, -1 at level 0) and
    ``tree[L]`` (batch index) are parallel arrays. ``root_parent_type`` is the
    type of the childless parent v for edge-rooted trees, -1 otherwise.
    """

    types: list[np.ndarray]
    parent: list[np.ndarray]
    tree: list[np.ndarray]
    root_parent_type: int
    n_trees: int

    @property
    def depth(self) -> int:
        return len(self.types) - 1

    def sizes(self) -> np.ndarray:
        out = np.zeros(self.n_trees, dtype=np.int64)
        for t in self.tree:
            out += np.bincount(t, minlength=self.n_trees)
        return out

    def certificates(self) -> list[str]:
        """Canonical string of every tree, same format as ``tree_certificate``."""
        below: list[list[str]] = [[] for _ in range(len(self.types[-1]))]
        for L in range(len(self.types) - 1, -1, -1):
            labels = [f"({t}{''.join(sorted(ch))})" for t, ch in zip(self.types[L].tolist(), below)]
            if L == 0:
                return labels
            below = [[] for _ in range(len(self.types[L - 1]))]
            for p, lab in zip(self.parent[L].tolist(), labels):
                below[p].append(lab)
        return []

    def ptypes(self, level: int) -> np.ndarray:
        if level == 0:
            return np.full(len(self.types[0]), self.root_parent_type, dtype=np.int64)
        return self.types[level - 1][self.parent[level]]


def sample_forest(model: DegreeModel, root_type: int, depth: int, n_trees: int, rng,
                  root_parent_type: int = -1, cap: int = DEFAULT_CAP) -> Forest:
    """Grow ``n_trees`` trees to ``depth`` levels below the roots.

    Vertex-rooted trees (``root_parent_type == -1``) draw root children from
    Z_i; all other vertices draw from the offspring law given their parent.
    """
    if depth < 0:
        raise DomainError("depth must be nonnegative")
    if root_parent_type >= 0 and (root_type, root_parent_type) not in model.admissible:
        raise DomainError(f"pair {(root_type + 1, root_parent_type + 1)} is not admissible")
    k = model.k
    types = [np.full(n_trees, root_type, dtype=np.int64)]
    parent = [np.full(n_trees, -1, dtype=np.int64)]
    tree = [np.arange(n_trees, dtype=np.int64)]
    sizes = np.ones(n_trees, dtype=np.int64)
    for level in range(depth):
        cur_t = types[level]
        m = len(cur_t)
        if m == 0:
            types.append(np.empty(0, dtype=np.int64))
            parent.append(np.empty(0, dtype=np.int64))
            tree.append(np.empty(0, dtype=np.int64))
            continue
        pt = (np.full(m, root_parent_type, dtype=np.int64) if level == 0
              else types[level - 1][parent[level]])
        counts = np.zeros((m, k), dtype=np.int64)
        keys = (pt + 1) * k + cur_t
        for key in np.unique(keys):
            p_type, c_type = divmod(int(key), k)
            hit = keys == key
            if p_type == 0:
                law = model.laws[c_type]
            else:
                law = model.offspring(parent=p_type - 1, child=c_type)
            counts[hit] = law.sample(rng, int(hit.sum()))
        flat = counts.reshape(-1)
        child_parent = np.repeat(np.repeat(np.arange(m, dtype=np.int64), k), flat)
        child_type = np.repeat(np.tile(np.arange(k, dtype=np.int64), m), flat)
        types.append(child_type)
        parent.append(child_parent)
        tree.append(tree[level][child_parent])
        sizes += np.bincount(tree[-1], minlength=n_trees)
        if sizes.max() > cap:
            raise ResourceError(f"tree exceeded {cap} vertices; offspring law looks supercritical")
    return Forest(types, parent, tree, root_parent_type, n_trees)


@dataclass
class GWTree:
    """One tree with global vertex ids; vertex 0 is the root (u)."""

    types: np.ndarray
    parent: np.ndarray  # -1 for the root
    depth: np.ndarray
    root_parent_type: int = -1

    @classmethod
    def from_forest(cls, forest: Forest, index: int = 0) -> "GWTree":
        types, parent, depth = [], [], []
        offset_prev = None
        for L in range(len(forest.types)):
            mine = np.flatnonzero(forest.tree[L] == index)
            new_ids = np.arange(len(mine)) + sum(len(t) for t in types)
            if L == 0:
                parent.append(np.full(len(mine), -1, dtype=np.int64))
            else:
                parent.append(offset_prev[forest.parent[L][mine]])
            glob = np.full(len(forest.types[L]), -1, dtype=np.int64)
            glob[mine] = new_ids
            offset_prev = glob
            types.append(forest.types[L][mine])
            depth.append(np.full(len(mine), L, dtype=np.int64))
        return cls(np.concatenate(types), np.concatenate(parent), np.concatenate(depth),
                   forest.root_parent_type)

    @property
    def size(self) -> int:
        return len(self.types)

    def children(self) -> list[list[int]]:
        ch = [[] for _ in range(self.size)]
        for v, p in enumerate(self.parent.tolist()):
            if p >= 0:
                ch[p].append(v)
        return ch

    def certificate(self) -> str:
        return tree_certificate(self.types, self.children(), 0)

    def is_acyclic(self) -> bool:
        return bool(np.all(self.parent[1:] < np.arange(1, self.size))) and self.parent[0] == -1


def sample_tree_i(model: DegreeModel, i: int, r: int, rng, cap: int = DEFAULT_CAP) -> GWTree:
    return GWTree.from_forest(sample_forest(model, i, r, 1, rng, cap=cap))


def sample_tree_ij(model: DegreeModel, i: int, j: int, r: int, rng, cap: int = DEFAULT_CAP) -> GWTree:
    """Edge-rooted tree: u of type i below a childless parent of type j."""
    return GWTree.from_forest(sample_forest(model, i, r, 1, rng, root_parent_type=j, cap=cap))


def expected_generation_sizes(model: DegreeModel, i: int, r: int) -> np.ndarray:
    """Mean number of vertices per level of T_i, levels 0..r (mean-matrix recursion)."""
    k = model.k
    out = [1.0]
    # m[(parent_type, type)] expected count at the current level
    cur = {(-1, i): 1.0}
    for _ in range(r):
        nxt: dict[tuple[int, int], float] = {}
        for (pt, t), mass in cur.items():
            law = model.laws[t] if pt < 0 else model.offspring(parent=pt, child=t)
            mv = law.mean_vector()
            for h in range(k):
                if mv[h] > 0:
                    nxt[(t, h)] = nxt.get((t, h), 0.0) + mass * mv[h]
        cur = nxt
        out.append(sum(cur.values()))
    return np.array(out)


def root_histories(model: DegreeModel, rule: UpdateRule, i: int, j: int, t: int,
                   Q0: ProbDistMatrix, n: int, rng, cap: int = DEFAULT_CAP) -> np.ndarray:
    """``n`` independent draws of (X^(0), ..., X^(t)) for the root edge u -> v.

    The tree is cut t levels below u: a message needs one round per level to
    climb, so deeper vertices cannot influence the first t rounds.
    """
    if t < 0:
        raise DomainError("t must be nonnegative")
    alphabet = rule.alphabet
    S = len(alphabet)
    forest = sample_forest(model, i, t, n, rng, root_parent_type=j, cap=cap)
    # msgs[L][x] = current message from level-L vertex x to its parent
    msgs = [Q0.sample(forest.types[L], forest.ptypes(L), rng) for L in range(t + 1)]
    out = np.empty((n, t + 1), dtype=np.int64)
    out[:, 0] = msgs[0]
    for s in range(1, t + 1):
        for L in range(0, t - s + 1):
            m = len(forest.types[L])
            if m == 0:
                continue
            below = forest.parent[L + 1]
            counts = np.bincount(below * S + msgs[L + 1], minlength=m * S).reshape(m, S)
            msgs[L] = rule.evaluate_counts(counts, forest.types[L], forest.ptypes(L))
        out[:, s] = msgs[0]
    return out


def root_history(model, rule, i, j, t, Q0, rng) -> tuple[int, ...]:
    return tuple(int(x) for x in root_histories(model, rule, i, j, t, Q0, 1, rng)[0])


def history_distribution(model: DegreeModel, rule: UpdateRule, t: int, Q0: ProbDistMatrix,
                         samples: int, rng, chunk: int = 20_000, workers: int = 1) -> HistoryDistMatrix:
    """Empirical law of root histories for every admissible pair.

    Chunks draw from independent child streams of ``rng``; counts merge in
    chunk order, so the result does not depend on ``workers``.
    """
    if samples < 1:
        raise DomainError("samples must be positive")
    ss = rng.bit_generator.seed_seq if hasattr(rng, "bit_generator") else np.random.SeedSequence(rng)
    jobs = []
    for (i, j) in sorted(model.admissible):
        sizes = [chunk] * (samples // chunk) + ([samples % chunk] if samples % chunk else [])
        for size, child in zip(sizes, ss.spawn(len(sizes))):
            jobs.append((i, j, size, child))

    def run(job):
        i, j, size, seed = job
        return (i, j), root_histories(model, rule, i, j, t, Q0, size, np.random.default_rng(seed))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    per_pair: dict[tuple[int, int], list[np.ndarray]] = {}
    for key, arr in results:
        per_pair.setdefault(key, []).append(arr)
    return HistoryDistMatrix.from_samples(rule.alphabet, t,
                                          {key: np.concatenate(v) for key, v in per_pair.items()})


def history_population(model: DegreeModel, rule: UpdateRule, t: int, Q0: ProbDistMatrix,
                       size: int, rng) -> HistoryDistMatrix:
    """Population-dynamics estimate of the history law for deep t.

    A length-(s+1) history at (i, j) is X(0) ~ Q0[i, j] followed by phi of the
    children's length-s histories, shifted by one round. Children histories are
    resampled from the current population, so the cost is linear in t rather
    than exponential in the tree depth.
    """
    if t < 0 or size < 1:
        raise DomainError("need t >= 0 and size >= 1")
    S = len(rule.alphabet)
    k = model.k
    pairs = sorted(model.admissible)
    pop = {(i, j): Q0.sample(np.full(size, i), np.full(size, j), rng).reshape(size, 1)
           for (i, j) in pairs}
    for s in range(t):
        new = {}
        for (i, j) in pairs:
            counts = model.offspring(parent=j, child=i).sample(rng, size)
            flat = counts.reshape(-1)
            par = np.repeat(np.repeat(np.arange(size), k), flat)
            ctype = np.repeat(np.tile(np.arange(k), size), flat)
            hist = np.empty((len(par), s + 1), dtype=np.int64)
            for h in np.unique(ctype):
                hit = ctype == h
                hist[hit] = pop[(int(h), i)][rng.integers(0, size, int(hit.sum()))]
            out = np.empty((size, s + 2), dtype=np.int64)
            out[:, 0] = Q0.sample(np.full(size, i), np.full(size, j), rng)
            src, tgt = np.full(size, i), np.full(size, j)
            for r in range(s + 1):
                c = np.bincount(par * S + hist[:, r], minlength=size * S).reshape(size, S)
                out[:, r + 1] = rule.evaluate_counts(c, src, tgt)
            new[(i, j)] = out
        pop = new
    return HistoryDistMatrix.from_samples(rule.alphabet, t, pop)
