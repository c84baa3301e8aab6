"""Probability distribution matrices and the one-round operator on them.

``R = phi(Q)`` has entry (i, j) equal to the law of the rule applied to the
messages a type-i vertex with a type-j parent receives from its children:
children come from the offspring law, and a type-h child's message is drawn
from ``Q[h, i]`` (the entry typed like that message).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import gammaln

from .alphabet import MessageAlphabet, UpdateRule
from .degree_model import DegreeModel, degree_cap as _degree_cap
from .errors import DomainError, NumericError

__all__ = [
    "bisect_threshold",
    "ThresholdResult",
    "ProbDistMatrix",
    "HistoryDistMatrix",
    "ExactPhi",
    "phi_step_exact",
    "phi_step_mc",
    "tv",
    "iterate_to_limit",
    "LimitResult",
    "stability_check",
    "potential_change_probability",
]


class ProbDistMatrix:
    """k x k grid of laws on the alphabet; absent entries carry no law."""

    def __init__(self, alphabet: MessageAlphabet, probs, present=None, tol: float = 1e-12):
        k, S = alphabet.k, len(alphabet)
        p = np.array(probs, dtype=float)
        if p.shape != (k, k, S):
            raise DomainError(f"probability array must have shape {(k, k, S)}")
        if present is None:
            present = p.sum(axis=2) > 0
        present = np.array(present, dtype=bool)
        p[~present] = 0.0
        for i, j in zip(*np.nonzero(present)):
            row = p[i, j]
            if np.any(row < 0):
                raise DomainError(f"negative probability in entry {(i, j)}")
            off = np.ones(S, dtype=bool)
            off[alphabet.typed(i, j)] = False
            if np.any(row[off] > 0):
                raise DomainError(f"entry {(i, j)} puts mass on symbols of another type")
            if abs(row.sum() - 1.0) > tol:
                raise DomainError(f"entry {(i, j)} sums to {row.sum()!r}")
        self.alphabet = alphabet
        self.p = p
        self.present = present
        self._cdf: dict[tuple[int, int], np.ndarray] = {}

    # -- constructors -------------------------------------------------------
    @classmethod
    def from_entries(cls, alphabet: MessageAlphabet, entries: Mapping, tol: float = 1e-12):
        """``entries[(i, j)] = {symbol: prob}``."""
        k, S = alphabet.k, len(alphabet)
        p = np.zeros((k, k, S))
        present = np.zeros((k, k), dtype=bool)
        for (i, j), law in entries.items():
            present[i, j] = True
            for s, q in law.items():
                p[i, j, int(s)] = q
        return cls(alphabet, p, present, tol=tol)

    @classmethod
    def point_mass(cls, alphabet: MessageAlphabet, label: str, pairs=None):
        """Every listed edge type (default: all typed pairs) sends ``label``."""
        pairs = alphabet.edge_types() if pairs is None else pairs
        return cls.from_entries(alphabet, {(i, j): {alphabet.symbol(i, j, label): 1.0} for i, j in pairs})

    @classmethod
    def by_label(cls, alphabet: MessageAlphabet, law: Mapping[str, float], pairs=None):
        pairs = alphabet.edge_types() if pairs is None else pairs
        return cls.from_entries(alphabet, {
            (i, j): {alphabet.symbol(i, j, lab): q for lab, q in law.items()} for i, j in pairs})

    def copy(self) -> "ProbDistMatrix":
        return ProbDistMatrix(self.alphabet, self.p.copy(), self.present.copy(), tol=1e-9)

    # -- access -------------------------------------------------------------
    @property
    def k(self) -> int:
        return self.alphabet.k

    def entry(self, i: int, j: int) -> np.ndarray:
        if not self.present[i, j]:
            raise DomainError(f"entry {(i, j)} is absent")
        return self.p[i, j]

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.present))]

    def prob_of_label(self, i: int, j: int, label: str) -> float:
        return float(self.p[i, j, self.alphabet.symbol(i, j, label)])

    def sample(self, src, tgt, rng) -> np.ndarray:
        """One symbol per (src[e], tgt[e]) drawn from the matching entry."""
        src = np.asarray(src, dtype=np.int64)
        tgt = np.asarray(tgt, dtype=np.int64)
        out = np.empty(len(src), dtype=np.int64)
        if len(src) == 0:
            return out
        key = src * self.k + tgt
        for kk in np.unique(key):
            i, j = divmod(int(kk), self.k)
            if not self.present[i, j]:
                raise DomainError(f"no initial law for edge type {(i + 1, j + 1)}")
            cdf = self._cdf.get((i, j))
            if cdf is None:
                cdf = self._cdf[(i, j)] = np.cumsum(self.p[i, j])
            hit = key == kk
            u = rng.random(int(hit.sum())) * cdf[-1]
            out[hit] = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        return out

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "alphabet": self.alphabet.to_dict(),
            "entries": [
                {"i": i + 1, "j": j + 1,
                 "probs": {str(s): float(self.p[i, j, s]) for s in self.alphabet.typed(i, j).tolist()}}
                for i, j in self.pairs()
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict, alphabet: MessageAlphabet | None = None) -> "ProbDistMatrix":
        alphabet = alphabet or MessageAlphabet.from_dict(doc["alphabet"])
        return cls.from_entries(alphabet, {
            (e["i"] - 1, e["j"] - 1): {int(s): q for s, q in e["probs"].items()} for e in doc["entries"]},
            tol=1e-9)

    @classmethod
    def loads(cls, text: str) -> "ProbDistMatrix":
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        rows = ", ".join(f"{(i + 1, j + 1)}: {np.round(self.p[i, j][self.alphabet.typed(i, j)], 6).tolist()}"
                         for i, j in self.pairs())
        return f"ProbDistMatrix({rows})"


def tv(Q: ProbDistMatrix, R: ProbDistMatrix) -> float:
    """Sum over entries of the total variation distance; absent vs present costs 1."""
    if Q.alphabet != R.alphabet:
        raise DomainError("matrices live on different alphabets")
    both = Q.present & R.present
    one = Q.present ^ R.present
    d = 0.5 * np.abs(Q.p - R.p).sum(axis=2)
    return float(math.fsum(d[both].tolist()) + one.sum())


# -- history distributions ------------------------------------------------------

@dataclass
class _HistEntry:
    histories: np.ndarray  # (m, t+1) distinct histories, lexicographic
    counts: np.ndarray     # (m,)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class HistoryDistMatrix:
    """k x k grid of empirical laws on message histories of length t+1."""

    alphabet: MessageAlphabet
    t: int
    entries: dict[tuple[int, int], _HistEntry] = field(default_factory=dict)

    @classmethod
    def from_samples(cls, alphabet, t, samples: Mapping[tuple[int, int], np.ndarray]):
        out = cls(alphabet, t)
        for key, arr in samples.items():
            arr = np.asarray(arr, dtype=np.int64).reshape(-1, t + 1)
            h, c = np.unique(arr, axis=0, return_counts=True)
            out.entries[key] = _HistEntry(h.reshape(-1, t + 1), c)
        return out

    def present(self, i: int, j: int) -> bool:
        return (i, j) in self.entries

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.entries)

    def items(self, i: int, j: int):
        e = self.entries[(i, j)]
        tot = e.total
        for h, c in zip(e.histories, e.counts):
            yield tuple(int(x) for x in h), c / tot

    def prob(self, i: int, j: int, history) -> float:
        e = self.entries.get((i, j))
        if e is None:
            return 0.0
        hit = np.all(e.histories == np.asarray(history, dtype=np.int64), axis=1)
        return float(e.counts[hit].sum() / e.total)

    def marginal(self, i: int, j: int, index: int) -> np.ndarray:
        e = self.entries[(i, j)]
        return np.bincount(e.histories[:, index], weights=e.counts,
                           minlength=len(self.alphabet)) / e.total

    def marginal_matrix(self, index: int) -> ProbDistMatrix:
        k, S = self.alphabet.k, len(self.alphabet)
        p = np.zeros((k, k, S))
        present = np.zeros((k, k), dtype=bool)
        for (i, j) in self.entries:
            p[i, j] = self.marginal(i, j, index)
            present[i, j] = True
        return ProbDistMatrix(self.alphabet, p, present, tol=1e-9)

    def sample(self, i: int, j: int, size: int, rng) -> np.ndarray:
        e = self.entries[(i, j)]
        cdf = np.cumsum(e.counts)
        idx = np.searchsorted(cdf, rng.integers(0, cdf[-1], size=size), side="right")
        return e.histories[idx]

    def truncate(self, t: int) -> "HistoryDistMatrix":
        out = HistoryDistMatrix(self.alphabet, t)
        for key, e in self.entries.items():
            rows = np.repeat(e.histories[:, : t + 1], e.counts, axis=0)
            h, c = np.unique(rows, axis=0, return_counts=True)
            out.entries[key] = _HistEntry(h.reshape(-1, t + 1), c)
        return out

    def merge(self, other: "HistoryDistMatrix") -> "HistoryDistMatrix":
        if other.t != self.t or other.alphabet != self.alphabet:
            raise DomainError("cannot merge history matrices of different shape")
        out = HistoryDistMatrix(self.alphabet, self.t)
        for key in sorted(set(self.entries) | set(other.entries)):
            parts = [x.entries[key] for x in (self, other) if key in x.entries]
            h = np.concatenate([p.histories for p in parts])
            c = np.concatenate([p.counts for p in parts])
            u, inv = np.unique(h, axis=0, return_inverse=True)
            out.entries[key] = _HistEntry(u.reshape(-1, self.t + 1),
                                          np.bincount(inv.reshape(-1), weights=c).astype(np.int64))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "history", "count", "probability"])
        for (i, j) in self.pairs():
            e = self.entries[(i, j)]
            for h, c in zip(e.histories, e.counts):
                w.writerow([i + 1, j + 1, self.alphabet.format_history(h), int(c), repr(c / e.total)])
        return buf.getvalue()


def potential_change_probability(Qhist: HistoryDistMatrix, old: int, new: int) -> float:
    """Fraction of histories typed like ``old`` containing ``old`` then ``new`` consecutively."""
    a = Qhist.alphabet
    if a.typing[old] != a.typing[new]:
        raise DomainError("a change pair must share its typing")
    key = a.typing[old]
    e = Qhist.entries.get(key)
    if e is None or Qhist.t < 1:
        return 0.0
    h = e.histories
    hit = np.any((h[:, :-1] == old) & (h[:, 1:] == new), axis=1)
    return float(e.counts[hit].sum() / e.total)


# -- one-round operator ---------------------------------------------------------

def _compositions(n: int, parts: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to n."""
    if parts == 0:
        return np.zeros((1 if n == 0 else 0, 0), dtype=np.int64)
    if parts == 1:
        return np.array([[n]], dtype=np.int64)
    rows = []
    for first in range(n + 1):
        rest = _compositions(n - first, parts - 1)
        rows.append(np.column_stack([np.full(len(rest), first), rest]))
    return np.concatenate(rows).astype(np.int64)


class ExactPhi:
    """Exact one-round operator with offspring enumeration cached once.

    For entry (i, j) every (offspring vector, message count vector) term is
    stored with its offspring mass, multinomial log-coefficient and rule
    output; applying the operator only evaluates the monomials in Q.
    """

    def __init__(self, model: DegreeModel, rule: UpdateRule, degree_cap: int | None = None,
                 tail: float = 1e-9, residual_bound: float = 1e-6, max_terms: int = 5_000_000):
        self.model = model
        self.rule = rule
        self.alphabet = alphabet = rule.alphabet
        self.residual_bound = residual_bound
        k, S = model.k, len(alphabet)
        self.terms = {}
        self.residual = {}
        for (i, j) in sorted(model.admissible):
            law = model.offspring(parent=j, child=i)
            cap = degree_cap if degree_cap is not None else _degree_cap(law, tail)
            vecs, masses, resid = law.support(max_total=cap, threshold=tail * 1e-3)
            self.residual[(i, j)] = resid
            groups = {h: alphabet.typed(h, i) for h in range(k)}
            comp_cache: dict[tuple[int, int], np.ndarray] = {}
            blocks_C, blocks_logw, blocks_mass = [], [], []
            for a, m in zip(vecs, masses):
                per_type = []
                for h in range(k):
                    if a[h] == 0:
                        continue
                    syms = groups[h]
                    if len(syms) == 0:
                        raise DomainError(f"no symbols typed {(h + 1, i + 1)} for children of type {h + 1}")
                    key = (h, int(a[h]))
                    if key not in comp_cache:
                        comp_cache[key] = _compositions(int(a[h]), len(syms))
                    per_type.append((syms, comp_cache[key], int(a[h])))
                C = np.zeros((1, S), dtype=np.int64)
                logw = np.zeros(1)
                for syms, comp, n in per_type:
                    lw = gammaln(n + 1) - gammaln(comp + 1).sum(axis=1)
                    C2 = np.repeat(C, len(comp), axis=0)
                    C2[:, syms] += np.tile(comp, (len(C), 1))
                    logw = (logw[:, None] + lw[None, :]).reshape(-1)
                    C = C2
                blocks_C.append(C)
                blocks_logw.append(logw)
                blocks_mass.append(np.full(len(C), m))
            C = np.concatenate(blocks_C) if blocks_C else np.zeros((0, S), dtype=np.int64)
            if len(C) > max_terms:
                raise NumericError(f"exact enumeration for entry {(i + 1, j + 1)} has {len(C)} terms")
            out = rule.evaluate_counts(C, np.full(len(C), i), np.full(len(C), j)) if len(C) else np.empty(0, int)
            if len(out) and (np.any(alphabet.src[out] != i) or np.any(alphabet.tgt[out] != j)):
                raise DomainError(f"rule output mistyped for entry {(i + 1, j + 1)}")
            self.terms[(i, j)] = (C, np.concatenate(blocks_logw) if blocks_logw else np.zeros(0),
                                  np.concatenate(blocks_mass) if blocks_mass else np.zeros(0), out)

    @property
    def max_residual(self) -> float:
        return max(self.residual.values(), default=0.0)

    def __call__(self, Q: ProbDistMatrix) -> ProbDistMatrix:
        if self.max_residual > self.residual_bound:
            raise NumericError(f"truncated offspring mass {self.max_residual:.3g} exceeds the bound")
        k, S = self.model.k, len(self.alphabet)
        # q[s] = probability of symbol s in the entry typed like s
        q = Q.p[self.alphabet.src, self.alphabet.tgt, np.arange(S)]
        p = np.zeros((k, k, S))
        present = np.zeros((k, k), dtype=bool)
        with np.errstate(divide="ignore"):
            logq = np.log(q)
        for (i, j), (C, logw, mass, out) in self.terms.items():
            used = C.any(axis=0)
            for s in np.flatnonzero(used):
                h = self.alphabet.src[s]
                if not Q.present[h, i]:
                    raise DomainError(f"Q has no entry {(h + 1, i + 1)} for incoming messages")
            if len(C):
                lp = C[:, used] @ np.where(np.isfinite(logq[used]), logq[used], 0.0)
                w = mass * np.exp(logw + lp)
                zero_syms = used & (q == 0)
                if zero_syms.any():
                    w[(C[:, zero_syms] > 0).any(axis=1)] = 0.0
                row = np.bincount(out, weights=w, minlength=S)
            else:
                row = np.zeros(S)
            total = row.sum()
            if total <= 0:
                raise NumericError(f"entry {(i + 1, j + 1)} received no mass")
            p[i, j] = row / total
            present[i, j] = True
        return ProbDistMatrix(self.alphabet, p, present, tol=1e-9)


def phi_step_exact(model: DegreeModel, rule: UpdateRule, Q: ProbDistMatrix,
                   degree_cap: int | None = None, return_residual: bool = False):
    op = ExactPhi(model, rule, degree_cap)
    R = op(Q)
    return (R, op.max_residual) if return_residual else R


def _incoming_counts(model, alphabet, Q, i, j, samples, rng):
    law = model.offspring(parent=j, child=i)
    kids = law.sample(rng, samples)
    S = len(alphabet)
    counts = np.zeros((samples, S), dtype=np.int64)
    for h in range(model.k):
        n_h = kids[:, h]
        tot = int(n_h.sum())
        if tot == 0:
            continue
        owner = np.repeat(np.arange(samples), n_h)
        msgs = Q.sample(np.full(tot, h), np.full(tot, i), rng)
        counts += np.bincount(owner * S + msgs, minlength=samples * S).reshape(samples, S)
    return counts


def phi_step_mc(model: DegreeModel, rule: UpdateRule, Q: ProbDistMatrix, samples: int, rng) -> ProbDistMatrix:
    """Monte Carlo estimate of phi(Q) from ``samples`` draws per entry."""
    if samples < 1:
        raise DomainError("samples must be positive")
    alphabet = rule.alphabet
    k, S = model.k, len(alphabet)
    p = np.zeros((k, k, S))
    present = np.zeros((k, k), dtype=bool)
    for (i, j) in sorted(model.admissible):
        counts = _incoming_counts(model, alphabet, Q, i, j, samples, rng)
        out = rule.evaluate_counts(counts, np.full(samples, i), np.full(samples, j))
        p[i, j] = np.bincount(out, minlength=S) / samples
        present[i, j] = True
    return ProbDistMatrix(alphabet, p, present, tol=1e-9)


@dataclass
class LimitResult:
    P: ProbDistMatrix
    iters: int
    converged: bool
    log: list[tuple[int, float, float]]  # (iteration, tv step, ratio to previous step)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "tv", "ratio"])
        for row in self.log:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()


def iterate_to_limit(model: DegreeModel, rule: UpdateRule, Q0: ProbDistMatrix, tol: float | None = None,
                     max_iters: int = 10_000, mode: str = "exact", samples: int = 100_000,
                     rng=None, degree_cap: int | None = None, operator: ExactPhi | None = None) -> LimitResult:
    """Iterate phi from Q0 until successive iterates are within ``tol`` in TV."""
    if mode == "exact":
        op = operator or ExactPhi(model, rule, degree_cap)
        step = op
        tol = 1e-10 if tol is None else tol
    elif mode == "mc":
        if rng is None:
            raise DomainError("Monte Carlo iteration needs a random generator")
        step = lambda Q: phi_step_mc(model, rule, Q, samples, rng)  # noqa: E731
        n_entries = max(len(model.admissible), 1)
        tol = 3.0 * n_entries * math.sqrt(0.25 / samples) if tol is None else tol
    else:
        raise DomainError(f"unknown mode {mode!r}")
    if tol <= 0:
        raise DomainError("tol must be positive")
    Q = Q0
    log = []
    prev = None
    for it in range(1, max_iters + 1):
        R = step(Q)
        d = tv(R, Q)
        log.append((it, d, d / prev if prev else math.nan))
        prev = d
        Q = R
        if d < tol:
            return LimitResult(Q, it, True, log)
    return LimitResult(Q, max_iters, False, log)


@dataclass
class StabilityResult:
    lipschitz: float
    stable: bool
    eps: float
    directions: int
    margin: float


def stability_check(model: DegreeModel, rule: UpdateRule, P: ProbDistMatrix, eps: float = 1e-3,
                    directions: int = 64, rng=None, margin: float = 0.05,
                    operator: ExactPhi | None = None) -> StabilityResult:
    """Finite-difference Lipschitz probe of phi around P in TV."""
    rng = np.random.default_rng(rng)
    op = operator or ExactPhi(model, rule)
    base = op(P)
    a = P.alphabet
    best = 0.0
    used = 0
    for _ in range(directions):
        p = P.p.copy()
        for (i, j) in P.pairs():
            syms = a.typed(i, j)
            v = rng.standard_normal(len(syms))
            v -= v.mean()
            norm = np.abs(v).sum()
            if norm == 0:
                continue
            row = np.clip(p[i, j, syms] + eps * v / norm, 0.0, None)
            p[i, j, syms] = row / row.sum()
        Q = ProbDistMatrix(a, p, P.present, tol=1e-9)
        d_in = tv(Q, P)
        if d_in == 0:
            continue
        used += 1
        best = max(best, tv(op(Q), base) / d_in)
    return StabilityResult(best, best < 1 - margin, eps, used, margin)


@dataclass
class ThresholdResult:
    threshold: float
    lo: float
    hi: float
    evaluations: int


def bisect_threshold(make_model, rule: UpdateRule, Q0: ProbDistMatrix, lo: float, hi: float,
                     mass, tol: float = 1e-4, floor: float = 1e-6, max_iters: int = 100_000,
                     iter_tol: float = 1e-13) -> ThresholdResult:
    """Smallest parameter where the limit from Q0 is nontrivial, by bisection.

    ``make_model(c)`` builds the degree model, ``mass(P)`` scores the limit;
    the limit counts as nontrivial when ``mass(P) > floor``. Requires a
    trivial limit at ``lo`` and a nontrivial one at ``hi``.
    """
    def nontrivial(c):
        res = iterate_to_limit(make_model(c), rule, Q0, tol=iter_tol, max_iters=max_iters)
        return mass(res.P) > floor

    evals = 2
    if nontrivial(lo) or not nontrivial(hi):
        raise DomainError("bisection needs a trivial limit at lo and a nontrivial one at hi")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        evals += 1
        if nontrivial(mid):
            hi = mid
        else:
            lo = mid
    return ThresholdResult(0.5 * (lo + hi), lo, hi, evals)
