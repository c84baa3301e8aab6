"""Branching process of message changes and its spectral test.

A change is a downward edge x -> y whose message differs between two
scenarios: sigma (old) and sigma' (new). Changes are indexed by the pair
index ``old * S + new`` over the full alphabet, so transition matrices are
S^2 x S^2 and entries for badly typed or trivial pairs stay exactly zero.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .alphabet import UpdateRule
from .degree_model import DegreeModel
from .dist_fixed_point import ProbDistMatrix, iterate_to_limit, phi_step_exact
from .errors import DomainError, NumericError
from .gw_tree import history_population

__all__ = [
    "ChangePair",
    "PotentialChanges",
    "potential_changes",
    "ChangeTree",
    "sample_change_tree",
    "TransitionMatrix",
    "estimate_transition_matrix",
    "PerronData",
    "perron",
    "SubcriticalityReport",
    "subcriticality_verdict",
    "RARE",
]

RARE = 1e-5
SUBCRITICAL, SUPERCRITICAL, INCONCLUSIVE = "subcritical", "supercritical", "inconclusive"


@dataclass(frozen=True)
class ChangePair:
    old: int
    new: int

    def index(self, size: int) -> int:
        return self.old * size + self.new

    @classmethod
    def from_index(cls, idx: int, size: int) -> "ChangePair":
        return cls(*divmod(int(idx), size))

    def check(self, alphabet, allow_equal: bool = False) -> "ChangePair":
        if alphabet.typing[alphabet.check(self.old)] != alphabet.typing[alphabet.check(self.new)]:
            raise DomainError(f"symbols {self.old} and {self.new} are typed differently")
        if self.old == self.new and not allow_equal:
            raise DomainError("a change needs two distinct symbols")
        return self


@dataclass
class PotentialChanges:
    """Observed consecutive pairs (sigma, sigma') and their frequencies."""

    freq: dict[ChangePair, float]
    t_max: int
    samples: int

    def genuine(self) -> list[ChangePair]:
        return sorted((p for p in self.freq if p.old != p.new), key=lambda p: (p.old, p.new))

    def rare(self) -> list[ChangePair]:
        return [p for p in self.genuine() if self.freq[p] < RARE]

    def __contains__(self, pair) -> bool:
        return pair in self.freq


def potential_changes(model: DegreeModel, rule: UpdateRule, Q0: ProbDistMatrix, t_max: int = 20,
                      samples: int = 20_000, rng=None) -> PotentialChanges:
    """Pairs seen as consecutive entries of some history up to depth ``t_max``.

    Histories come from population dynamics, so deep ``t_max`` stays cheap.
    Pairs with (sigma, sigma) are kept for diagnostics; ``genuine()`` drops them.
    """
    if t_max < 1:
        raise DomainError("t_max must be at least 1")
    rng = np.random.default_rng(rng)
    H = history_population(model, rule, t_max, Q0, samples, rng)
    freq: dict[ChangePair, float] = {}
    S = len(rule.alphabet)
    for key in H.pairs():
        e = H.entries[key]
        h = e.histories
        codes = h[:, :-1] * S + h[:, 1:]
        for code in np.unique(codes):
            hit = np.any(codes == code, axis=1)
            freq[ChangePair.from_index(code, S)] = float(e.counts[hit].sum() / e.total)
    return PotentialChanges(dict(sorted(freq.items(), key=lambda kv: (kv[0].old, kv[0].new))),
                            t_max, samples)


# -- one family below a change ---------------------------------------------------

def _families(model: DegreeModel, Q: ProbDistMatrix, a: int, b: int, n: int, rng):
    """Children of n type-b vertices whose parent has type a, with upward messages."""
    k = model.k
    counts = model.offspring(parent=a, child=b).sample(rng, n)
    flat = counts.reshape(-1)
    par = np.repeat(np.repeat(np.arange(n, dtype=np.int64), k), flat)
    ctype = np.repeat(np.tile(np.arange(k, dtype=np.int64), n), flat)
    msg = Q.sample(ctype, np.full(len(ctype), b), rng)
    return par, ctype, msg


def _downward(rule: UpdateRule, b: int, par, ctype, msg, n: int, old, new):
    """Messages y -> child under both scenarios for the parent message old/new."""
    S = len(rule.alphabet)
    tot = np.bincount(par * S + msg, minlength=n * S).reshape(n, S)
    base = tot[par]
    base[np.arange(len(par)), msg] -= 1
    rows = np.arange(len(par))
    c1 = base.copy()
    c1[rows, np.asarray(old)[par]] += 1
    c2 = base
    c2[rows, np.asarray(new)[par]] += 1
    src = np.full(len(par), b)
    return rule.evaluate_counts(c1, src, ctype), rule.evaluate_counts(c2, src, ctype), tot


@dataclass
class ChangeTree:
    """Generations of surviving changes; generation 0 is the root change."""

    pairs: list[np.ndarray]      # pair index per change
    parents: list[np.ndarray]    # index into previous generation
    truncated: bool = False
    fallbacks: int = 0           # families drawn without the upward-message conditioning

    def sizes(self) -> list[int]:
        return [len(p) for p in self.pairs]

    @property
    def extinct(self) -> bool:
        return len(self.pairs[-1]) == 0

    @property
    def total(self) -> int:
        return sum(self.sizes()) - 1


def sample_change_tree(model: DegreeModel, rule: UpdateRule, pair: ChangePair, Q: ProbDistMatrix,
                       depth_cap: int, rng, size_cap: int = 1_000_000, tries: int = 200,
                       allow_equal: bool = False) -> ChangeTree:
    """Grow the change tree generation by generation.

    Children of a changed vertex y carry upward messages drawn from Q. When y
    itself was a child one generation up, its upward message is already fixed,
    so its family is redrawn until phi of that family reproduces it (up to
    ``tries`` rounds, then accepted unconditioned and counted in ``fallbacks``).
    At a fixed point this is the same joint law as a fully grown tree with
    upward WP, without materializing unchanged branches.
    """
    A = rule.alphabet
    S = len(A)
    pair.check(A, allow_equal)
    a0, b0 = A.typing[pair.old]
    # per node: parent type a, own type b, old/new, fixed upward message (-1: free)
    a = np.array([a0]); b = np.array([b0])
    old = np.array([pair.old]); new = np.array([pair.new]); up = np.array([-1])
    tree = ChangeTree([np.array([pair.index(S)])], [np.array([-1])])
    for _ in range(depth_cap):
        nxt = {key: [] for key in ("a", "b", "old", "new", "up", "parent")}
        for key in np.unique(a * model.k + b):
            ga, gb = divmod(int(key), model.k)
            nodes = np.flatnonzero((a == ga) & (b == gb))
            pending = nodes
            for attempt in range(tries + 1):
                if len(pending) == 0:
                    break
                n = len(pending)
                par, ctype, msg = _families(model, Q, ga, gb, n, rng)
                o1, o2, tot = _downward(rule, gb, par, ctype, msg, n, old[pending], new[pending])
                want = up[pending]
                if attempt < tries:
                    ok = (want < 0) | (rule.evaluate_counts(tot, np.full(n, gb), np.full(n, ga)) == want)
                else:
                    ok = np.ones(n, dtype=bool)
                    tree.fallbacks += int(np.count_nonzero(want >= 0))
                keep = ok[par] & (o1 != o2)
                nxt["a"].append(np.full(int(keep.sum()), gb))
                nxt["b"].append(ctype[keep])
                nxt["old"].append(o1[keep])
                nxt["new"].append(o2[keep])
                nxt["up"].append(msg[keep])
                nxt["parent"].append(pending[par[keep]])
                pending = pending[~ok]
        cat = {key: (np.concatenate(v) if v else np.empty(0, dtype=np.int64)) for key, v in nxt.items()}
        order = np.argsort(cat["parent"], kind="stable")
        a, b, old, new, up = (cat[x][order] for x in ("a", "b", "old", "new", "up"))
        tree.pairs.append(old * S + new)
        tree.parents.append(cat["parent"][order])
        if len(a) == 0:
            return tree
        if sum(tree.sizes()) > size_cap:
            tree.truncated = True
            return tree
    tree.truncated = len(a) > 0
    return tree


# -- transition matrix ------------------------------------------------------------

@dataclass
class TransitionMatrix:
    """T[tau1, tau2] = mean number of tau1 changes produced by one tau2 change."""

    T: np.ndarray
    stderr: np.ndarray
    alphabet: object
    columns: list[int] = field(default_factory=list)
    samples: int = 0

    @property
    def size(self) -> int:
        return len(self.alphabet)

    def label(self, idx: int) -> str:
        p = ChangePair.from_index(idx, self.size)
        return f"{p.old}>{p.new}"

    def to_csv(self, extra: dict | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        extra = extra or {}
        w.writerow(["produced", "source", "entry", "stderr", *extra])
        for c in self.columns:
            for r in np.flatnonzero(self.T[:, c]):
                w.writerow([self.label(r), self.label(c), repr(float(self.T[r, c])),
                            repr(float(self.stderr[r, c])), *extra.values()])
        return buf.getvalue()


def estimate_transition_matrix(model: DegreeModel, rule: UpdateRule, Q: ProbDistMatrix, pairs,
                               samples: int, rng) -> TransitionMatrix:
    """One fresh generation per column, ``samples`` families each."""
    A = rule.alphabet
    S = len(A)
    size = S * S
    T = np.zeros((size, size))
    se = np.zeros((size, size))
    cols = []
    for p in pairs:
        p.check(A)
        c = p.index(S)
        cols.append(c)
        a, b = A.typing[p.old]
        par, ctype, msg = _families(model, Q, a, b, samples, rng)
        o1, o2, _ = _downward(rule, b, par, ctype, msg, samples,
                              np.full(samples, p.old), np.full(samples, p.new))
        hit = o1 != o2
        per = np.bincount(par[hit] * size + (o1[hit] * S + o2[hit]),
                          minlength=samples * size).reshape(samples, size)
        T[:, c] = per.mean(axis=0)
        se[:, c] = per.std(axis=0, ddof=1) / math.sqrt(samples) if samples > 1 else 0.0
    return TransitionMatrix(T, se, A, sorted(cols), samples)


# -- Perron data -----------------------------------------------------------------

@dataclass
class PerronData:
    rho: float               # Collatz-Wielandt upper bound on rho(T + pad)
    alpha: np.ndarray        # right Perron vector, sums to 1
    gamma: float             # 1 - rho
    left: np.ndarray         # left Perron vector, sums to 1
    iterations: int
    certificate: bool        # T alpha <= (1 - gamma) alpha entrywise
    violation: float         # max entrywise excess, 0 when the certificate holds
    pad: float


def _power(M: np.ndarray, tol: float, max_iter: int):
    """Power iteration with repeated squaring; stops on the Collatz-Wielandt bracket."""
    n = M.shape[0]
    x = np.full(n, 1.0 / n)
    W = M.copy()
    for it in range(1, max_iter + 1):
        y = M @ x
        ratio = y / x
        lo, hi = ratio.min(), ratio.max()
        if hi - lo <= tol * max(hi, 1e-300):
            return x, lo, hi, it
        prev = x
        x = W @ x
        x /= x.sum()
        if np.any(x <= 0) or not np.all(np.isfinite(x)):
            raise NumericError("power iteration lost positivity")
        if np.array_equal(x, prev):
            # iterates stopped moving: the bracket is at its round-off floor
            return x, lo, hi, it
        W = W @ W
        W /= W.max()
    raise NumericError("power iteration did not converge")


def perron(T, pad_eps: float = 1e-6, tol: float = 1e-10, max_iter: int = 200) -> PerronData:
    """Perron root and vectors of T' = T + pad_eps (every entry)."""
    if isinstance(T, TransitionMatrix):
        T = T.T
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1] or T.shape[0] == 0:
        raise DomainError("T must be a nonempty square matrix")
    if np.any(T < 0) or not np.all(np.isfinite(T)):
        raise DomainError("T must be finite and nonnegative")
    if pad_eps <= 0:
        raise DomainError("pad_eps must be positive so that T' is strictly positive")
    Tp = T + pad_eps
    alpha, lo, hi, it = _power(Tp, tol, max_iter)
    left, _, _, it2 = _power(Tp.T, tol, max_iter)
    rho = float(hi)
    excess = T @ alpha - rho * alpha
    violation = float(max(excess.max(), 0.0))
    return PerronData(rho, alpha / alpha.sum(), 1.0 - rho, left / left.sum(), max(it, it2),
                      violation == 0.0, violation, pad_eps)


def rho_stderr(tm: TransitionMatrix, pd: PerronData) -> float:
    """Delta-method error of rho from the entrywise standard errors."""
    u, v = pd.alpha, pd.left
    grad = np.outer(v, u) / float(v @ u)
    return float(math.sqrt(np.sum((grad * tm.stderr) ** 2)))


# -- verdict ---------------------------------------------------------------------

@dataclass
class SubcriticalityReport:
    P: ProbDistMatrix
    converged: bool
    pairs: list[ChangePair]
    rare: list[ChangePair]
    matrix: TransitionMatrix
    perron: PerronData
    stderr: float
    verdict: str
    rho_prime: float | None = None   # same test at phi^(t0-1)(Q0)

    @property
    def rho(self) -> float:
        return self.perron.rho

    def summary_row(self) -> dict:
        return {
            "rho": repr(self.rho),
            "stderr": repr(self.stderr),
            "gamma": repr(self.perron.gamma),
            "certificate": int(self.perron.certificate),
            "verdict": self.verdict,
            "pairs": " ".join(f"{p.old}>{p.new}" for p in self.pairs),
            "rho_prime": "" if self.rho_prime is None else repr(self.rho_prime),
        }


def classify(rho: float, se: float) -> str:
    if rho + 2 * se < 1:
        return SUBCRITICAL
    if rho - 2 * se > 1:
        return SUPERCRITICAL
    return INCONCLUSIVE


def subcriticality_verdict(model: DegreeModel, rule: UpdateRule, Q0: ProbDistMatrix, config: dict | None = None,
                           rng=None) -> SubcriticalityReport:
    """Fixed point, potential changes, transition matrix, Perron data, verdict.

    ``config`` keys: tol, max_iters, t_max, history_samples, samples, pad_eps,
    t0 (when set, the matrix is also estimated at phi^(t0-1)(Q0)).
    """
    cfg = {"tol": 1e-10, "max_iters": 10_000, "t_max": 20, "history_samples": 20_000,
           "samples": 100_000, "pad_eps": 1e-6, "t0": None}
    cfg.update(config or {})
    rng = np.random.default_rng(rng)
    lim = iterate_to_limit(model, rule, Q0, tol=cfg["tol"], max_iters=cfg["max_iters"])
    P = lim.P
    pc = potential_changes(model, rule, P, cfg["t_max"], cfg["history_samples"], rng)
    pairs = pc.genuine()
    tm = estimate_transition_matrix(model, rule, P, pairs, cfg["samples"], rng)
    pd = perron(tm.T, cfg["pad_eps"])
    se = rho_stderr(tm, pd)
    rho_prime = None
    if cfg["t0"]:
        Q = Q0
        for _ in range(int(cfg["t0"]) - 1):
            Q = phi_step_exact(model, rule, Q)
        tm2 = estimate_transition_matrix(model, rule, Q, pairs, cfg["samples"], rng)
        rho_prime = perron(tm2.T, cfg["pad_eps"]).rho
    return SubcriticalityReport(P, lim.converged, pairs, pc.rare(), tm, pd, se,
                                classify(pd.rho, se), rho_prime)
