"""Type-degree laws, admissible pairs and offspring laws.

A law on N_0^k gives, for a vertex of one type, the numbers of neighbours of
each type. Two families cover everything the toolkit needs: products of
independent coordinate laws (Poisson, point masses) and finite tables.
"""
from __future__ import annotations

import itertools
import math
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import DomainError, NumericError

ENUM_THRESHOLD = 1e-12
VERBATIM = "verbatim"
SIZE_BIASED = "size_biased"
MODES = (VERBATIM, SIZE_BIASED)


# -- scalar (coordinate) laws -------------------------------------------------

class ScalarLaw:
    """Law on N_0 with pmf, survival function and an exact sampler."""

    def pmf(self, a): raise NotImplementedError
    def sf(self, x): raise NotImplementedError
    def sample(self, rng, size): raise NotImplementedError
    def mean(self) -> float: raise NotImplementedError

    def upper(self, threshold: float) -> int:
        """Smallest a with Pr(X > a) < threshold."""
        a = 0
        while self.sf(a) >= threshold:
            a += 1
            if a > 100_000:
                raise NumericError("support enumeration did not terminate")
        return a

    def pmf_array(self, amax: int) -> np.ndarray:
        return np.array([self.pmf(a) for a in range(amax + 1)], dtype=float)


class Point(ScalarLaw):
    def __init__(self, value: int):
        self.value = int(value)

    def pmf(self, a):
        return 1.0 if int(a) == self.value else 0.0

    def sf(self, x):
        return 1.0 if self.value > x else 0.0

    def sample(self, rng, size):
        return np.full(size, self.value, dtype=np.int64)

    def mean(self):
        return float(self.value)

    def __repr__(self):
        return f"Point({self.value})"


class Poisson(ScalarLaw):
    def __init__(self, rate: float):
        if rate < 0:
            raise DomainError("Poisson rate must be nonnegative")
        self.rate = float(rate)

    def pmf(self, a):
        return float(stats.poisson.pmf(a, self.rate)) if self.rate > 0 else float(a == 0)

    def pmf_array(self, amax):
        if self.rate == 0:
            out = np.zeros(amax + 1)
            out[0] = 1.0
            return out
        return stats.poisson.pmf(np.arange(amax + 1), self.rate)

    def sf(self, x):
        return float(stats.poisson.sf(x, self.rate)) if self.rate > 0 else float(x < 0)

    def sample(self, rng, size):
        return rng.poisson(self.rate, size=size).astype(np.int64)

    def mean(self):
        return self.rate

    def __repr__(self):
        return f"Poisson({self.rate})"


class ShiftedTruncatedPoisson(ScalarLaw):
    """X - 1 given X >= 1, X ~ Po(rate)."""

    def __init__(self, rate: float):
        if rate <= 0:
            raise DomainError("conditioning on a positive coordinate needs rate > 0")
        self.rate = float(rate)
        self._p0 = math.exp(-self.rate)
        self._z = -math.expm1(-self.rate)

    def pmf(self, a):
        return float(stats.poisson.pmf(np.asarray(a) + 1, self.rate) / self._z)

    def pmf_array(self, amax):
        return stats.poisson.pmf(np.arange(1, amax + 2), self.rate) / self._z

    def sf(self, x):
        return float(stats.poisson.sf(x + 1, self.rate) / self._z)

    def sample(self, rng, size):
        u = rng.random(size)
        x = stats.poisson.ppf(self._p0 + u * self._z, self.rate)
        # ppf can return 0 when u underflows against p0
        return np.maximum(x, 1).astype(np.int64) - 1

    def mean(self):
        return self.rate / self._z - 1.0

    def __repr__(self):
        return f"ShiftedTruncatedPoisson({self.rate})"


class Table1D(ScalarLaw):
    def __init__(self, values: Sequence[int], masses: Sequence[float]):
        agg: dict[int, float] = {}
        for v, m in zip(values, masses):
            agg[int(v)] = agg.get(int(v), 0.0) + float(m)
        self.values = np.array(sorted(agg), dtype=np.int64)
        self.masses = np.array([agg[v] for v in self.values], dtype=float)

    def pmf(self, a):
        hit = self.values == int(a)
        return float(self.masses[hit].sum())

    def sf(self, x):
        return float(self.masses[self.values > x].sum())

    def sample(self, rng, size):
        cdf = np.cumsum(self.masses)
        idx = np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right")
        return self.values[np.minimum(idx, len(self.values) - 1)]

    def mean(self):
        return float(self.values @ self.masses)

    def __repr__(self):
        return f"Table1D({dict(zip(self.values.tolist(), self.masses.tolist()))})"


# -- laws on N_0^k ------------------------------------------------------------

class DegreeLaw:
    """Probability law on N_0^k."""

    k: int
    spec: dict

    def pmf(self, vec: Sequence[int]) -> float: raise NotImplementedError
    def sample(self, rng, size: int) -> np.ndarray: raise NotImplementedError
    def marginal(self, j: int) -> ScalarLaw: raise NotImplementedError
    def total(self) -> ScalarLaw: raise NotImplementedError

    def support(self, threshold: float = ENUM_THRESHOLD, max_total: int | None = None):
        """(vectors, masses, residual) covering all but ``residual`` mass."""
        raise NotImplementedError

    def prob_positive(self, j: int) -> float:
        return self.marginal(j).sf(0)

    def mean_vector(self) -> np.ndarray:
        return np.array([self.marginal(j).mean() for j in range(self.k)])


class ProductLaw(DegreeLaw):
    """Independent coordinates."""

    def __init__(self, coords: Sequence[ScalarLaw], spec: dict | None = None):
        self.coords = list(coords)
        self.k = len(self.coords)
        self.spec = spec or {"family": "product", "coords": [repr(c) for c in self.coords]}

    def pmf(self, vec):
        return float(np.prod([c.pmf(a) for c, a in zip(self.coords, vec)]))

    def sample(self, rng, size):
        out = np.empty((size, self.k), dtype=np.int64)
        for j, c in enumerate(self.coords):
            out[:, j] = c.sample(rng, size)
        return out

    def marginal(self, j):
        return self.coords[j]

    def total(self):
        if all(isinstance(c, (Poisson, Point)) for c in self.coords):
            shift = sum(c.value for c in self.coords if isinstance(c, Point))
            rate = sum(c.rate for c in self.coords if isinstance(c, Poisson))
            if rate == 0:
                return Point(shift)
            return _Shifted(Poisson(rate), shift) if shift else Poisson(rate)
        return _Convolution(self.coords)

    def support(self, threshold=ENUM_THRESHOLD, max_total=None):
        per = threshold / max(self.k, 1)
        axes = []
        for c in self.coords:
            top = c.upper(per)
            if max_total is not None:
                top = min(top, max_total)
            axes.append(c.pmf_array(top))
        vecs, masses = [], []
        for combo in itertools.product(*[range(len(a)) for a in axes]):
            if max_total is not None and sum(combo) > max_total:
                continue
            m = 1.0
            for a, p in zip(combo, axes):
                m *= p[a]
            if m > 0:
                vecs.append(combo)
                masses.append(m)
        vecs = np.array(vecs, dtype=np.int64).reshape(-1, self.k)
        masses = np.array(masses)
        return vecs, masses, max(0.0, 1.0 - float(math.fsum(masses)))


class FiniteTable(DegreeLaw):
    """Finitely supported law given by an explicit table."""

    def __init__(self, vectors, masses, spec: dict | None = None, tol: float = 1e-12):
        vectors = np.asarray(vectors, dtype=np.int64)
        masses = np.asarray(masses, dtype=float)
        if vectors.ndim != 2 or len(vectors) != len(masses):
            raise DomainError("table needs a 2-d array of vectors and matching masses")
        if np.any(masses < 0) or np.any(vectors < 0):
            raise DomainError("negative mass or degree in table")
        if abs(math.fsum(masses) - 1.0) > tol:
            raise DomainError(f"table masses sum to {math.fsum(masses)!r}, not 1")
        keep = masses > 0
        vectors, masses = vectors[keep], masses[keep]
        order = np.lexsort(vectors.T[::-1])
        self.vectors = vectors[order]
        self.masses = masses[order]
        self.k = vectors.shape[1]
        self._cdf = np.cumsum(self.masses)
        self.spec = spec or {
            "family": "table",
            "table": [[v.tolist(), float(m)] for v, m in zip(self.vectors, self.masses)],
        }

    def pmf(self, vec):
        hit = np.all(self.vectors == np.asarray(vec, dtype=np.int64), axis=1)
        return float(self.masses[hit].sum())

    def sample(self, rng, size):
        idx = np.searchsorted(self._cdf, rng.random(size) * self._cdf[-1], side="right")
        return self.vectors[np.minimum(idx, len(self.masses) - 1)]

    def marginal(self, j):
        return Table1D(self.vectors[:, j], self.masses)

    def total(self):
        return Table1D(self.vectors.sum(axis=1), self.masses)

    def support(self, threshold=ENUM_THRESHOLD, max_total=None):
        keep = np.ones(len(self.masses), dtype=bool)
        if max_total is not None:
            keep = self.vectors.sum(axis=1) <= max_total
        return self.vectors[keep], self.masses[keep], float(self.masses[~keep].sum())


class _Shifted(ScalarLaw):
    def __init__(self, base: ScalarLaw, shift: int):
        self.base, self.shift = base, int(shift)

    def pmf(self, a):
        return self.base.pmf(a - self.shift) if a >= self.shift else 0.0

    def sf(self, x):
        return self.base.sf(x - self.shift)

    def sample(self, rng, size):
        return self.base.sample(rng, size) + self.shift

    def mean(self):
        return self.base.mean() + self.shift


class _Convolution(ScalarLaw):
    """Sum of independent coordinate laws, evaluated on a truncated grid."""

    def __init__(self, parts: Sequence[ScalarLaw]):
        self.parts = list(parts)
        top = sum(p.upper(1e-18) for p in self.parts) + 1
        pmf = np.array([1.0])
        for p in self.parts:
            pmf = np.convolve(pmf, p.pmf_array(top))[: top + 1]
        self._pmf = pmf

    def pmf(self, a):
        return float(self._pmf[a]) if 0 <= a < len(self._pmf) else 0.0

    def sf(self, x):
        x = int(math.floor(x))
        if x < 0:
            return 1.0
        return float(math.fsum(self._pmf[x + 1:]))

    def sample(self, rng, size):
        return sum(p.sample(rng, size) for p in self.parts)

    def mean(self):
        return sum(p.mean() for p in self.parts)


# -- named families -----------------------------------------------------------

def point_mass(vec: Sequence[int]) -> DegreeLaw:
    vec = [int(x) for x in vec]
    return ProductLaw([Point(x) for x in vec], spec={"family": "point", "vector": vec})


def independent_poisson(rates: Sequence[float]) -> DegreeLaw:
    rates = [float(r) for r in rates]
    return ProductLaw([Poisson(r) if r > 0 else Point(0) for r in rates],
                      spec={"family": "poisson", "rates": rates})


def multinomial(total: int, probs: Sequence[float]) -> DegreeLaw:
    probs = np.asarray(probs, dtype=float)
    k = len(probs)
    vecs, masses = [], []
    for combo in _compositions(int(total), k):
        m = float(stats.multinomial.pmf(combo, int(total), probs))
        if m > 0:
            vecs.append(combo)
            masses.append(m)
    masses = np.array(masses)
    return FiniteTable(vecs, masses / masses.sum(),
                       spec={"family": "multinomial", "total": int(total), "probs": probs.tolist()})


def binomial_split(k: int, d: int, p: float, first: int, second: int,
                   base: Sequence[int] | None = None) -> DegreeLaw:
    """X ~ Bin(d, p) neighbours of type ``first`` and d - X of type ``second``."""
    base = np.zeros(k, dtype=np.int64) if base is None else np.asarray(base, dtype=np.int64)
    vecs, masses = [], []
    for x in range(d + 1):
        v = base.copy()
        v[first] += x
        v[second] += d - x
        vecs.append(v)
        masses.append(float(stats.binom.pmf(x, d, p)))
    masses = np.array(masses)
    return FiniteTable(vecs, masses / masses.sum(),
                       spec={"family": "binomial_split", "k": k, "d": d, "p": p,
                             "first": first, "second": second, "base": base.tolist()})


def table(entries: Iterable[tuple[Sequence[int], float]]) -> DegreeLaw:
    entries = list(entries)
    return FiniteTable([e[0] for e in entries], [e[1] for e in entries])


def law_from_spec(spec: dict, k: int | None = None) -> DegreeLaw:
    family = spec.get("family")
    if family == "point":
        law = point_mass(spec["vector"])
    elif family == "poisson":
        law = independent_poisson(spec["rates"])
    elif family == "multinomial":
        law = multinomial(spec["total"], spec["probs"])
    elif family == "binomial_split":
        law = binomial_split(spec["k"], spec["d"], spec["p"], spec["first"], spec["second"], spec.get("base"))
    elif family == "table":
        law = table(spec["table"])
    else:
        raise DomainError(f"unknown degree family {family!r}")
    if k is not None and law.k != k:
        raise DomainError(f"law has dimension {law.k}, expected {k}")
    return law


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


# -- derived quantities -------------------------------------------------------

def marginal(law: DegreeLaw, j: int) -> ScalarLaw:
    return law.marginal(j)


def admissible_pairs(laws: Sequence[DegreeLaw]) -> set[tuple[int, int]]:
    """Pairs (i, j) with Pr(Z_ij >= 1) > 0."""
    return {(i, j) for i, law in enumerate(laws) for j in range(law.k) if law.prob_positive(j) > 0}


def asymmetric_pairs(laws: Sequence[DegreeLaw]) -> set[tuple[int, int]]:
    adm = admissible_pairs(laws)
    return {(i, j) for (i, j) in adm if (j, i) not in adm}


def offspring_law(law: DegreeLaw, j: int, mode: str = VERBATIM) -> DegreeLaw:
    """Children law of a vertex with this degree law whose parent has type j.

    ``verbatim``: Pr(a) = Pr(Z = a + e_j) / Pr(Z_j >= 1).
    ``size_biased``: Pr(a) = (a_j + 1) Pr(Z = a + e_j) / E[Z_j].
    """
    if mode not in MODES:
        raise DomainError(f"unknown offspring mode {mode!r}")
    if law.prob_positive(j) <= 0:
        raise DomainError(f"coordinate {j} is never positive; pair is not admissible")
    spec = {"family": "offspring", "base": law.spec, "parent_type": j, "mode": mode}
    if isinstance(law, ProductLaw):
        coords = list(law.coords)
        c = coords[j]
        if isinstance(c, Point):
            coords[j] = Point(c.value - 1)
        elif isinstance(c, Poisson):
            coords[j] = ShiftedTruncatedPoisson(c.rate) if mode == VERBATIM else Poisson(c.rate)
        else:
            return _offspring_from_table(law, j, mode, spec)
        return ProductLaw(coords, spec=spec)
    return _offspring_from_table(law, j, mode, spec)


def _offspring_from_table(law: DegreeLaw, j: int, mode: str, spec: dict) -> DegreeLaw:
    vecs, masses, residual = law.support()
    if residual > ENUM_THRESHOLD:
        raise NumericError("offspring law of an infinite non-Poisson family is not supported")
    hit = vecs[:, j] >= 1
    vecs, masses = vecs[hit].copy(), masses[hit].copy()
    if mode == SIZE_BIASED:
        masses = masses * vecs[:, j]
    vecs[:, j] -= 1
    return FiniteTable(vecs, masses / masses.sum(), spec=spec, tol=1e-9)


def moment(law: DegreeLaw, s: int, return_error: bool = False):
    """E[||X||_1^s] for s in {1, 2, 3}."""
    if s not in (1, 2, 3):
        raise DomainError("moment order must be 1, 2 or 3")
    tot = law.total()
    if isinstance(tot, Point):
        val, err = float(tot.value) ** s, 0.0
    elif isinstance(tot, Poisson):
        lam = tot.rate
        val = (lam, lam + lam ** 2, lam + 3 * lam ** 2 + lam ** 3)[s - 1]
        err = 0.0
    elif isinstance(tot, Table1D):
        val = float(math.fsum(tot.masses * tot.values.astype(float) ** s))
        err = 0.0
    else:
        val, err = _series_moment(tot, s)
    return (val, err) if return_error else val


def _series_moment(law: ScalarLaw, s: int, cap: int = 100_000):
    terms = []
    prev = None
    a = 0
    while True:
        t = (a ** s) * law.pmf(a)
        terms.append(t)
        if a > 10 and t < 1e-20 and prev is not None and t <= prev:
            ratio = t / prev if prev > 0 else 0.0
            if ratio < 1:
                err = t * ratio / (1 - ratio)
                return math.fsum(terms), err
        prev = t
        a += 1
        if a > cap:
            raise NumericError("moment series did not converge within the cap")


def tail_probability(law: DegreeLaw, x: float) -> float:
    """Pr(||Z||_1 > x)."""
    if x < 0:
        raise DomainError("x must be nonnegative")
    return law.total().sf(x)


def tail_exponent(law: DegreeLaw, x: float) -> float:
    """-ln Pr(||Z||_1 > x) / x; infinite when the tail vanishes."""
    p = tail_probability(law, x)
    return math.inf if p <= 0 else -math.log(p) / x


def degree_cap(law: DegreeLaw, threshold: float = 1e-9) -> int:
    """Smallest D with Pr(||X||_1 > D) < threshold."""
    return law.total().upper(threshold)


class DegreeModel:
    """The vector (Z_1..Z_k) with cached offspring laws."""

    def __init__(self, laws: Sequence[DegreeLaw], mode: str = VERBATIM):
        if mode not in MODES:
            raise DomainError(f"unknown offspring mode {mode!r}")
        ks = {law.k for law in laws}
        if ks != {len(laws)}:
            raise DomainError("every law must live on N_0^k with k = number of laws")
        self.laws = list(laws)
        self.k = len(laws)
        self.mode = mode
        self.admissible = admissible_pairs(self.laws)
        self._off: dict[tuple[int, int], DegreeLaw] = {}

    def offspring(self, parent: int, child: int) -> DegreeLaw:
        """Children law of a type-``child`` vertex whose parent has type ``parent``."""
        key = (parent, child)
        if key not in self._off:
            if (child, parent) not in self.admissible:
                raise DomainError(f"pair {(child, parent)} is not admissible")
            self._off[key] = offspring_law(self.laws[child], parent, self.mode)
        return self._off[key]

    def with_mode(self, mode: str) -> "DegreeModel":
        return DegreeModel(self.laws, mode)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "laws": [law.spec for law in self.laws]}

    @classmethod
    def from_dict(cls, doc: dict) -> "DegreeModel":
        k = len(doc["laws"])
        return cls([law_from_spec(s, k) for s in doc["laws"]], doc.get("mode", VERBATIM))

    def __repr__(self):
        return f"DegreeModel(k={self.k}, mode={self.mode!r})"
