"""Ready-made WP instances: k-core, unit clause propagation, pure literal.

The SAT instances live on the four-type factor graph built by
``graph_model.formula_graph``: type 0 variables, 1 clauses, 2 positive and
3 negative occurrences. Each occurrence vertex has one variable and one
clause neighbour, so a literal's polarity is read off the occurrence type.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .alphabet import (ConstantRule, KCoreRule, MessageAlphabet, UpdateRule, binary_alphabet,
                       register_rule)
from .degree_model import (SIZE_BIASED, DegreeLaw, DegreeModel, Point, Poisson, ProductLaw, binomial_split,
                           independent_poisson, law_from_spec, point_mass)
from .dist_fixed_point import ProbDistMatrix
from .errors import DomainError
from .graph_model import TypedGraph, build_dsat_factor_graph, sample_binomial_multitype

__all__ = [
    "InstanceBundle",
    "kcore_instance",
    "constant_instance",
    "unit_clause_instance",
    "pure_literal_instance",
    "sat_model",
    "UnitClauseRule",
    "PureLiteralRule",
    "ucp_values",
    "pure_literal_state",
    "instance_from_config",
    "kcore_core_fraction",
    "kcore_scalar_threshold",
    "sample_graph",
    "INSTANCES",
]

VAR, CLAUSE, POS, NEG = 0, 1, 2, 3
VAR_SIDE = ((VAR, POS), (VAR, NEG), (POS, CLAUSE), (NEG, CLAUSE))
CLAUSE_SIDE = ((CLAUSE, POS), (CLAUSE, NEG), (POS, VAR), (NEG, VAR))


@dataclass(frozen=True)
class InstanceBundle:
    name: str
    alphabet: MessageAlphabet
    rule: UpdateRule
    model: DegreeModel
    Q0: ProbDistMatrix
    params: dict = field(default_factory=dict)
    doc: str = ""

    def __post_init__(self):
        for (i, j) in sorted(self.model.admissible):
            if len(self.alphabet.typed(i, j)) == 0:
                raise DomainError(f"alphabet has no symbol for admissible pair {(i + 1, j + 1)}")
            if not self.Q0.present[i, j]:
                raise DomainError(f"Q0 misses admissible pair {(i + 1, j + 1)}")

    def with_Q0(self, Q0: ProbDistMatrix) -> "InstanceBundle":
        return InstanceBundle(self.name, self.alphabet, self.rule, self.model, Q0, self.params, self.doc)

    def metadata(self) -> dict:
        return {"name": self.name, "params": dict(sorted(self.params.items())),
                "rule": self.rule.describe(), "model": self.model.to_dict()}


def _as_model(degree_family, mode: str) -> DegreeModel:
    if isinstance(degree_family, DegreeModel):
        return degree_family
    if isinstance(degree_family, (int, float)):
        return DegreeModel([independent_poisson([float(degree_family)])], mode)
    if isinstance(degree_family, DegreeLaw):
        return DegreeModel([degree_family], mode)
    if isinstance(degree_family, dict):
        return DegreeModel.from_dict({"mode": mode, **degree_family})
    if isinstance(degree_family, (list, tuple)):
        laws = [law if isinstance(law, DegreeLaw) else law_from_spec(law, len(degree_family))
                for law in degree_family]
        return DegreeModel(laws, mode)
    raise DomainError(f"cannot build a degree model from {degree_family!r}")


def kcore_instance(k_core: int = 3, degree_family=3.5, mode: str = SIZE_BIASED) -> InstanceBundle:
    """phi = 1 iff at least k_core - 1 other incoming 1s; Q0 = all 1."""
    if k_core < 2:
        raise DomainError("k_core must be at least 2")
    model = _as_model(degree_family, mode)
    A = binary_alphabet(model.k, model.admissible, name="kcore")
    rule = KCoreRule(A, k_core)
    Q0 = ProbDistMatrix.point_mass(A, "1", sorted(model.admissible))
    return InstanceBundle("kcore", A, rule, model, Q0, {"k_core": k_core},
                          "message 1 on (v,w) iff v gets >= k_core-1 ones from its other neighbours")


def constant_instance(value: str = "0", degree_family=3.5, mode: str = SIZE_BIASED) -> InstanceBundle:
    model = _as_model(degree_family, mode)
    A = binary_alphabet(model.k, model.admissible, name="constant")
    rule = ConstantRule(A, value)
    Q0 = ProbDistMatrix.point_mass(A, "1", sorted(model.admissible))
    return InstanceBundle("constant", A, rule, model, Q0, {"value": value}, "every message is the constant")


def sat_model(d: int, density: float, mode: str = SIZE_BIASED) -> DegreeModel:
    """Degree laws of a random d-CNF with ``density`` clauses per variable.

    Variables see Po(d * density / 2) occurrences of each sign, clauses see d
    occurrences with fair signs, occurrences see one variable and one clause.
    """
    if d < 1 or density < 0:
        raise DomainError("need d >= 1 and density >= 0")
    lam = d * density / 2
    laws = [independent_poisson([0, 0, lam, lam]),
            binomial_split(4, d, 0.5, POS, NEG),
            point_mass([1, 1, 0, 0]),
            point_mass([1, 1, 0, 0])]
    return DegreeModel(laws, mode)


def _sided_alphabet(name: str, var_labels, clause_labels) -> MessageAlphabet:
    typing, labels = [], []
    for pair in sorted(VAR_SIDE + CLAUSE_SIDE):
        for lab in (var_labels if pair in VAR_SIDE else clause_labels):
            typing.append(pair)
            labels.append(lab)
    return MessageAlphabet(4, typing, labels, name=name)


class _LabelRule(UpdateRule):
    """Shared plumbing: label counts per (label, source type) and an output table."""

    def __init__(self, alphabet, **params):
        super().__init__(alphabet, **params)
        if alphabet.k != 4:
            raise DomainError("SAT rules need the four-type factor-graph alphabet")
        self._out = {}
        self._masks = {}
        for s, ((a, b), lab) in enumerate(zip(alphabet.typing, alphabet.labels)):
            self._out[(a, b, lab)] = s

    def _count(self, counts, label, source=None):
        mask = self._masks.get((label, source))
        if mask is None:
            A = self.alphabet
            mask = self._masks[(label, source)] = np.array(
                [lab == label and (source is None or a == source) for (a, _), lab in zip(A.typing, A.labels)])
        return np.asarray(counts)[:, mask].sum(axis=1)

    def _emit(self, src, tgt, labels):
        src = np.broadcast_to(src, labels.shape)
        tgt = np.broadcast_to(tgt, labels.shape)
        out = np.empty(len(labels), dtype=np.int64)
        for key in set(zip(src.tolist(), tgt.tolist(), labels.tolist())):
            try:
                sym = self._out[key]
            except KeyError:
                raise DomainError(f"no symbol {key[2]!r} for edge type {(key[0] + 1, key[1] + 1)}") from None
            out[(src == key[0]) & (tgt == key[1]) & (labels == key[2])] = sym
        return out

    def evaluate(self, incoming, edge_type):
        c = np.asarray(incoming.counts)[None, :]
        return int(self.evaluate_counts(c, np.array([edge_type[0]]), np.array([edge_type[1]]))[0])


@register_rule("unit_clause")
class UnitClauseRule(_LabelRule):
    """Unit clause propagation.

    variable -> occurrence: "true" if some other positive occurrence relays a
      unit demand, else "false" if some negative one does, else "free"
      (a conflict resolves to "true").
    occurrence -> clause: the literal's value; a negative occurrence swaps
      "true" and "false".
    clause -> occurrence: "sat" if another literal is true, "unit" if every
      other literal is false (so a one-literal clause is unit), else "pending".
    occurrence -> variable: relays the clause's message.
    """

    def evaluate_counts(self, counts, src, tgt):
        counts = np.asarray(counts)
        m = counts.shape[0]
        src = np.broadcast_to(np.asarray(src), (m,))
        tgt = np.broadcast_to(np.asarray(tgt), (m,))
        labels = np.full(m, "pending", dtype=object)
        # variable -> occurrence
        u_pos, u_neg = self._count(counts, "unit", POS), self._count(counts, "unit", NEG)
        var_lab = np.where(u_pos > 0, "true", np.where(u_neg > 0, "false", "free"))
        # occurrence -> clause
        v_true, v_false = self._count(counts, "true", VAR), self._count(counts, "false", VAR)
        pos_lit = np.where(v_true > 0, "true", np.where(v_false > 0, "false", "free"))
        neg_lit = np.where(v_false > 0, "true", np.where(v_true > 0, "false", "free"))
        # clause -> occurrence
        l_true = self._count(counts, "true") - v_true
        l_free = self._count(counts, "free") - self._count(counts, "free", VAR)
        cl_lab = np.where(l_true > 0, "sat", np.where(l_free > 0, "pending", "unit"))
        # occurrence -> variable
        c_sat, c_unit = self._count(counts, "sat", CLAUSE), self._count(counts, "unit", CLAUSE)
        relay = np.where(c_sat > 0, "sat", np.where(c_unit > 0, "unit", "pending"))
        labels = np.where(src == VAR, var_lab, labels)
        labels = np.where((src == POS) & (tgt == CLAUSE), pos_lit, labels)
        labels = np.where((src == NEG) & (tgt == CLAUSE), neg_lit, labels)
        labels = np.where(src == CLAUSE, cl_lab, labels)
        labels = np.where((src >= POS) & (tgt == VAR), relay, labels)
        return self._emit(src, tgt, labels.astype(str))


@register_rule("pure_literal")
class PureLiteralRule(_LabelRule):
    """Pure literal elimination.

    variable -> occurrence w: "pure" iff every other occurrence of the
      opposite sign reports its clause "sat".
    occurrence -> clause: relays the variable's message.
    clause -> occurrence: "sat" iff another occurrence in the clause is "pure".
    occurrence -> variable: relays the clause's message.
    """

    def evaluate_counts(self, counts, src, tgt):
        counts = np.asarray(counts)
        m = counts.shape[0]
        src = np.broadcast_to(np.asarray(src), (m,))
        tgt = np.broadcast_to(np.asarray(tgt), (m,))
        alive_pos, alive_neg = self._count(counts, "alive", POS), self._count(counts, "alive", NEG)
        opposite_alive = np.where(tgt == POS, alive_neg, alive_pos)
        var_lab = np.where(opposite_alive == 0, "pure", "none")
        relay_var = np.where(self._count(counts, "pure", VAR) > 0, "pure", "none")
        others_pure = self._count(counts, "pure") - self._count(counts, "pure", VAR)
        cl_lab = np.where(others_pure > 0, "sat", "alive")
        relay_cl = np.where(self._count(counts, "sat", CLAUSE) > 0, "sat", "alive")
        labels = np.full(m, "alive", dtype=object)
        labels = np.where(src == VAR, var_lab, labels)
        labels = np.where((src >= POS) & (tgt == CLAUSE), relay_var, labels)
        labels = np.where(src == CLAUSE, cl_lab, labels)
        labels = np.where((src >= POS) & (tgt == VAR), relay_cl, labels)
        return self._emit(src, tgt, labels.astype(str))


def _sided_Q0(A: MessageAlphabet, var_label: str, clause_label: str) -> ProbDistMatrix:
    entries = {}
    for pair in VAR_SIDE + CLAUSE_SIDE:
        lab = var_label if pair in VAR_SIDE else clause_label
        entries[pair] = {A.symbol(pair[0], pair[1], lab): 1.0}
    return ProbDistMatrix.from_entries(A, entries)


def unit_clause_instance(d: int = 3, density: float = 1.0, mode: str = SIZE_BIASED) -> InstanceBundle:
    if d < 2:
        raise DomainError("clause size d must be at least 2")
    A = _sided_alphabet("unit_clause", ("free", "true", "false"), ("sat", "pending", "unit"))
    rule = UnitClauseRule(A)
    return InstanceBundle("unit_clause", A, rule, sat_model(d, density, mode),
                          _sided_Q0(A, "free", "pending"), {"d": d, "density": density},
                          UnitClauseRule.__doc__ or "")


def pure_literal_instance(d: int = 3, density: float = 1.0, mode: str = SIZE_BIASED) -> InstanceBundle:
    if d < 2:
        raise DomainError("clause size d must be at least 2")
    A = _sided_alphabet("pure_literal", ("none", "pure"), ("alive", "sat"))
    rule = PureLiteralRule(A)
    return InstanceBundle("pure_literal", A, rule, sat_model(d, density, mode),
                          _sided_Q0(A, "none", "alive"), {"d": d, "density": density},
                          PureLiteralRule.__doc__ or "")


def _incoming_labels(mg, label: str, source: int | None = None) -> np.ndarray:
    g = mg.graph
    A = mg.alphabet
    mask = np.array([lab == label and (source is None or a == source)
                     for (a, _), lab in zip(A.typing, A.labels)])
    return np.bincount(g.indices, weights=mask[mg.messages], minlength=g.n).astype(np.int64)


def ucp_values(mg, n_vars: int) -> np.ndarray:
    """Per variable: 1 forced true, -1 forced false, 0 free (from all incoming demands)."""
    up, un = _incoming_labels(mg, "unit", POS), _incoming_labels(mg, "unit", NEG)
    val = np.where(up > 0, 1, np.where(un > 0, -1, 0))
    return val[:n_vars]


def pure_literal_state(mg, n_vars: int, n_clauses: int) -> tuple[np.ndarray, np.ndarray]:
    """(purifiable variables, satisfied clauses) read off the current messages.

    A variable is purifiable when all its occurrences of one sign sit in
    satisfied clauses; a clause is satisfied when some occurrence is pure.
    """
    ap, an = _incoming_labels(mg, "alive", POS), _incoming_labels(mg, "alive", NEG)
    pure_var = np.flatnonzero((ap[:n_vars] == 0) | (an[:n_vars] == 0))
    sat = _incoming_labels(mg, "pure")[n_vars:n_vars + n_clauses] > 0
    return pure_var, np.flatnonzero(sat)


def kcore_core_fraction(bundle: InstanceBundle, P: ProbDistMatrix) -> np.ndarray:
    """Per type: Pr(at least k_core of the Z_i incoming messages are 1) under P."""
    k_core = int(bundle.params["k_core"])
    model = bundle.model
    out = np.zeros(model.k)
    for i, law in enumerate(model.laws):
        x = np.array([P.prob_of_label(j, i, "1") if P.present[j, i] else 0.0 for j in range(model.k)])
        if isinstance(law, ProductLaw) and all(isinstance(c, (Poisson, Point)) and
                                               (isinstance(c, Poisson) or c.value == 0)
                                               for c in law.coords):
            rate = sum(c.rate * x[j] for j, c in enumerate(law.coords) if isinstance(c, Poisson))
            out[i] = stats.poisson.sf(k_core - 1, rate)
            continue
        vecs, masses, _ = law.support()
        tot = 0.0
        for v, m in zip(vecs, masses):
            # convolve the per-type binomials of ones
            pmf = np.array([1.0])
            for j in range(model.k):
                if v[j]:
                    pmf = np.convolve(pmf, stats.binom.pmf(np.arange(v[j] + 1), v[j], x[j]))
            tot += m * pmf[k_core:].sum()
        out[i] = tot
    return out


def kcore_scalar_threshold(k_core: int) -> float:
    """Poisson k-core threshold: min over mu of mu / Pr(Po(mu) >= k_core - 1)."""
    f = lambda mu: mu / stats.poisson.sf(k_core - 2, mu)  # noqa: E731
    res = optimize.minimize_scalar(f, bounds=(1e-6, 10.0 * k_core + 10), method="bounded",
                                   options={"xatol": 1e-12})
    return float(res.fun)


def sample_graph(bundle: InstanceBundle, n: int, rng) -> TypedGraph:
    """A random graph matching the bundle's degree model.

    Single-type Poisson models give G(n, c/n); the SAT bundles give a random
    d-CNF factor graph with round(density * n) clauses on n variables.
    """
    if bundle.name in ("unit_clause", "pure_literal"):
        d, density = int(bundle.params["d"]), float(bundle.params["density"])
        return build_dsat_factor_graph(n, int(round(density * n)), d, rng)
    model = bundle.model
    law = model.laws[0]
    if model.k == 1 and isinstance(law, ProductLaw) and isinstance(law.coords[0], (Poisson, Point)):
        c = law.coords[0]
        rate = c.rate if isinstance(c, Poisson) else 0.0
        if isinstance(c, Point) and c.value:
            raise DomainError("fixed-degree models are not sampled by this helper")
        return sample_binomial_multitype([n], [[rate]], rng)
    raise DomainError(f"no graph sampler for instance {bundle.name!r} with this degree model")


INSTANCES = {
    "kcore": kcore_instance,
    "constant": constant_instance,
    "unit_clause": unit_clause_instance,
    "pure_literal": pure_literal_instance,
}


def instance_from_config(name: str, params: dict | None = None) -> InstanceBundle:
    try:
        factory = INSTANCES[name]
    except KeyError:
        raise DomainError(f"unknown instance {name!r}; known: {sorted(INSTANCES)}") from None
    try:
        return factory(**(params or {}))
    except TypeError as exc:
        raise DomainError(f"bad parameters for instance {name!r}: {exc}") from None
