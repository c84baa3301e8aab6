"""Typed message alphabets, multisets and update rules.

Every symbol carries the (source type, target type) of the directed edge it
may travel along. Types are 0-based internally and written 1-based in
serialized documents.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError

__all__ = [
    "MessageAlphabet",
    "MessageMultiset",
    "UpdateRule",
    "KCoreRule",
    "ConstantRule",
    "ParityRule",
    "binary_alphabet",
    "register_rule",
    "make_rule",
    "rule_names",
    "source_target",
    "swapped",
    "is_consistent",
    "is_compatible",
    "history_type",
    "apply_rule",
    "dumps",
    "loads",
]


class MessageAlphabet:
    """Finite symbol set 0..S-1 with a typing table symbol -> (source, target)."""

    def __init__(self, k: int, typing: Sequence[tuple[int, int]],
                 labels: Sequence[str] | None = None, name: str = "alphabet"):
        if k < 1:
            raise DomainError("k must be positive")
        typing = [(int(a), int(b)) for a, b in typing]
        for a, b in typing:
            if not (0 <= a < k and 0 <= b < k):
                raise DomainError(f"symbol typing {(a, b)} outside [0, {k})")
        if labels is None:
            labels = [str(s) for s in range(len(typing))]
        if len(labels) != len(typing):
            raise DomainError("labels and typing differ in length")
        self.k = k
        self.name = name
        self.labels = tuple(str(x) for x in labels)
        self.typing = tuple(typing)
        self.src = np.array([a for a, _ in typing], dtype=np.int64)
        self.tgt = np.array([b for _, b in typing], dtype=np.int64)
        self._by_type: dict[tuple[int, int], np.ndarray] = {}
        for s, t in enumerate(typing):
            self._by_type.setdefault(t, [])
            self._by_type[t].append(s)
        self._by_type = {t: np.array(v, dtype=np.int64) for t, v in self._by_type.items()}
        self._label_index = {(t, lab): s for s, (t, lab) in enumerate(zip(typing, self.labels))}

    def __len__(self) -> int:
        return len(self.typing)

    def __eq__(self, other) -> bool:
        return (isinstance(other, MessageAlphabet) and self.k == other.k
                and self.typing == other.typing and self.labels == other.labels
                and self.name == other.name)

    def __hash__(self) -> int:
        return hash((self.k, self.typing, self.labels, self.name))

    def __repr__(self) -> str:
        return f"MessageAlphabet({self.name!r}, k={self.k}, size={len(self)})"

    @property
    def size(self) -> int:
        return len(self.typing)

    def check(self, symbol: int) -> int:
        symbol = int(symbol)
        if not 0 <= symbol < len(self.typing):
            raise DomainError(f"unknown symbol {symbol}")
        return symbol

    def typed(self, i: int, j: int) -> np.ndarray:
        """Symbols that may travel from a type-i vertex to a type-j vertex."""
        return self._by_type.get((i, j), np.empty(0, dtype=np.int64))

    def symbol(self, i: int, j: int, label: str) -> int:
        try:
            return self._label_index[((i, j), str(label))]
        except KeyError:
            raise DomainError(f"no symbol labelled {label!r} with type {(i, j)}") from None

    def edge_types(self) -> list[tuple[int, int]]:
        return sorted(self._by_type)

    def format_history(self, history: Iterable[int]) -> str:
        return ".".join(str(int(s)) for s in history)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "k": self.k,
            "symbols": [
                {"id": s, "label": lab, "source": a + 1, "target": b + 1}
                for s, ((a, b), lab) in enumerate(zip(self.typing, self.labels))
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MessageAlphabet":
        rows = sorted(doc["symbols"], key=lambda r: r["id"])
        if [r["id"] for r in rows] != list(range(len(rows))):
            raise DomainError("symbol ids must be contiguous from 0")
        return cls(int(doc["k"]), [(r["source"] - 1, r["target"] - 1) for r in rows],
                   [r["label"] for r in rows], name=doc.get("name", "alphabet"))


def binary_alphabet(k: int, pairs: Iterable[tuple[int, int]], name: str = "binary") -> MessageAlphabet:
    """Symbols {0, 1} for every listed edge type, in sorted pair order."""
    typing, labels = [], []
    for pair in sorted(set(pairs)):
        for bit in ("0", "1"):
            typing.append(pair)
            labels.append(bit)
    return MessageAlphabet(k, typing, labels, name=name)


# -- typing helpers -----------------------------------------------------------

def source_target(alphabet: MessageAlphabet, symbol: int) -> tuple[int, int]:
    return alphabet.typing[alphabet.check(symbol)]


def swapped(alphabet: MessageAlphabet, symbol: int) -> tuple[int, int]:
    a, b = source_target(alphabet, symbol)
    return b, a


def history_type(alphabet: MessageAlphabet, history: Sequence[int]) -> tuple[int, int]:
    if not is_consistent(alphabet, history):
        raise DomainError(f"inconsistent history {tuple(history)}")
    return alphabet.typing[int(history[0])]


def is_consistent(alphabet: MessageAlphabet, history: Sequence[int]) -> bool:
    if len(history) == 0:
        raise DomainError("empty history")
    first = source_target(alphabet, history[0])
    return all(source_target(alphabet, s) == first for s in history[1:])


def is_compatible(alphabet: MessageAlphabet, h1: Sequence[int], h2: Sequence[int]) -> bool:
    a, b = history_type(alphabet, h1)
    return history_type(alphabet, h2) == (b, a)


# -- multisets ----------------------------------------------------------------

@dataclass(frozen=True)
class MessageMultiset:
    """Count vector over the alphabet; equal multisets are equal tuples."""

    counts: tuple[int, ...]

    @classmethod
    def empty(cls, alphabet: MessageAlphabet) -> "MessageMultiset":
        return cls((0,) * len(alphabet))

    @classmethod
    def from_symbols(cls, alphabet: MessageAlphabet, symbols: Iterable[int]) -> "MessageMultiset":
        counts = [0] * len(alphabet)
        for s in symbols:
            counts[alphabet.check(s)] += 1
        return cls(tuple(counts))

    def add(self, symbol: int, times: int = 1) -> "MessageMultiset":
        c = list(self.counts)
        c[symbol] += times
        if c[symbol] < 0:
            raise DomainError("negative multiplicity")
        return MessageMultiset(tuple(c))

    def symbols(self) -> list[int]:
        return [s for s, c in enumerate(self.counts) for _ in range(c)]

    def __len__(self) -> int:
        return sum(self.counts)

    def target_types(self, alphabet: MessageAlphabet) -> set[int]:
        return {int(alphabet.tgt[s]) for s, c in enumerate(self.counts) if c}


# -- update rules -------------------------------------------------------------

class UpdateRule:
    """Deterministic map (incoming multiset, outgoing edge type) -> symbol.

    Subclasses implement ``evaluate``; ``evaluate_counts`` is the batched form
    used by the engines and defaults to evaluating each distinct row once.
    """

    name = "rule"

    def __init__(self, alphabet: MessageAlphabet, **params):
        self.alphabet = alphabet
        self.params = dict(params)

    def evaluate(self, incoming: MessageMultiset, edge_type: tuple[int, int]) -> int:
        raise NotImplementedError

    def evaluate_counts(self, counts: np.ndarray, src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
        counts = np.asarray(counts)
        m = counts.shape[0]
        if m == 0:
            return np.empty(0, dtype=np.int64)
        src = np.broadcast_to(src, (m,))
        tgt = np.broadcast_to(tgt, (m,))
        keys = np.column_stack([counts, src, tgt]).astype(np.int64)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        out = np.empty(len(uniq), dtype=np.int64)
        for r, row in enumerate(uniq):
            ms = MessageMultiset(tuple(int(x) for x in row[:-2]))
            out[r] = self.evaluate(ms, (int(row[-2]), int(row[-1])))
        return out[inverse.reshape(-1)]

    def describe(self) -> dict:
        return {"name": self.name, "params": dict(sorted(self.params.items()))}

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in sorted(self.params.items()))
        return f"{type(self).__name__}({args})"


_RULES: dict[str, Callable[..., UpdateRule]] = {}


def register_rule(name: str):
    def deco(cls):
        cls.name = name
        _RULES[name] = cls
        return cls
    return deco


def make_rule(name: str, alphabet: MessageAlphabet, **params) -> UpdateRule:
    try:
        factory = _RULES[name]
    except KeyError:
        raise DomainError(f"unknown rule {name!r}; known: {sorted(_RULES)}") from None
    return factory(alphabet, **params)


def rule_names() -> list[str]:
    return sorted(_RULES)


def _bit_tables(alphabet: MessageAlphabet):
    k = alphabet.k
    zero = np.full((k, k), -1, dtype=np.int64)
    one = np.full((k, k), -1, dtype=np.int64)
    is_one = np.zeros(len(alphabet), dtype=bool)
    for s, ((a, b), lab) in enumerate(zip(alphabet.typing, alphabet.labels)):
        if lab == "0":
            zero[a, b] = s
        elif lab == "1":
            one[a, b] = s
            is_one[s] = True
        else:
            raise DomainError(f"binary rule needs labels 0/1, got {lab!r}")
    return zero, one, is_one


def _pick(table: np.ndarray, src, tgt) -> np.ndarray:
    out = table[src, tgt]
    if np.any(out < 0):
        bad = np.flatnonzero(np.atleast_1d(out) < 0)[0]
        a, b = np.atleast_1d(src)[bad], np.atleast_1d(tgt)[bad]
        raise DomainError(f"alphabet has no symbol for edge type {(int(a), int(b))}")
    return out


@register_rule("kcore")
class KCoreRule(UpdateRule):
    """Send 1 iff at least ``k_core - 1`` of the other incoming messages are 1."""

    def __init__(self, alphabet: MessageAlphabet, k_core: int = 2):
        if k_core < 1:
            raise DomainError("k_core must be >= 1")
        super().__init__(alphabet, k_core=int(k_core))
        self.k_core = int(k_core)
        self._zero, self._one, self._is_one = _bit_tables(alphabet)

    def evaluate(self, incoming, edge_type):
        ones = sum(c for s, c in enumerate(incoming.counts) if self._is_one[s])
        table = self._one if ones >= self.k_core - 1 else self._zero
        return int(_pick(table, edge_type[0], edge_type[1]))

    def evaluate_counts(self, counts, src, tgt):
        counts = np.asarray(counts)
        ones = counts[:, self._is_one].sum(axis=1)
        return np.where(ones >= self.k_core - 1, _pick(self._one, src, tgt), _pick(self._zero, src, tgt))


@register_rule("parity")
class ParityRule(UpdateRule):
    """Send the parity of the number of incoming 1s; any single change flips it."""

    def __init__(self, alphabet: MessageAlphabet):
        super().__init__(alphabet)
        self._zero, self._one, self._is_one = _bit_tables(alphabet)

    def evaluate(self, incoming, edge_type):
        ones = sum(c for s, c in enumerate(incoming.counts) if self._is_one[s])
        return int(_pick(self._one if ones % 2 else self._zero, edge_type[0], edge_type[1]))

    def evaluate_counts(self, counts, src, tgt):
        ones = np.asarray(counts)[:, self._is_one].sum(axis=1)
        return np.where(ones % 2 == 1, _pick(self._one, src, tgt), _pick(self._zero, src, tgt))


@register_rule("constant")
class ConstantRule(UpdateRule):
    """Always send the symbol labelled ``value`` on every edge type."""

    def __init__(self, alphabet: MessageAlphabet, value: str = "0"):
        super().__init__(alphabet, value=str(value))
        k = alphabet.k
        self._table = np.full((k, k), -1, dtype=np.int64)
        for (a, b) in alphabet.edge_types():
            self._table[a, b] = alphabet.symbol(a, b, str(value))

    def evaluate(self, incoming, edge_type):
        return int(_pick(self._table, edge_type[0], edge_type[1]))

    def evaluate_counts(self, counts, src, tgt):
        m = np.asarray(counts).shape[0]
        return np.broadcast_to(_pick(self._table, src, tgt), (m,)).astype(np.int64)


def apply_rule(rule: UpdateRule, incoming: MessageMultiset, edge_type: tuple[int, int]) -> int:
    """Evaluate ``rule`` with full typing checks on input and output."""
    alphabet = rule.alphabet
    if len(incoming.counts) != len(alphabet):
        raise DomainError("multiset built over a different alphabet")
    targets = incoming.target_types(alphabet)
    if targets and targets != {edge_type[0]}:
        raise DomainError(
            f"incoming messages target types {sorted(targets)} but the sender has type {edge_type[0]}")
    out = rule.evaluate(incoming, tuple(edge_type))
    if alphabet.typing[alphabet.check(out)] != tuple(edge_type):
        raise DomainError(f"rule {rule.name} produced symbol {out} typed "
                          f"{alphabet.typing[out]} for edge type {tuple(edge_type)}")
    return out


# -- serialization ------------------------------------------------------------

def dumps(alphabet: MessageAlphabet, rule: UpdateRule | None = None) -> str:
    doc = alphabet.to_dict()
    if rule is not None:
        doc["rule"] = rule.describe()
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def loads(text: str) -> tuple[MessageAlphabet, UpdateRule | None]:
    doc = json.loads(text)
    alphabet = MessageAlphabet.from_dict(doc)
    rule = None
    if "rule" in doc:
        rule = make_rule(doc["rule"]["name"], alphabet, **doc["rule"].get("params", {}))
    return alphabet, rule
