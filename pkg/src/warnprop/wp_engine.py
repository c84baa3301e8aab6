"""Synchronous Warning Propagation on typed graphs.

Messages live on directed edges, indexed by CSR position of the graph: slot p
carries the message row[p] -> indices[p].
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .alphabet import UpdateRule
from .dist_fixed_point import ProbDistMatrix
from .errors import DomainError
from .graph_model import TypedGraph, read_graph, write_graph

__all__ = [
    "MessagedGraph",
    "ChangeTrace",
    "initialize",
    "wp_step",
    "run",
    "changes_since",
    "project",
    "extract_core",
    "incoming_counts",
    "dump_messaged_graph",
    "load_messaged_graph",
]


def _compact(msg: np.ndarray, size: int) -> np.ndarray:
    return msg.astype(np.uint8 if size <= 256 else np.int32)


@dataclass
class MessagedGraph:
    """Graph plus the history of every directed-edge message.

    ``history`` holds one array per stored round, oldest first. With
    ``keep_history`` off only the last two rounds survive; ``first_round`` is
    the round number of ``history[0]``.
    """

    graph: TypedGraph
    alphabet: object
    history: list[np.ndarray]
    round: int = 0
    keep_history: bool = True
    first_round: int = 0

    @property
    def messages(self) -> np.ndarray:
        return self.history[-1].astype(np.int64)

    def at(self, t: int) -> np.ndarray:
        idx = t - self.first_round
        if idx < 0 or idx >= len(self.history):
            raise DomainError(f"round {t} is not stored")
        return self.history[idx].astype(np.int64)

    def histories(self) -> np.ndarray:
        """(2|E|, stored rounds) matrix; requires the full history."""
        if self.first_round != 0:
            raise DomainError("full histories were not kept")
        if not self.history:
            return np.empty((0, 0), dtype=np.int64)
        return np.column_stack(self.history).astype(np.int64)

    def edge_types(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.graph
        return g.types[g.row], g.types[g.indices]

    def message(self, u: int, v: int, t: int | None = None) -> int:
        g = self.graph
        lo, hi = g.indptr[u], g.indptr[u + 1]
        pos = lo + np.searchsorted(g.indices[lo:hi], v)
        if pos >= hi or g.indices[pos] != v:
            raise DomainError(f"{u} and {v} are not adjacent")
        return int(self.messages[pos] if t is None else self.at(t)[pos])


@dataclass
class ChangeTrace:
    """Per-round change counts and, for each t0, the changes up to the final round."""

    changes: list[int] = field(default_factory=list)  # changes[r] = #{mu(start+r+1) != mu(start+r)}
    since: list[int] = field(default_factory=list)    # since[r] = #{mu(final) != mu(start+r)}
    converged: bool = False
    directed_edges: int = 0
    start: int = 0  # round at which the run began

    @property
    def final_round(self) -> int:
        return self.start + len(self.changes)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "changes", "changes_since"])
        for r, since in enumerate(self.since):
            w.writerow([self.start + r, self.changes[r - 1] if r else "", since])
        return buf.getvalue()


def initialize(graph: TypedGraph, Q0: ProbDistMatrix, rng, keep_history: bool = True) -> MessagedGraph:
    """Round-0 messages drawn independently from Q0 by edge type."""
    src, tgt = graph.types[graph.row], graph.types[graph.indices]
    msg = Q0.sample(src, tgt, rng)
    return MessagedGraph(graph, Q0.alphabet, [_compact(msg, len(Q0.alphabet))], 0, keep_history)


def incoming_counts(graph: TypedGraph, msg: np.ndarray, size: int) -> np.ndarray:
    """(n, |Sigma|) count of messages arriving at each vertex."""
    return np.bincount(graph.indices * size + msg, minlength=graph.n * size).reshape(graph.n, size)


def _next_messages(graph: TypedGraph, rule: UpdateRule, msg: np.ndarray) -> np.ndarray:
    S = len(rule.alphabet)
    if graph.num_directed == 0:
        return msg.copy()
    per_vertex = incoming_counts(graph, msg, S)
    counts = per_vertex[graph.row]
    # drop the message coming back along the same edge
    counts[np.arange(len(msg)), msg[graph.rev]] -= 1
    try:
        return rule.evaluate_counts(counts, graph.types[graph.row], graph.types[graph.indices])
    except DomainError as exc:
        raise DomainError(f"rule failed while updating directed edges: {exc}") from exc


def wp_step(mg: MessagedGraph, rule: UpdateRule) -> MessagedGraph:
    """One synchronous round, in place; returns ``mg``."""
    new = _next_messages(mg.graph, rule, mg.messages)
    mg.history.append(_compact(new, len(rule.alphabet)))
    mg.round += 1
    if not mg.keep_history and len(mg.history) > 2:
        drop = len(mg.history) - 2
        del mg.history[:drop]
        mg.first_round += drop
    return mg


def run(mg: MessagedGraph, rule: UpdateRule, max_rounds: int,
        stop_on_fixpoint: bool = True) -> tuple[MessagedGraph, ChangeTrace]:
    """Iterate ``wp_step`` until a round changes nothing or ``max_rounds`` is hit.

    Every round is snapshotted (one byte per directed edge for small
    alphabets) so that ``changes_since`` is available for every t0 even when
    the messaged graph keeps only its last two rounds.
    """
    if max_rounds < 1:
        raise DomainError("max_rounds must be at least 1")
    trace = ChangeTrace(directed_edges=mg.graph.num_directed, start=mg.round)
    snaps = [mg.history[-1].copy()]
    for _ in range(max_rounds):
        prev = mg.history[-1]
        wp_step(mg, rule)
        cur = mg.history[-1]
        trace.changes.append(int(np.count_nonzero(cur != prev)))
        snaps.append(cur.copy())
        if trace.changes[-1] == 0:
            trace.converged = True
            if stop_on_fixpoint:
                break
    final = snaps[-1]
    trace.since = [int(np.count_nonzero(s != final)) for s in snaps]
    return mg, trace


def changes_since(trace: ChangeTrace, t0: int) -> int:
    """Directed edges whose final message differs from their round-t0 message."""
    if not trace.start <= t0 <= trace.final_round:
        raise DomainError(f"t0={t0} outside [{trace.start}, {trace.final_round}]")
    return trace.since[t0 - trace.start]


def project(mg: MessagedGraph) -> MessagedGraph:
    """Keep only the current message of each history."""
    return MessagedGraph(mg.graph, mg.alphabet, [mg.history[-1].copy()], mg.round,
                         mg.keep_history, mg.round)


def extract_core(mg: MessagedGraph, rule: UpdateRule, k_core: int | None = None,
                 require_fixpoint: bool = True) -> np.ndarray:
    """Sorted vertex ids receiving at least ``k_core`` messages labelled 1."""
    k_core = int(k_core if k_core is not None else rule.params["k_core"])
    msg = mg.messages
    if require_fixpoint and not np.array_equal(_next_messages(mg.graph, rule, msg), msg):
        raise DomainError("messages are not at a WP fixed point")
    ones = np.array([lab == "1" for lab in mg.alphabet.labels])
    got = np.bincount(mg.graph.indices, weights=ones[msg], minlength=mg.graph.n)
    return np.flatnonzero(got >= k_core)


def dump_messaged_graph(mg: MessagedGraph) -> str:
    """Graph file with ``hist(u->v) hist(v->u)`` appended to each edge line."""
    g = mg.graph
    H = mg.histories() if mg.first_round == 0 else np.column_stack(mg.history).astype(np.int64)
    fmt = mg.alphabet.format_history
    pos = {}
    for p, (u, v) in enumerate(zip(g.row.tolist(), g.indices.tolist())):
        pos[(u, v)] = p
    return write_graph(g, edge_suffix=lambda u, v: f"{fmt(H[pos[(u, v)]])} {fmt(H[pos[(v, u)]])}")


def load_messaged_graph(text: str, alphabet) -> MessagedGraph:
    g, edges, extra = read_graph(text, with_extra=True)
    if not edges:
        return MessagedGraph(g, alphabet, [np.empty(0, dtype=np.uint8)])
    length = len(extra[0][0].split("."))
    H = np.zeros((g.num_directed, length), dtype=np.int64)
    n = max(g.n, 1)
    key = g.row * n + g.indices
    order = np.argsort(key)
    for (u, v), (a, b) in zip(edges, extra):
        for x, y, s in ((u, v, a), (v, u, b)):
            p = order[np.searchsorted(key[order], x * n + y)]
            H[p] = [int(z) for z in s.split(".")]
    hist = [_compact(H[:, t], len(alphabet)) for t in range(length)]
    return MessagedGraph(g, alphabet, hist, length - 1)
