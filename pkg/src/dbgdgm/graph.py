"""Multi-subject dynamic graph corpora: data model, directory I/O, temporal splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

FORMAT_VERSION = 1


class CorpusError(ValueError):
    """Raised when a corpus directory or in-memory corpus violates its invariants."""


def canonical(u: int, v: int) -> tuple[int, int]:
    if u == v:
        raise CorpusError(f"self-edge ({u}, {v})")
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class GraphSnapshot:
    subject: int
    time: int
    edges: frozenset[tuple[int, int]]

    @classmethod
    def from_pairs(cls, subject: int, time: int, pairs: Iterable[tuple[int, int]], V: int) -> "GraphSnapshot":
        edges = set()
        for u, v in pairs:
            u, v = int(u), int(v)
            if not (0 <= u < V and 0 <= v < V):
                raise CorpusError(f"node index out of range in ({u}, {v}) for V={V}")
            e = canonical(u, v)
            if e in edges:
                raise CorpusError(f"duplicate edge {e} in subject {subject}, time {time}")
            edges.add(e)
        return cls(subject, time, frozenset(edges))

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class DynamicGraphCorpus:
    S: int
    T: int
    V: int
    snapshots: tuple[tuple[GraphSnapshot, ...], ...]
    labels: tuple[str, ...] | None = None
    node_names: tuple[str, ...] | None = None
    partition: dict[int, str] | None = field(default=None, compare=True)

    def __post_init__(self):
        if self.S < 1 or self.T < 1 or self.V < 2:
            raise CorpusError(f"need S>=1, T>=1, V>=2; got S={self.S}, T={self.T}, V={self.V}")
        if len(self.snapshots) != self.S or any(len(row) != self.T for row in self.snapshots):
            raise CorpusError("snapshot grid is incomplete")
        for s, row in enumerate(self.snapshots):
            for t, snap in enumerate(row):
                if (snap.subject, snap.time) != (s, t):
                    raise CorpusError(f"snapshot at ({s}, {t}) is labelled ({snap.subject}, {snap.time})")
                for u, v in snap.edges:
                    if not (0 <= u < v < self.V):
                        raise CorpusError(f"edge ({u}, {v}) is not canonical or out of range for V={self.V}")
        if self.labels is not None and len(self.labels) != self.S:
            raise CorpusError("labels must have one entry per subject")
        if self.node_names is not None and len(self.node_names) != self.V:
            raise CorpusError("node_names must have one entry per node")
        if self.partition is not None:
            for n in self.partition:
                if not 0 <= n < self.V:
                    raise CorpusError(f"partition refers to node {n} outside [0, {self.V})")

    def snapshot(self, s: int, t: int) -> GraphSnapshot:
        return self.snapshots[s][t]

    @classmethod
    def from_edge_lists(cls, V: int, edge_lists: list[list[Iterable[tuple[int, int]]]], **meta) -> "DynamicGraphCorpus":
        S, T = len(edge_lists), len(edge_lists[0]) if edge_lists else 0
        grid = tuple(
            tuple(GraphSnapshot.from_pairs(s, t, pairs, V) for t, pairs in enumerate(row))
            for s, row in enumerate(edge_lists)
        )
        return cls(S=S, T=T, V=V, snapshots=grid, **meta)


@dataclass(frozen=True)
class TemporalSplit:
    train: range
    val: range
    test: range

    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split_temporal(corpus_or_T, fractions: tuple[float, float] = (0.8, 0.1)) -> TemporalSplit:
    """Contiguous train/val/test ranges along time, floored with a minimum of one each.

    When flooring leaves the test range empty, the training range shrinks to make room.
    """
    T = corpus_or_T.T if isinstance(corpus_or_T, DynamicGraphCorpus) else int(corpus_or_T)
    f_train, f_val = fractions
    if not (f_train > 0 and f_val > 0 and f_train + f_val < 1):
        raise ValueError(f"invalid split fractions {fractions}")
    if T < 3:
        raise ValueError(f"T={T} is too small for three non-empty ranges")
    n_train = max(1, math.floor(f_train * T))
    n_val = max(1, math.floor(f_val * T))
    if n_train + n_val >= T:
        # flooring left no test snapshot: give one up from the training range
        n_train = T - n_val - 1
    if n_train < 1:
        raise ValueError(f"T={T} cannot hold three non-empty ranges with fractions {fractions}")
    return TemporalSplit(range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, T))


def directed_expansion(snapshot: GraphSnapshot) -> np.ndarray:
    """Both orientations of every edge as an (2E, 2) int array sorted by (source, target)."""
    if not snapshot.edges:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.array(sorted(snapshot.edges), dtype=np.int64)
    both = np.concatenate([e, e[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    return both[order]


def neighbors(snapshot: GraphSnapshot, n: int, V: int | None = None) -> set[int]:
    if n < 0 or (V is not None and n >= V):
        raise IndexError(f"node {n} out of range")
    out = set()
    for u, v in snapshot.edges:
        if u == n:
            out.add(v)
        elif v == n:
            out.add(u)
    return out


def adjacency(snapshot: GraphSnapshot, V: int) -> np.ndarray:
    A = np.zeros((V, V), dtype=bool)
    if snapshot.edges:
        e = np.array(list(snapshot.edges))
        A[e[:, 0], e[:, 1]] = True
        A[e[:, 1], e[:, 0]] = True
    return A


# directory I/O ------------------------------------------------------------------


def write_corpus(corpus: DynamicGraphCorpus, directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "edges").mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format_version": FORMAT_VERSION, "S": corpus.S, "T": corpus.T, "V": corpus.V}
    if corpus.labels is not None:
        manifest["labels"] = list(corpus.labels)
    if corpus.node_names is not None:
        manifest["node_names"] = list(corpus.node_names)
    if corpus.partition is not None:
        manifest["partition"] = {str(k): v for k, v in sorted(corpus.partition.items())}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    for s in range(corpus.S):
        lines = ["t,u,v"]
        for t in range(corpus.T):
            lines.extend(f"{t},{u},{v}" for u, v in corpus.snapshot(s, t).sorted_edges())
        (directory / "edges" / f"subject_{s}.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return directory


def load_corpus(path: str | Path) -> DynamicGraphCorpus:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CorpusError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"unreadable manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorpusError(f"unsupported format_version {manifest.get('format_version')!r}")
    try:
        S, T, V = int(manifest["S"]), int(manifest["T"]), int(manifest["V"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"manifest needs integer S, T, V: {exc}") from exc

    grid = []
    for s in range(S):
        f = path / "edges" / f"subject_{s}.csv"
        if not f.is_file():
            raise CorpusError(f"missing edge file {f}")
        per_t: list[list[tuple[int, int]]] = [[] for _ in range(T)]
        with f.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["t", "u", "v"]:
                raise CorpusError(f"{f}: expected header t,u,v, got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    t, u, v = (int(x) for x in row)
                except ValueError as exc:
                    raise CorpusError(f"{f}:{lineno}: malformed row {row}") from exc
                if not 0 <= t < T:
                    raise CorpusError(f"{f}:{lineno}: snapshot index {t} outside [0, {T})")
                per_t[t].append((u, v))
        try:
            grid.append(tuple(GraphSnapshot.from_pairs(s, t, per_t[t], V) for t in range(T)))
        except CorpusError as exc:
            raise CorpusError(f"{f}: {exc}") from exc

    partition = manifest.get("partition")
    if partition is not None:
        partition = {int(k): str(v) for k, v in partition.items()}
    labels = manifest.get("labels")
    names = manifest.get("node_names")
    return DynamicGraphCorpus(
        S=S, T=T, V=V, snapshots=tuple(grid),
        labels=tuple(labels) if labels is not None else None,
        node_names=tuple(names) if names is not None else None,
        partition=partition,
    )
