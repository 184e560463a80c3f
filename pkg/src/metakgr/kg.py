"""Triple parsing, the reasoning graph, and normal/few-shot task splitting."""

from __future__ import annotations

import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import checkpoint
from .errors import InvalidArgument, ParseError

INVERSE_SUFFIX = "_inv"
SELF_LOOP = "NO_OP"
START = "START"


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocab:
    """Bijective string <-> dense id map, ids assigned in first-seen order."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._names.append(name)
            self._ids[name] = idx
        return idx

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise InvalidArgument(f"unknown name {name!r}") from None

    def name(self, idx: int) -> str:
        return self._names[idx]

    def __contains__(self, name) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._names == other._names

    @property
    def names(self) -> list[str]:
        return list(self._names)


def parse_triples(stream, entities: Vocab, relations: Vocab) -> list[Triple]:
    """Parse ``head<TAB>relation<TAB>tail`` lines, extending both vocabularies.

    ``stream`` may be a string, a file object, or any iterable of lines.
    Blank lines are skipped; any other line without exactly three fields raises
    ParseError carrying the 1-based line number.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    triples = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise ParseError(f"expected head<TAB>relation<TAB>tail, got {len(parts)} field(s)", lineno)
        h, r, t = parts
        triples.append(Triple(entities.add(h), relations.add(r), entities.add(t)))
    return triples


def read_triples(path, entities: Vocab, relations: Vocab) -> list[Triple]:
    with open(path, encoding="utf-8", newline="\n") as f:
        try:
            return parse_triples(f, entities, relations)
        except ParseError as exc:
            raise ParseError(f"{path}: {exc}") from None


class Graph:
    """Immutable directed multigraph with CSR adjacency.

    Relation ids are laid out as ``[forward..., inverse..., NO_OP, START]`` so
    the inverse of forward relation ``r`` is ``r + n_forward``. Inverse ids are
    always reserved; ``add_inverses`` only controls whether inverse edges exist.
    """

    def __init__(self, entity_names, forward_relation_names, edges, triples, add_inverses):
        self.entities = Vocab(entity_names)
        fwd = list(forward_relation_names)
        self.n_forward = len(fwd)
        self.relations = Vocab(fwd + [r + INVERSE_SUFFIX for r in fwd] + [SELF_LOOP, START])
        self.self_loop = 2 * self.n_forward
        self.start = self.self_loop + 1
        self.add_inverses = bool(add_inverses)
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
        self.edges.setflags(write=False)
        counts = np.bincount(self.edges[:, 0], minlength=len(self.entities))
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.offsets.setflags(write=False)
        self.by_relation: dict[int, list[Triple]] = {}
        for t in triples:
            self.by_relation.setdefault(t.relation, []).append(t)
        self._edge_set = None

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def inverse(self, relation: int) -> int:
        if relation < self.n_forward:
            return relation + self.n_forward
        if relation < 2 * self.n_forward:
            return relation - self.n_forward
        return relation

    def adjacency(self, entity: int) -> np.ndarray:
        """Outgoing ``(relation, neighbor)`` rows of ``entity``, sorted."""
        lo, hi = self.offsets[entity], self.offsets[entity + 1]
        return self.edges[lo:hi, 1:]

    def out_degree(self, entity: int) -> int:
        return int(self.offsets[entity + 1] - self.offsets[entity])

    def has_edge(self, head: int, relation: int, tail: int) -> bool:
        if self._edge_set is None:
            self._edge_set = set(map(tuple, self.edges.tolist()))
        return (head, relation, tail) in self._edge_set

    def triples(self) -> list[Triple]:
        out = []
        for r in sorted(self.by_relation):
            out.extend(self.by_relation[r])
        return out

    def save(self, path, extra=None):
        triples = np.array(self.triples(), dtype=np.int64).reshape(-1, 3)
        meta = {"entities": self.entities.names,
                "relations": self.relations.names[: self.n_forward],
                "add_inverses": self.add_inverses}
        meta.update(extra or {})
        return checkpoint.save(path, {"edges": self.edges, "triples": triples},
                               kind="graph", extra=meta)

    @classmethod
    def load(cls, path):
        arrays, meta = checkpoint.load(path, kind="graph")
        extra = meta["extra"]
        triples = [Triple(*map(int, row)) for row in arrays["triples"]]
        return cls(extra["entities"], extra["relations"], arrays["edges"], triples,
                   extra["add_inverses"])


def build_graph(triples: list[Triple], entities: Vocab, relations: Vocab,
                add_inverses: bool = True) -> Graph:
    """Deduplicate ``triples`` and index them as outgoing edges.

    ``relations`` must contain forward relations only; inverse names are
    synthesized here.
    """
    for name in relations:
        if name.endswith(INVERSE_SUFFIX) or name in (SELF_LOOP, START):
            raise InvalidArgument(f"relation name {name!r} collides with a reserved name")
    unique = sorted(set(triples))
    n_fwd = len(relations)
    rows = [(h, r, t) for h, r, t in unique]
    if add_inverses:
        rows += [(t, r + n_fwd, h) for h, r, t in unique]
    edges = np.array(sorted(rows), dtype=np.int64).reshape(-1, 3)
    return Graph(entities.names, relations.names, edges,
                 [Triple(*t) for t in unique], add_inverses)


@dataclass(frozen=True)
class TaskSplit:
    K: int
    normal: dict[int, list[Triple]]
    fewshot: dict[int, list[Triple]]

    def is_fewshot(self, relation: int) -> bool:
        return relation in self.fewshot


@dataclass
class Task:
    """All queries for one relation, partitioned into train/valid/test."""

    relation: int
    train: list[Triple] = field(default_factory=list)
    valid: list[Triple] = field(default_factory=list)
    test: list[Triple] = field(default_factory=list)

    def __post_init__(self):
        for part in (self.train, self.valid, self.test):
            for t in part:
                if t.relation != self.relation:
                    raise InvalidArgument(
                        f"triple {t} does not belong to task of relation {self.relation}")

    @property
    def triples(self) -> list[Triple]:
        return self.train + self.valid + self.test

    def labelled(self) -> list[tuple[Triple, str]]:
        return ([(t, "train") for t in self.train] + [(t, "valid") for t in self.valid]
                + [(t, "test") for t in self.test])


def relation_frequency_report(triples: Iterable[Triple]) -> dict[int, int]:
    counts = Counter(t.relation for t in triples)
    return {r: counts[r] for r in sorted(counts)}


def split_by_frequency(triples: list[Triple], K: int) -> TaskSplit:
    """A relation is few-shot iff it has strictly fewer than ``K`` triples."""
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise InvalidArgument(f"threshold K must be a positive integer, got {K!r}")
    groups: dict[int, list[Triple]] = {}
    for t in triples:
        groups.setdefault(t.relation, []).append(t)
    normal, fewshot = {}, {}
    for r in sorted(groups):
        (fewshot if len(groups[r]) < K else normal)[r] = groups[r]
    return TaskSplit(int(K), normal, fewshot)


def sample_support_query(task_triples, support_size: int, query_size: int, rng):
    """Draw a support set D_S and a disjoint query set D_Q from one task.

    When the task holds at least ``support_size + query_size`` triples both sets
    are drawn without replacement. Otherwise a query set of
    ``min(query_size, n // 2)`` triples (at least one) is held out and D_S is
    drawn with replacement from the rest. A single-triple task cannot be split,
    so that triple is used for both sets.
    """
    triples = list(task_triples)
    n = len(triples)
    if n == 0:
        raise InvalidArgument("cannot sample from an empty task")
    if support_size < 1 or query_size < 1:
        raise InvalidArgument("support_size and query_size must be >= 1")
    if n == 1:
        return [triples[0]] * support_size, [triples[0]]
    order = rng.permutation(n)
    if n >= support_size + query_size:
        return ([triples[i] for i in order[:support_size]],
                [triples[i] for i in order[support_size:support_size + query_size]])
    n_query = max(1, min(query_size, n // 2))
    query = [triples[i] for i in order[:n_query]]
    rest = order[n_query:]
    support = [triples[i] for i in rng.choice(rest, size=support_size, replace=True)]
    return support, query


def random_partition(triples: list[Triple], valid_frac: float, test_frac: float, rng):
    """Seeded train/valid/test split (for datasets without predefined partitions)."""
    if not (0 <= valid_frac and 0 <= test_frac and valid_frac + test_frac < 1):
        raise InvalidArgument("fractions must be non-negative and sum to < 1")
    order = rng.permutation(len(triples))
    n_valid = int(round(valid_frac * len(triples)))
    n_test = int(round(test_frac * len(triples)))
    pick = lambda idx: [triples[i] for i in sorted(idx)]  # noqa: E731
    return (pick(order[n_valid + n_test:]), pick(order[:n_valid]),
            pick(order[n_valid:n_valid + n_test]))


@dataclass
class Dataset:
    """Vocabularies, partitions, and the reasoning graph built from training triples."""

    entities: Vocab
    relations: Vocab
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    graph: Graph

    def task(self, relation: int) -> Task:
        pick = lambda part: [t for t in part if t.relation == relation]  # noqa: E731
        return Task(relation, pick(self.train), pick(self.valid), pick(self.test))

    def split(self, K: int) -> TaskSplit:
        return split_by_frequency(self.train, K)

    def known_triples(self) -> set[Triple]:
        return set(self.train) | set(self.valid) | set(self.test)

    def save(self, path):
        parts = {name: [list(t) for t in getattr(self, name)] for name in ("train", "valid", "test")}
        arrays = {name: np.array(rows, dtype=np.int64).reshape(-1, 3) for name, rows in parts.items()}
        arrays["edges"] = self.graph.edges
        extra = {"entities": self.entities.names, "relations": self.relations.names,
                 "add_inverses": self.graph.add_inverses}
        return checkpoint.save(path, arrays, kind="dataset", extra=extra)

    @classmethod
    def load(cls, path) -> "Dataset":
        arrays, meta = checkpoint.load(path, kind="dataset")
        extra = meta["extra"]
        entities, relations = Vocab(extra["entities"]), Vocab(extra["relations"])
        parts = {name: [Triple(*map(int, row)) for row in arrays[name]]
                 for name in ("train", "valid", "test")}
        graph = Graph(entities.names, relations.names, arrays["edges"],
                      sorted(set(parts["train"])), extra["add_inverses"])
        return cls(entities, relations, graph=graph, **parts)


def load_dataset(train_path, valid_path=None, test_path=None, add_inverses=True) -> Dataset:
    """Read partition files; ids are assigned over train, then valid, then test."""
    entities, relations = Vocab(), Vocab()
    train = read_triples(train_path, entities, relations)
    valid = read_triples(valid_path, entities, relations) if valid_path else []
    test = read_triples(test_path, entities, relations) if test_path else []
    return from_triples(entities, relations, train, valid, test, add_inverses)


def from_triples(entities, relations, train, valid=(), test=(), add_inverses=True) -> Dataset:
    graph = build_graph(train, entities, relations, add_inverses)
    return Dataset(entities, relations, list(train), list(valid), list(test), graph)


def write_triples(path, triples, entities: Vocab, relations: Vocab):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for h, r, t in triples:
            f.write(f"{entities.name(h)}\t{relations.name(r)}\t{entities.name(t)}\n")
