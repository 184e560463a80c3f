"""Synthetic compositional knowledge graphs with known two-hop rules.

Every entity has exactly one outgoing edge per *base* relation. Each derived
relation ``q`` is the composition of two base relations, ``q(e) = b2(b1(e))``,
so a two-hop walk along the right base edges always reaches the answer.
Normal derived relations are dense; few-shot ones keep only a handful of
training triples and hold the rest out as validation/test queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kg
from .errors import InvalidArgument


@dataclass
class CompositionalKG:
    dataset: kg.Dataset
    base: list[int]
    normal: list[int]
    fewshot: list[int]
    rules: dict[int, tuple[int, int]]
    threshold: int                   # K separating normal from few-shot relations

    def normal_tasks(self) -> dict[int, list[kg.Triple]]:
        """Training triples of the derived normal relations (the meta-training tasks)."""
        return {r: self.dataset.task(r).train for r in self.normal}


def compositional_kg(n_entities=200, n_base=4, n_normal=12, n_fewshot=3, support=5,
                     normal_train_frac=0.3, n_valid=10, n_test=40, seed=0) -> CompositionalKG:
    if n_base < 2 or n_normal + n_fewshot > n_base * n_base:
        raise InvalidArgument("not enough distinct base-relation pairs for the requested rules")
    rng = np.random.default_rng(seed)
    names = [f"e{i:03d}" for i in range(n_entities)]
    succ = rng.integers(0, n_entities, size=(n_base, n_entities))
    pairs = [(a, b) for a in range(n_base) for b in range(n_base)]
    chosen = [pairs[i] for i in rng.permutation(len(pairs))[: n_normal + n_fewshot]]

    entities = kg.Vocab(names)
    relations = kg.Vocab()
    base = [relations.add(f"b{i}") for i in range(n_base)]
    normal = [relations.add(f"q{i:02d}") for i in range(n_normal)]
    fewshot = [relations.add(f"f{i}") for i in range(n_fewshot)]
    rules = {r: (base[a], base[b]) for r, (a, b) in zip(normal + fewshot, chosen)}

    train, valid, test = [], [], []
    for b in range(n_base):
        train += [kg.Triple(e, base[b], int(succ[b, e])) for e in range(n_entities)]
    for r in normal + fewshot:
        a, b = chosen[(normal + fewshot).index(r)]
        facts = [kg.Triple(e, r, int(succ[b, succ[a, e]])) for e in range(n_entities)]
        order = rng.permutation(n_entities)
        if r in normal:
            n_train = int(round(normal_train_frac * n_entities))
            n_val = (n_entities - n_train) // 2
        else:
            n_train, n_val = support, n_valid
        n_te = n_entities - n_train - n_val if r in normal else n_test
        if n_train + n_val + n_te > n_entities:
            raise InvalidArgument("too few entities for the requested support/valid/test sizes")
        train += [facts[i] for i in order[:n_train]]
        valid += [facts[i] for i in order[n_train:n_train + n_val]]
        test += [facts[i] for i in order[n_train + n_val:n_train + n_val + n_te]]

    dataset = kg.from_triples(entities, relations, train, valid, test)
    threshold = max(support + 1, int(round(normal_train_frac * n_entities)))
    return CompositionalKG(dataset, base, normal, fewshot, rules, threshold)
