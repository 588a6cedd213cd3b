"""Tripartite user/item/concept graph: construction, validation, IO, sampling.

Edges exist only between users and items (clicks) and between items and
concepts (tags). The graph is frozen after construction; training never
mutates it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class NodeRef:
    kind: str  # "user" | "item" | "concept"
    index: int


@dataclass
class TripartiteGraph:
    user_ids: list
    item_ids: list
    concept_texts: list
    user_items: list  # per user: sorted list of item indices
    item_users: list
    item_concepts: list
    concept_items: list
    ic_weights: dict = field(default_factory=dict)  # (item, concept) -> tf-idf score

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def n_concepts(self):
        return len(self.concept_texts)

    def n_ui_edges(self):
        return sum(len(a) for a in self.user_items)

    def validate(self):
        for u, items in enumerate(self.user_items):
            if len(set(items)) != len(items):
                raise GraphError(f"duplicate user-item edges at user {u}")
            for i in items:
                if not (0 <= i < self.n_items):
                    raise GraphError(f"user {u} references unknown item {i}")
                if u not in self.item_users[i]:
                    raise GraphError(f"asymmetric user-item edge ({u}, {i})")
        for m, concepts in enumerate(self.item_concepts):
            if len(set(concepts)) != len(concepts):
                raise GraphError(f"duplicate item-concept edges at item {m}")
            for c in concepts:
                if not (0 <= c < self.n_concepts):
                    raise GraphError(f"item {m} references unknown concept {c}")
                if m not in self.concept_items[c]:
                    raise GraphError(f"asymmetric item-concept edge ({m}, {c})")
        if sum(len(a) for a in self.user_items) != sum(len(a) for a in self.item_users):
            raise GraphError("user-item edge count mismatch between directions")


@dataclass
class SampledNeighborhood:
    user: int
    items: list  # sampled one-hop items
    item_concepts: dict  # item -> sampled concept indices
    item_users: dict  # item -> sampled co-clicking users (may be empty)


def build_graph(interactions, item_concepts, warn=None):
    """Build a dense-indexed tripartite graph.

    ``interactions``: iterable of (user_id, item_id).
    ``item_concepts``: iterable of (item_id, concept_text, weight).
    Duplicate edges collapse; nodes that end up with zero degree are
    dropped. Concept records for items that never appear in any
    interaction are dropped and counted via ``warn(count)``.
    """
    ui = set()
    for u, m in interactions:
        ui.add((u, m))
    if not ui:
        raise GraphError("no interactions")

    users = sorted({u for u, _ in ui}, key=str)
    items = sorted({m for _, m in ui}, key=str)
    uidx = {u: i for i, u in enumerate(users)}
    midx = {m: i for i, m in enumerate(items)}

    dropped = 0
    ic = {}
    for m, c, w in item_concepts:
        if m not in midx:
            dropped += 1
            continue
        ic[(midx[m], c)] = float(w)
    if dropped and warn is not None:
        warn(dropped)

    concepts = sorted({c for _, c in ic}, key=str)
    cidx = {c: i for i, c in enumerate(concepts)}

    user_items = [[] for _ in users]
    item_users = [[] for _ in items]
    for u, m in sorted(ui, key=lambda e: (str(e[0]), str(e[1]))):
        user_items[uidx[u]].append(midx[m])
        item_users[midx[m]].append(uidx[u])

    item_concepts_adj = [[] for _ in items]
    concept_items = [[] for _ in concepts]
    weights = {}
    for (m, c), w in sorted(ic.items(), key=lambda e: (e[0][0], str(e[0][1]))):
        item_concepts_adj[m].append(cidx[c])
        concept_items[cidx[c]].append(m)
        weights[(m, cidx[c])] = w

    g = TripartiteGraph(
        user_ids=users,
        item_ids=items,
        concept_texts=[str(c) for c in concepts],
        user_items=[sorted(a) for a in user_items],
        item_users=[sorted(a) for a in item_users],
        item_concepts=[sorted(a) for a in item_concepts_adj],
        concept_items=[sorted(a) for a in concept_items],
        ic_weights=weights,
    )
    g.validate()
    return g


def sample_neighborhood(g: TripartiteGraph, user: int, p: int,
                        rng: np.random.Generator, user_budget: int | None = None,
                        include_users: bool = False) -> SampledNeighborhood:
    """Uniform without-replacement sample of a user's two-hop neighborhood.

    Returns all neighbors whenever the degree is at most the budget.
    Deterministic for a given generator state.
    """
    if p < 1:
        raise GraphError("sampling budget must be >= 1")
    if user_budget is None:
        user_budget = p

    def pick(pool, budget):
        if len(pool) <= budget:
            return list(pool)
        chosen = rng.choice(len(pool), size=budget, replace=False)
        return [pool[i] for i in sorted(chosen)]

    items = pick(g.user_items[user], p)
    concepts = {m: pick(g.item_concepts[m], p) for m in items}
    cousers = {}
    if include_users:
        for m in items:
            others = [v for v in g.item_users[m] if v != user]
            cousers[m] = pick(others, user_budget)
    else:
        cousers = {m: [] for m in items}
    return SampledNeighborhood(user=user, items=items, item_concepts=concepts,
                               item_users=cousers)


def full_neighborhood(g: TripartiteGraph, user: int) -> SampledNeighborhood:
    items = list(g.user_items[user])
    return SampledNeighborhood(
        user=user,
        items=items,
        item_concepts={m: list(g.item_concepts[m]) for m in items},
        item_users={m: [] for m in items},
    )


def save_graph(g: TripartiteGraph, path: str):
    doc = {
        "users": [str(u) for u in g.user_ids],
        "items": [str(m) for m in g.item_ids],
        "concepts": list(g.concept_texts),
        "edges_ui": [[u, m] for u in range(g.n_users) for m in g.user_items[u]],
        "edges_ic": [[m, c, g.ic_weights.get((m, c), 1.0)]
                     for m in range(g.n_items) for c in g.item_concepts[m]],
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def load_graph(path: str) -> TripartiteGraph:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise GraphError(f"{path}: malformed graph archive at line {e.lineno}, "
                             f"column {e.colno}: {e.msg}") from None
    for key in ("users", "items", "concepts", "edges_ui", "edges_ic"):
        if key not in doc:
            raise GraphError(f"{path}: missing '{key}'")
    if not doc["edges_ui"]:
        raise GraphError("no interactions")

    users, items, concepts = doc["users"], doc["items"], doc["concepts"]
    user_items = [[] for _ in users]
    item_users = [[] for _ in items]
    for u, m in doc["edges_ui"]:
        user_items[u].append(m)
        item_users[m].append(u)
    item_concepts = [[] for _ in items]
    concept_items = [[] for _ in concepts]
    weights = {}
    for m, c, w in doc["edges_ic"]:
        item_concepts[m].append(c)
        concept_items[c].append(m)
        weights[(m, c)] = float(w)
    g = TripartiteGraph(
        user_ids=users,
        item_ids=items,
        concept_texts=concepts,
        user_items=[sorted(a) for a in user_items],
        item_users=[sorted(a) for a in item_users],
        item_concepts=[sorted(a) for a in item_concepts],
        concept_items=[sorted(a) for a in concept_items],
        ic_weights=weights,
    )
    g.validate()
    return g


def load_interactions(path: str):
    """Read a TSV of ``user_id <tab> item_id [<tab> timestamp]`` lines."""
    records = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise GraphError(f"{path}:{ln}: expected at least 2 tab-separated fields")
            ts = float(parts[2]) if len(parts) > 2 else float(ln)
            records.append((parts[0], parts[1], ts))
    return records


def load_item_concepts(path: str):
    """Read a TSV of ``item_id <tab> concept_text <tab> score`` lines."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise GraphError(f"{path}:{ln}: expected 3 tab-separated fields")
            rows.append((parts[0], parts[1], float(parts[2])))
    return rows
