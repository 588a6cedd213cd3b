"""Planted-preference world generator with ground-truth relevance labels.

Users prefer one or two topics; a fraction rho of their clicks are
out-of-topic false positives. Item popularity follows a Zipf-like law so
the hot / long-tail split is exercised. Labels for every user-item and
item-concept edge make denoising quality directly measurable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .graph import TripartiteGraph, build_graph


@dataclass
class WorldLabels:
    user_topics: dict           # user_id -> set of topics
    item_topic: dict            # item_id -> topic
    concept_topic: dict         # concept_name -> topic
    ui_true: dict               # (user_id, item_id) -> bool
    ic_true: dict               # (item_id, concept_name) -> bool


@dataclass
class PlantedWorld:
    graph: TripartiteGraph
    labels: WorldLabels
    train: list                 # (user_id, item_id, timestamp)
    valid: list
    test: list
    summary: dict = field(default_factory=dict)


@dataclass
class SynthConfig:
    users: int = 500
    items: int = 2000
    concepts: int = 300
    topics: int = 20
    rho: float = 0.2
    mean_degree: int = 12        # training clicks per user
    concepts_per_item: int = 8
    true_concepts_per_item: int = 3
    eval_positives: int = 5      # held-out in-topic clicks per split
    zipf_exponent: float = 1.2
    seed: int = 0


def generate(cfg: SynthConfig) -> PlantedWorld:
    """Deterministically generate a labeled tripartite world."""
    if cfg.topics < 1:
        raise ValueError("need at least 1 topic")
    if not (0.0 <= cfg.rho < 1.0):
        raise ValueError("rho must be in [0, 1)")
    for name in ("users", "items", "concepts"):
        if getattr(cfg, name) < 1:
            raise ValueError(f"{name} must be positive")
    if cfg.concepts < cfg.topics:
        raise ValueError("need at least one concept per topic")
    if cfg.items < cfg.topics:
        raise ValueError("need at least one item per topic")

    rng = np.random.default_rng(cfg.seed)

    concept_topic = {f"c{c}": c % cfg.topics for c in range(cfg.concepts)}
    topic_concepts = [[f"c{c}" for c in range(cfg.concepts) if c % cfg.topics == t]
                      for t in range(cfg.topics)]

    item_topic = {f"i{m}": m % cfg.topics for m in range(cfg.items)}
    topic_items = [[f"i{m}" for m in range(cfg.items) if m % cfg.topics == t]
                   for t in range(cfg.topics)]

    # Zipf-like popularity over a random permutation of items
    perm = rng.permutation(cfg.items)
    pop = np.zeros(cfg.items)
    pop[perm] = (np.arange(cfg.items) + 1.0) ** (-cfg.zipf_exponent)

    def pop_weights(item_names):
        w = np.array([pop[int(name[1:])] for name in item_names])
        return w / w.sum()

    ic_rows, ic_true = [], {}
    for m in range(cfg.items):
        name = f"i{m}"
        t = item_topic[name]
        pool = topic_concepts[t]
        n_true = min(cfg.true_concepts_per_item, len(pool))
        true_cs = [pool[i] for i in rng.choice(len(pool), size=n_true, replace=False)]
        chosen = dict.fromkeys(true_cs)
        n_off_topic = cfg.concepts - len(pool)
        while len(chosen) < min(cfg.concepts_per_item, n_true + n_off_topic):
            c = f"c{int(rng.integers(cfg.concepts))}"
            if concept_topic[c] != t and c not in chosen:
                chosen[c] = None
        for c in chosen:
            truth = concept_topic[c] == t
            ic_rows.append((name, c, 1.0))
            ic_true[(name, c)] = truth

    user_topics, ui_true = {}, {}
    train, valid, test = [], [], []
    all_items = [f"i{m}" for m in range(cfg.items)]
    ts = 0.0
    for uix in range(cfg.users):
        user = f"u{uix}"
        n_topics = min(cfg.topics, 1 + int(rng.integers(2)))
        topics = set(rng.choice(cfg.topics, size=n_topics, replace=False).tolist())
        user_topics[user] = topics
        in_topic_items = [name for t in topics for name in topic_items[t]]
        out_items = [name for name in all_items
                     if item_topic[name] not in topics]
        in_w = pop_weights(in_topic_items)
        out_w = pop_weights(out_items) if out_items else None

        degree = max(4, int(rng.poisson(cfg.mean_degree)))
        clicked = set()

        def draw(pool, weights):
            for _ in range(50 * len(pool)):
                name = pool[int(rng.choice(len(pool), p=weights))]
                if name not in clicked:
                    clicked.add(name)
                    return name
            return None

        n_noise = int(rng.binomial(degree, cfg.rho)) if out_items else 0
        for _ in range(degree - n_noise):
            m = draw(in_topic_items, in_w)
            if m is not None:
                ts += 1.0
                train.append((user, m, ts))
                ui_true[(user, m)] = item_topic[m] in topics
        for _ in range(n_noise):
            m = draw(out_items, out_w)
            if m is not None:
                ts += 1.0
                train.append((user, m, ts))
                ui_true[(user, m)] = item_topic[m] in topics

        # fresh in-topic positives for validation and testing, drawn
        # uniformly so the held-out set covers the whole in-topic catalog
        # (training clicks stay popularity-biased)
        eval_w = np.full(len(in_topic_items), 1.0 / len(in_topic_items))
        for bucket in (valid, test):
            for _ in range(cfg.eval_positives):
                m = draw(in_topic_items, eval_w)
                if m is not None:
                    ts += 1.0
                    bucket.append((user, m, ts))
                    ui_true[(user, m)] = True

    graph = build_graph([(u, m) for u, m, _ in train], ic_rows)
    labels = WorldLabels(user_topics=user_topics, item_topic=item_topic,
                         concept_topic=concept_topic, ui_true=ui_true,
                         ic_true=ic_true)
    noisy = sum(1 for (u, m), v in ui_true.items() if not v)
    summary = {
        "config": {k: (float(v) if isinstance(v, float) else int(v))
                   for k, v in vars(cfg).items()},
        "train_edges": len(train),
        "noisy_edge_fraction": noisy / max(1, len(train)),
    }
    return PlantedWorld(graph=graph, labels=labels, train=train, valid=valid,
                        test=test, summary=summary)


def write_world(world: PlantedWorld, out_dir: str):
    """Emit TSV/JSON files in the formats the graph builder consumes."""
    os.makedirs(out_dir, exist_ok=True)

    def write_interactions(name, rows):
        tmp = os.path.join(out_dir, name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            for u, m, ts in rows:
                f.write(f"{u}\t{m}\t{ts}\n")
        os.replace(tmp, os.path.join(out_dir, name))

    write_interactions("train.tsv", world.train)
    write_interactions("valid.tsv", world.valid)
    write_interactions("test.tsv", world.test)

    g = world.graph
    tmp = os.path.join(out_dir, "item_concepts.tsv.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for m in range(g.n_items):
            for c in g.item_concepts[m]:
                f.write(f"{g.item_ids[m]}\t{g.concept_texts[c]}\t"
                        f"{g.ic_weights.get((m, c), 1.0)}\n")
    os.replace(tmp, os.path.join(out_dir, "item_concepts.tsv"))

    tmp = os.path.join(out_dir, "labels.tsv.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for (u, m), v in sorted(world.labels.ui_true.items()):
            f.write(f"ui\t{u}\t{m}\t{int(v)}\n")
        for (m, c), v in sorted(world.labels.ic_true.items()):
            f.write(f"ic\t{m}\t{c}\t{int(v)}\n")
    os.replace(tmp, os.path.join(out_dir, "labels.tsv"))

    tmp = os.path.join(out_dir, "world.json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump({**world.summary,
                   "user_topics": {u: sorted(t) for u, t in
                                   world.labels.user_topics.items()},
                   "item_topic": world.labels.item_topic,
                   "concept_topic": world.labels.concept_topic}, f)
    os.replace(tmp, os.path.join(out_dir, "world.json"))


def denoising_precision(subgraphs, graph: TripartiteGraph, labels: WorldLabels):
    """Mean fraction of retained neighbors whose planted label is true.

    Returns (one-hop precision, two-hop precision); either is None when no
    subgraph contributes at that level.
    """
    one, two = [], []
    for sub in subgraphs:
        if sub.is_empty():
            continue
        user = graph.user_ids[sub.user]
        topics = labels.user_topics[user]
        hits = [labels.ui_true.get((user, graph.item_ids[m]), False)
                for m in sub.items]
        one.append(float(np.mean(hits)))
        kept_topics = []
        for m in sub.items:
            for kind, idx in sub.two_hop.get(m, {}).get("retained", ()):
                if kind != "concept":
                    continue
                topic = labels.concept_topic[graph.concept_texts[idx]]
                kept_topics.append(topic in topics)
        if kept_topics:
            two.append(float(np.mean(kept_topics)))
    return (float(np.mean(one)) if one else None,
            float(np.mean(two)) if two else None)
