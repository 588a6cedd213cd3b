import json
import os

import numpy as np
import pytest

from denoiserec.model import DenoisedSubgraph
from denoiserec.synthetic import (PlantedWorld, SynthConfig,
                                  denoising_precision, generate, write_world)


def small_cfg(**kw):
    base = dict(users=40, items=120, concepts=30, topics=6, rho=0.2,
                mean_degree=8, concepts_per_item=5, seed=0)
    base.update(kw)
    return SynthConfig(**base)


class TestGenerate:
    def test_zero_noise_all_edges_true(self):
        world = generate(small_cfg(rho=0.0))
        assert all(world.labels.ui_true.values())
        assert world.summary["noisy_edge_fraction"] == 0.0

    def test_single_topic_world_all_edges_true(self):
        world = generate(small_cfg(topics=1, rho=0.3))
        assert all(world.labels.ui_true.values())

    def test_noisy_fraction_near_rho(self):
        world = generate(SynthConfig(users=500, items=2000, concepts=300,
                                     topics=20, rho=0.2, seed=0))
        assert world.summary["noisy_edge_fraction"] == pytest.approx(0.2, abs=0.02)

    def test_labels_consistent_with_topics(self):
        world = generate(small_cfg())
        for (u, m), truth in world.labels.ui_true.items():
            in_topic = world.labels.item_topic[m] in world.labels.user_topics[u]
            assert truth == in_topic

    def test_eval_positives_are_always_true(self):
        world = generate(small_cfg())
        for bucket in (world.valid, world.test):
            for u, m, _ in bucket:
                assert world.labels.ui_true[(u, m)]

    def test_concept_labels_match_topics(self):
        world = generate(small_cfg())
        for (m, c), truth in world.labels.ic_true.items():
            same = world.labels.concept_topic[c] == world.labels.item_topic[m]
            assert truth == same

    def test_every_item_has_true_concepts(self):
        world = generate(small_cfg())
        per_item = {}
        for (m, c), truth in world.labels.ic_true.items():
            per_item.setdefault(m, []).append(truth)
        for m, truths in per_item.items():
            assert any(truths)

    def test_deterministic_given_seed(self):
        a, b = generate(small_cfg(seed=3)), generate(small_cfg(seed=3))
        assert a.train == b.train
        assert a.valid == b.valid
        assert a.labels.ui_true == b.labels.ui_true
        assert a.graph.user_items == b.graph.user_items

    def test_seed_changes_world(self):
        a, b = generate(small_cfg(seed=1)), generate(small_cfg(seed=2))
        assert a.train != b.train

    def test_graph_validates(self):
        world = generate(small_cfg())
        world.graph.validate()
        assert world.graph.n_users <= 40
        assert all(world.graph.user_items[u] for u in range(world.graph.n_users))

    def test_popularity_is_skewed(self):
        world = generate(SynthConfig(users=300, items=400, concepts=60,
                                     topics=10, rho=0.1, seed=0))
        freq = {}
        for _, m, _ in world.train:
            freq[m] = freq.get(m, 0) + 1
        counts = sorted(freq.values(), reverse=True)
        top_decile = sum(counts[:len(counts) // 10])
        assert top_decile > 0.4 * sum(counts)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            generate(small_cfg(rho=1.0))
        with pytest.raises(ValueError):
            generate(small_cfg(topics=0))
        with pytest.raises(ValueError):
            generate(small_cfg(users=0))
        with pytest.raises(ValueError):
            generate(small_cfg(concepts=3, topics=6))


class TestWriteWorld:
    def test_files_written_and_readable(self, tmp_path):
        world = generate(small_cfg())
        out = str(tmp_path / "world")
        write_world(world, out)
        for name in ("train.tsv", "valid.tsv", "test.tsv",
                     "item_concepts.tsv", "labels.tsv", "world.json"):
            assert os.path.exists(os.path.join(out, name))
        with open(os.path.join(out, "world.json")) as f:
            doc = json.load(f)
        assert doc["train_edges"] == len(world.train)
        with open(os.path.join(out, "train.tsv")) as f:
            assert sum(1 for _ in f) == len(world.train)
        with open(os.path.join(out, "labels.tsv")) as f:
            kinds = {line.split("\t")[0] for line in f}
        assert kinds == {"ui", "ic"}


def manual_subgraph(user, items, two_hop=None):
    return DenoisedSubgraph(user=user, items=items, item_candidates=list(items),
                            item_scores=None, item_weights=None,
                            two_hop=two_hop or {})


class TestDenoisingPrecision:
    def test_oracle_selector_scores_one(self):
        world = generate(small_cfg())
        g, labels = world.graph, world.labels
        subs = []
        for u in range(g.n_users):
            uid = g.user_ids[u]
            good = [m for m in g.user_items[u]
                    if labels.ui_true[(uid, g.item_ids[m])]]
            if good:
                subs.append(manual_subgraph(u, good))
        one, two = denoising_precision(subs, g, labels)
        assert one == pytest.approx(1.0)
        assert two is None

    def test_random_selector_matches_one_minus_rho(self):
        world = generate(SynthConfig(users=500, items=2000, concepts=300,
                                     topics=20, rho=0.2, seed=1))
        g, labels = world.graph, world.labels
        rng = np.random.default_rng(0)
        subs = []
        for u in range(g.n_users):
            items = g.user_items[u]
            n = max(1, len(items) // 2)
            pick = rng.choice(len(items), size=n, replace=False)
            subs.append(manual_subgraph(u, [items[i] for i in pick]))
        one, _ = denoising_precision(subs, g, labels)
        assert one == pytest.approx(1.0 - 0.2, abs=0.03)

    def test_two_hop_precision_from_concept_labels(self):
        world = generate(small_cfg())
        g, labels = world.graph, world.labels
        u = 0
        m = g.user_items[u][0]
        retained = [("concept", c) for c in g.item_concepts[m]]
        sub = manual_subgraph(u, [m], {m: {"retained": retained}})
        _, two = denoising_precision([sub], g, labels)
        uid, topics = g.user_ids[u], labels.user_topics[g.user_ids[u]]
        expect = np.mean([labels.concept_topic[g.concept_texts[c]] in topics
                          for c in g.item_concepts[m]])
        assert two == pytest.approx(float(expect))

    def test_empty_input_gives_none(self):
        world = generate(small_cfg())
        assert denoising_precision([], world.graph, world.labels) == (None, None)
