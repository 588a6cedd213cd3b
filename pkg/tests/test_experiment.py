"""Unit checks for the planted benchmark harness."""

import numpy as np

from denoiserec.experiment import build_tasks
from denoiserec.synthetic import SynthConfig, generate


def small_world():
    return generate(SynthConfig(users=30, items=120, concepts=24, topics=4,
                                rho=0.2, mean_degree=8, concepts_per_item=4,
                                true_concepts_per_item=2, eval_positives=3,
                                seed=5))


class TestBuildTasks:
    def test_negatives_are_planted_irrelevant_and_unclicked(self):
        world = small_world()
        g = world.graph
        valid, test = build_tasks(world, seed=5)
        for task in (valid, test):
            assert task.users
            for entry in task.users:
                user = g.user_ids[entry.user]
                topics = world.labels.user_topics[user]
                negatives = [m for m, y in zip(entry.candidates, entry.labels)
                             if y == 0]
                assert len(negatives) == sum(entry.labels)
                for m in negatives:
                    assert world.labels.item_topic[g.item_ids[m]] not in topics
                    assert m not in g.user_items[entry.user]
                assert len(set(entry.candidates)) == len(entry.candidates)

    def test_positives_come_from_the_split(self):
        world = small_world()
        g = world.graph
        _, test = build_tasks(world, seed=5)
        held_out = {(u, m) for u, m, _ in world.test}
        for entry in test.users:
            for m, y in zip(entry.candidates, entry.labels):
                if y == 1:
                    assert (g.user_ids[entry.user], g.item_ids[m]) in held_out

    def test_deterministic_across_calls(self):
        world = small_world()
        a_valid, a_test = build_tasks(world, seed=5)
        b_valid, b_test = build_tasks(world, seed=5)
        for a, b in ((a_valid, b_valid), (a_test, b_test)):
            assert [e.candidates for e in a.users] == [e.candidates for e in b.users]
            assert [e.labels for e in a.users] == [e.labels for e in b.users]

    def test_seed_changes_negatives(self):
        world = small_world()
        _, a = build_tasks(world, seed=5)
        _, b = build_tasks(world, seed=6)
        assert [e.candidates for e in a.users] != [e.candidates for e in b.users]

    def test_valid_and_test_draw_independent_negatives(self):
        world = small_world()
        valid, test = build_tasks(world, seed=5)
        v = {(e.user, tuple(e.candidates)) for e in valid.users}
        t = {(e.user, tuple(e.candidates)) for e in test.users}
        assert v != t
