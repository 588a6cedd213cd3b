"""Per-user ranking metrics (UAUC, NDCG@K, HIT@K, MAP@K) and splits."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np


@dataclass
class UserCandidates:
    user: int
    candidates: list          # item indices, unique
    labels: list              # 1 for held-out positives, 0 for sampled negatives
    scores: list | None = None


@dataclass
class EvalTask:
    users: list  # list of UserCandidates

    def scored(self):
        for entry in self.users:
            if entry.scores is None:
                raise ValueError(f"user {entry.user} has no scores")
        return self.users


@dataclass
class RankingReport:
    uauc: float | None
    ndcg: float | None
    hit: float | None
    map: float | None
    k: int
    n_users: int
    n_skipped: int = 0
    per_user: list = field(default_factory=list)

    def to_dict(self):
        return {"uauc": self.uauc, f"ndcg@{self.k}": self.ndcg,
                f"hit@{self.k}": self.hit, f"map@{self.k}": self.map,
                "users": self.n_users, "skipped": self.n_skipped}

    def to_text(self):
        def fmt(v):
            return "absent" if v is None else f"{v:.4f}"
        return (f"users {self.n_users:>6d}  skipped {self.n_skipped:>4d}  "
                f"uauc {fmt(self.uauc)}  ndcg@{self.k} {fmt(self.ndcg)}  "
                f"hit@{self.k} {fmt(self.hit)}  map@{self.k} {fmt(self.map)}")


def user_auc(scores, labels) -> float | None:
    """Pairwise AUC over one user's candidates; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    concordant = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                concordant += 1.0
            elif sp == sn:
                concordant += 0.5
    return concordant / (len(pos) * len(neg))


def uauc(task: EvalTask):
    """Mean of per-user AUC; users without both classes are excluded."""
    values, skipped = [], 0
    for entry in task.scored():
        auc = user_auc(entry.scores, entry.labels)
        if auc is None:
            skipped += 1
        else:
            values.append(auc)
    return (float(np.mean(values)) if values else None), skipped


def _ranked_labels(scores, labels):
    # descending score, ties broken by stable candidate index
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [labels[i] for i in order]


def user_topk(scores, labels, k: int):
    """(ndcg@k, hit@k, map@k) for one user; binary relevance."""
    n_rel = sum(labels)
    if n_rel == 0 or n_rel == len(labels):
        return None
    k_eff = min(k, len(labels))
    ranked = _ranked_labels(scores, labels)[:k_eff]
    denom = min(k_eff, n_rel)

    dcg = sum(1.0 / math.log2(r + 2) for r, y in enumerate(ranked) if y == 1)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(denom))
    ndcg = dcg / idcg

    hit = sum(ranked) / denom

    hits, prec_sum = 0, 0.0
    for r, y in enumerate(ranked):
        if y == 1:
            hits += 1
            prec_sum += hits / (r + 1)
    ap = prec_sum / denom
    return ndcg, hit, ap


def topk_metrics(task: EvalTask, k: int):
    if k < 1:
        raise ValueError("k must be >= 1")
    nd, ht, mp, skipped = [], [], [], 0
    for entry in task.scored():
        res = user_topk(entry.scores, entry.labels, k)
        if res is None:
            skipped += 1
            continue
        nd.append(res[0])
        ht.append(res[1])
        mp.append(res[2])
    if not nd:
        return None, None, None, skipped
    return float(np.mean(nd)), float(np.mean(ht)), float(np.mean(mp)), skipped


def evaluate(task: EvalTask, k: int, collect_users: bool = False) -> RankingReport:
    auc, skip_a = uauc(task)
    nd, ht, mp, _ = topk_metrics(task, k)
    per_user = []
    if collect_users:
        for entry in task.scored():
            a = user_auc(entry.scores, entry.labels)
            t = user_topk(entry.scores, entry.labels, k)
            per_user.append({"user": entry.user, "auc": a,
                             "ndcg": t[0] if t else None,
                             "hit": t[1] if t else None,
                             "map": t[2] if t else None})
    evaluated = sum(1 for e in task.users
                    if user_auc(e.scores, e.labels) is not None)
    return RankingReport(uauc=auc, ndcg=nd, hit=ht, map=mp, k=k,
                         n_users=evaluated, n_skipped=skip_a, per_user=per_user)


def item_frequencies(user_items) -> dict:
    freq = {}
    for items in user_items:
        for m in items:
            freq[m] = freq.get(m, 0) + 1
    return freq


def longtail_split(train_freq: dict, task: EvalTask, threshold: int):
    """Partition candidates by training click frequency into hot / long-tail."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    hot_users, tail_users = [], []
    for entry in task.scored():
        hot_idx = [i for i, m in enumerate(entry.candidates)
                   if train_freq.get(m, 0) >= threshold]
        tail_idx = [i for i, m in enumerate(entry.candidates)
                    if train_freq.get(m, 0) < threshold]
        for idx, bucket in ((hot_idx, hot_users), (tail_idx, tail_users)):
            if not idx:
                continue
            bucket.append(UserCandidates(
                user=entry.user,
                candidates=[entry.candidates[i] for i in idx],
                labels=[entry.labels[i] for i in idx],
                scores=[entry.scores[i] for i in idx]))
    return EvalTask(users=hot_users), EvalTask(users=tail_users)


def sample_eval_negatives(user_items, entries, rng: np.random.Generator,
                          n_items: int, weights=None):
    """Per user, draw as many unobserved items as there are positives.

    ``weights`` optionally biases the negative draws (e.g. towards popular
    items so a frequency split sees both classes); defaults to uniform.
    """
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n_items,) or np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("weights must be non-negative with a positive sum")
        weights = weights / weights.sum()
    tasks = []
    for user, positives in entries:
        clicked = set(user_items[user]) | set(positives)
        need = len(positives)
        if n_items - len(clicked) < need:
            continue
        negatives = []
        seen = set(clicked)
        use_weights = weights is not None and \
            np.count_nonzero(weights) - len(clicked) >= need
        while len(negatives) < need:
            if use_weights:
                m = int(rng.choice(n_items, p=weights))
            else:
                m = int(rng.integers(n_items))
            if m not in seen:
                negatives.append(m)
                seen.add(m)
        tasks.append(UserCandidates(user=user,
                                    candidates=list(positives) + negatives,
                                    labels=[1] * need + [0] * need))
    return EvalTask(users=tasks)


def save_task(task: EvalTask, path: str):
    doc = [{"user": e.user, "candidates": e.candidates, "labels": e.labels}
           for e in task.users]
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def load_task(path: str) -> EvalTask:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return EvalTask(users=[UserCandidates(user=e["user"], candidates=e["candidates"],
                                          labels=e["labels"]) for e in doc])
