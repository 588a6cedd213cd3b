"""Planted-noise benchmark: train every phase-ablation variant on a
synthetic world and measure ranking quality plus denoising precision."""

from __future__ import annotations

import multiprocessing as mp
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as mt
from .graph import full_neighborhood
from .model import GumbelConfig, ModelParams, denoise_user
from .synthetic import PlantedWorld, SynthConfig, denoising_precision, generate
from .training import (ABLATION_VARIANTS, TrainConfig, _evaluate_split,
                       _restore, _snapshot, train)


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    longtail_threshold: int = 50
    workers: int = 1
    variants: tuple = tuple(sorted(ABLATION_VARIANTS))


@dataclass
class VariantResult:
    variant: str
    test: dict                  # overall ranking report
    hot_uauc: float | None
    tail_uauc: float | None
    trace_tau: list
    params_snapshot: dict
    runtime_s: float


@dataclass
class ExperimentResult:
    results: dict               # variant -> VariantResult
    precision_denoise: float | None
    precision_random: float | None
    runtime_s: float


def build_tasks(world: PlantedWorld, seed: int):
    """Index-mapped evaluation tasks for the valid and test splits.

    Positives are the held-out in-topic clicks. Negatives are drawn from
    the planted-irrelevant pool (items outside the user's topics) under a
    half-popularity, half-uniform mixture so that both the hot and the
    long-tail side of a frequency split see negatives.
    """
    g = world.graph
    uidx = {u: i for i, u in enumerate(g.user_ids)}
    midx = {m: i for i, m in enumerate(g.item_ids)}

    weights = np.array([len(g.item_users[m]) + 1.0 for m in range(g.n_items)])
    item_topic = np.array([world.labels.item_topic[g.item_ids[m]]
                           for m in range(g.n_items)])

    def task(bucket, offset):
        per_user = {}
        for u, m, _ in bucket:
            if u in uidx and m in midx:
                per_user.setdefault(uidx[u], []).append(midx[m])
        rng = np.random.default_rng(seed + offset)
        entries = []
        for u, items in sorted(per_user.items()):
            positives = sorted(set(items))
            topics = world.labels.user_topics[g.user_ids[u]]
            off_topic = ~np.isin(item_topic, list(topics))
            clicked = set(g.user_items[u]) | set(positives)
            allowed = np.where(off_topic, 1.0, 0.0)
            allowed[list(clicked)] = 0.0
            need = len(positives)
            if np.count_nonzero(allowed) < need:
                continue
            pop = allowed * weights
            w = 0.5 * pop / pop.sum() + 0.5 * allowed / allowed.sum()
            negatives = rng.choice(g.n_items, size=need, replace=False,
                                   p=w).tolist()
            entries.append(mt.UserCandidates(
                user=u, candidates=positives + negatives,
                labels=[1] * need + [0] * need))
        return mt.EvalTask(users=entries)

    return task(world.valid, 1_000_003), task(world.test, 2_000_003)


def _run_variant(args):
    synth_cfg, train_cfg, variant, longtail_threshold = args
    t0 = time.monotonic()
    world = generate(synth_cfg)
    g = world.graph
    valid_task, test_task = build_tasks(world, train_cfg.seed)
    phase1, phase2 = ABLATION_VARIANTS[variant]
    params, trace = train(g, train_cfg, valid_task=valid_task,
                          phase1=phase1, phase2=phase2)
    report = _evaluate_split(g, params, test_task, train_cfg, phase1, phase2)
    freq = {m: len(g.item_users[m]) for m in range(g.n_items)}
    hot, tail = mt.longtail_split(freq, test_task, longtail_threshold)
    hot_auc = mt.uauc(hot)[0] if hot.users else None
    tail_auc = mt.uauc(tail)[0] if tail.users else None
    return VariantResult(variant=variant, test=report.to_dict(),
                         hot_uauc=hot_auc, tail_uauc=tail_auc,
                         trace_tau=[row.tau for row in trace],
                         params_snapshot=_snapshot(params),
                         runtime_s=time.monotonic() - t0)


def one_hop_precision(world: PlantedWorld, params: ModelParams,
                      random_selection: bool, seed: int = 0):
    """Mean planted-label precision of the retained one-hop items."""
    g = world.graph
    from .model import warmup_pass
    hidden = warmup_pass(g, params)
    gcfg = GumbelConfig(tau0=params.config.tau0, eta=params.config.eta,
                        x=0, training=False)
    rng = np.random.default_rng(seed)
    subs = []
    for u in range(g.n_users):
        nbhd = full_neighborhood(g, u)
        subs.append(denoise_user(u, nbhd, hidden, params, gcfg, rng=rng,
                                 random_phase1=random_selection))
    one, _ = denoising_precision(subs, g, world.labels)
    return one


def run_experiment(cfg: ExperimentConfig, log=None) -> ExperimentResult:
    t0 = time.monotonic()
    jobs = [(cfg.synth, cfg.train, v, cfg.longtail_threshold)
            for v in cfg.variants]
    if cfg.workers > 1 and len(jobs) > 1:
        with mp.get_context("spawn").Pool(min(cfg.workers, len(jobs))) as pool:
            outputs = pool.map(_run_variant, jobs)
    else:
        outputs = [_run_variant(job) for job in jobs]
    results = {r.variant: r for r in outputs}
    if log:
        for v in cfg.variants:
            r = results[v]
            log(f"{v:>12s}  uauc {r.test['uauc']:.4f}  "
                f"hot {r.hot_uauc if r.hot_uauc is not None else float('nan'):.4f}  "
                f"tail {r.tail_uauc if r.tail_uauc is not None else float('nan'):.4f}  "
                f"({r.runtime_s:.0f}s)")

    prec_d = prec_r = None
    if "denoise-1+2" in results:
        world = generate(cfg.synth)
        g = world.graph
        params = ModelParams.init(g.n_users, g.n_items, g.n_concepts,
                                  cfg.train.model_config(),
                                  np.random.default_rng(cfg.train.seed))
        _restore(params, results["denoise-1+2"].params_snapshot)
        prec_d = one_hop_precision(world, params, random_selection=False)
        prec_r = one_hop_precision(world, params, random_selection=True,
                                   seed=cfg.train.seed + 7)
        if log:
            log(f"one-hop precision: denoised {prec_d:.4f}  random {prec_r:.4f}")
    return ExperimentResult(results=results, precision_denoise=prec_d,
                            precision_random=prec_r,
                            runtime_s=time.monotonic() - t0)
