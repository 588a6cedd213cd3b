"""Operator command line: synth, build-graph, train, evaluate, ablate,
explain, sweep."""

from __future__ import annotations

import csv
import io
import json
import os
import sys
from dataclasses import fields, replace

import click
import numpy as np

from . import concepts as cp
from . import metrics as mt
from . import synthetic as sd
from . import training as tr
from .graph import (build_graph, load_graph, load_interactions,
                    load_item_concepts, save_graph)
from .model import ModelParams, load_concept_vectors, user_preference, warmup_pass

EVAL_SEED_OFFSET = 104729


def _atomic_write(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def _fail(msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


@click.group()
def main():
    """Concept-graph denoising recommender pipeline."""


@main.command()
@click.option("--users", default=500, show_default=True)
@click.option("--items", default=2000, show_default=True)
@click.option("--concepts", default=300, show_default=True)
@click.option("--topics", default=20, show_default=True)
@click.option("--rho", default=0.2, show_default=True)
@click.option("--mean-degree", default=12, show_default=True)
@click.option("--concepts-per-item", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def synth(users, items, concepts, topics, rho, mean_degree, concepts_per_item,
          seed, out):
    """Generate a labeled planted-preference dataset."""
    try:
        cfg = sd.SynthConfig(users=users, items=items, concepts=concepts,
                             topics=topics, rho=rho, mean_degree=mean_degree,
                             concepts_per_item=concepts_per_item, seed=seed)
        world = sd.generate(cfg)
    except ValueError as e:
        _fail(str(e))
    sd.write_world(world, out)
    click.echo(f"wrote {out}: {world.summary['train_edges']} train edges, "
               f"noisy fraction {world.summary['noisy_edge_fraction']:.3f}")


@main.command("build-graph")
@click.option("--interactions", required=True, type=click.Path(exists=True))
@click.option("--concepts-tsv", type=click.Path(exists=True))
@click.option("--corpus", type=click.Path(exists=True),
              help="JSON-lines corpus to run concept extraction on")
@click.option("--inventory", type=click.Path(exists=True))
@click.option("--stopwords", type=click.Path(exists=True))
@click.option("--tfidf-threshold", default=0.0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def build_graph_cmd(interactions, concepts_tsv, corpus, inventory, stopwords,
                    tfidf_threshold, out):
    """Build the tripartite graph from interaction and concept files."""
    try:
        records = load_interactions(interactions)
        if concepts_tsv:
            ic_rows = load_item_concepts(concepts_tsv)
        elif corpus and inventory:
            ic_rows = cp.run_pipeline(corpus, inventory, tfidf_threshold,
                                      stopwords_path=stopwords)
        else:
            _fail("provide --concepts-tsv, or --corpus with --inventory")
        dropped = []
        g = build_graph([(u, m) for u, m, _ in records], ic_rows,
                        warn=lambda n: dropped.append(n))
    except (ValueError, OSError) as e:
        _fail(str(e))
    if dropped:
        click.echo(f"warning: dropped {dropped[0]} concept rows for "
                   f"items without interactions", err=True)
    save_graph(g, out)
    click.echo(f"wrote {out}: {g.n_users} users, {g.n_items} items, "
               f"{g.n_concepts} concepts, {g.n_ui_edges()} clicks")


def _config_from_flags(config_path, overrides) -> tr.TrainConfig:
    cfg = tr.load_config(config_path) if config_path else tr.TrainConfig()
    clean = {k: v for k, v in overrides.items() if v is not None}
    if clean:
        cfg = replace(cfg, **clean)
    return cfg


def _train_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True)),
        click.option("--epochs", type=int),
        click.option("--batch-size", type=int),
        click.option("--lr", type=float),
        click.option("--lam", type=float),
        click.option("--k", type=int),
        click.option("--tau0", type=float),
        click.option("--eta", type=float),
        click.option("--p", type=int),
        click.option("--n1", type=int),
        click.option("--n2", type=int),
        click.option("--d", type=int),
        click.option("--optimizer", type=click.Choice(["adam", "sgd"])),
        click.option("--seed", type=int),
        click.option("--freeze-concepts", is_flag=True, default=None),
        click.option("--patience", type=int),
        click.option("--eval-k", type=int),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _split_task(g, split_path, seed):
    """Evaluation task from a held-out interactions TSV, with persisted
    per-user negatives for rerunnable comparisons."""
    neg_path = split_path + ".negatives.json"
    if os.path.exists(neg_path):
        return mt.load_task(neg_path)
    records = load_interactions(split_path)
    uidx = {str(u): i for i, u in enumerate(g.user_ids)}
    midx = {str(m): i for i, m in enumerate(g.item_ids)}
    per_user = {}
    for u, m, _ in records:
        if u in uidx and m in midx:
            per_user.setdefault(uidx[u], []).append(midx[m])
    entries = [(u, sorted(set(items))) for u, items in sorted(per_user.items())]
    rng = np.random.default_rng(seed + EVAL_SEED_OFFSET)
    task = mt.sample_eval_negatives(g.user_items, entries, rng, g.n_items)
    mt.save_task(task, neg_path)
    return task


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--valid", "valid_path", type=click.Path(exists=True))
@click.option("--concept-embeddings", type=click.Path(exists=True))
@click.option("--out-checkpoint", required=True, type=click.Path())
@click.option("--metrics-csv", type=click.Path())
@click.option("--verbose", is_flag=True)
@_train_options
def train(graph_path, valid_path, concept_embeddings, out_checkpoint,
          metrics_csv, verbose, config_path, **overrides):
    """Train the full pipeline on a built graph."""
    try:
        cfg = _config_from_flags(config_path, overrides)
        g = load_graph(graph_path)
        valid_task = _split_task(g, valid_path, cfg.seed) if valid_path else None
        vectors = None
        if concept_embeddings:
            vec_rng = np.random.default_rng(cfg.seed + 1)
            vectors = load_concept_vectors(concept_embeddings, g.concept_texts,
                                           cfg.d, vec_rng)
        log = click.echo if verbose else None
        params, trace = tr.train(g, cfg, valid_task=valid_task,
                                 concept_vectors=vectors, log=log)
    except (ValueError, OSError, RuntimeError) as e:
        _fail(str(e))
    params.save(out_checkpoint)
    if metrics_csv:
        _atomic_write(metrics_csv, tr.TRACE_HEADER + "\n" +
                      "\n".join(row.csv() for row in trace) + "\n")
    click.echo(f"saved checkpoint {out_checkpoint}")


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", required=True, type=click.Path(exists=True))
@click.option("--k-metrics", default=5, show_default=True)
@click.option("--longtail-threshold", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--variant", default="denoise-1+2", show_default=True,
              type=click.Choice(sorted(tr.ABLATION_VARIANTS)))
@click.option("--report", "report_path", type=click.Path())
@click.option("--per-user-csv", type=click.Path())
def evaluate(graph_path, checkpoint, split_path, k_metrics, longtail_threshold,
             seed, variant, report_path, per_user_csv):
    """Score a held-out split and report ranking metrics with a
    hot/long-tail breakdown."""
    try:
        g = load_graph(graph_path)
        params = ModelParams.load(checkpoint)
        if params.user_emb.data.shape[0] != g.n_users or \
                params.item_emb.data.shape[0] != g.n_items:
            _fail("checkpoint and graph disagree on node counts")
        task = _split_task(g, split_path, seed)
        phase1, phase2 = tr.ABLATION_VARIANTS[variant]
        rng = np.random.default_rng(seed + EVAL_SEED_OFFSET)
        tr._score_task(g, params, task, rng=rng, phase1=phase1, phase2=phase2)
        report = mt.evaluate(task, k_metrics, collect_users=bool(per_user_csv))
        freq = {m: len(g.item_users[m]) for m in range(g.n_items)}
        hot, tail = mt.longtail_split(freq, task, longtail_threshold)
        hot_rep = mt.evaluate(hot, k_metrics) if hot.users else None
        tail_rep = mt.evaluate(tail, k_metrics) if tail.users else None
    except (ValueError, OSError, RuntimeError) as e:
        _fail(str(e))

    doc = {"overall": report.to_dict(),
           "hot": hot_rep.to_dict() if hot_rep else None,
           "longtail": tail_rep.to_dict() if tail_rep else None,
           "longtail_threshold": longtail_threshold}
    click.echo("overall  " + report.to_text())
    click.echo("hot      " + (hot_rep.to_text() if hot_rep else "absent"))
    click.echo("longtail " + (tail_rep.to_text() if tail_rep else "absent"))
    if report_path:
        _atomic_write(report_path, json.dumps(doc, indent=2) + "\n")
    if per_user_csv:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["user", "auc", "ndcg", "hit", "map"])
        for row in report.per_user:
            w.writerow([row["user"], row["auc"], row["ndcg"], row["hit"],
                        row["map"]])
        _atomic_write(per_user_csv, buf.getvalue())


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--valid", "valid_path", required=True, type=click.Path(exists=True))
@click.option("--test", "test_path", required=True, type=click.Path(exists=True))
@click.option("--variant", required=True,
              type=click.Choice(sorted(tr.ABLATION_VARIANTS)))
@click.option("--report", "report_path", type=click.Path())
@click.option("--verbose", is_flag=True)
@_train_options
def ablate(graph_path, valid_path, test_path, variant, report_path, verbose,
           config_path, **overrides):
    """Train and evaluate one phase-ablation variant."""
    try:
        cfg = _config_from_flags(config_path, overrides)
        g = load_graph(graph_path)
        valid_task = _split_task(g, valid_path, cfg.seed)
        test_task = _split_task(g, test_path, cfg.seed)
        log = click.echo if verbose else None
        _, _, report = tr.run_ablation(g, cfg, variant, valid_task, test_task,
                                       log=log)
    except (ValueError, OSError, RuntimeError) as e:
        _fail(str(e))
    click.echo(f"{variant}  {report.to_text()}")
    if report_path:
        _atomic_write(report_path,
                      json.dumps({variant: report.to_dict()}, indent=2) + "\n")


def _dot_escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def _export_user(g, params, hidden, user, out_dir, want_dot, want_json):
    sub, h_star = user_preference(g, user, hidden, params)
    uid = str(g.user_ids[user])
    if sub.is_empty():
        return False
    item_entries = []
    for pos, m in enumerate(sub.items):
        cand_pos = sub.item_candidates.index(m)
        score = (float(sub.item_scores[cand_pos])
                 if sub.item_scores is not None else None)
        entry = sub.two_hop.get(m, {"retained": [], "scores": None,
                                    "candidates": []})
        kept = []
        for kind, idx in entry["retained"]:
            if kind == "concept":
                c_pos = entry["candidates"].index((kind, idx))
                kept.append({"concept": g.concept_texts[idx],
                             "score": (float(entry["scores"][c_pos])
                                       if entry["scores"] is not None else None)})
        item_entries.append({"item": str(g.item_ids[m]), "score": score,
                             "concepts": kept})
    if want_json:
        doc = {"user": uid, "items": item_entries,
               "preference_vector": h_star.data.tolist()}
        _atomic_write(os.path.join(out_dir, f"user_{uid}.json"),
                      json.dumps(doc, indent=2) + "\n")
    if want_dot:
        lines = ["graph denoised {", f'  "u:{_dot_escape(uid)}" [shape=box];']
        for it in item_entries:
            item_node = f"m:{_dot_escape(it['item'])}"
            label = it["item"] if it["score"] is None else \
                f"{it['item']}\\n{it['score']:.3f}"
            lines.append(f'  "{item_node}" [label="{_dot_escape(label)}"];')
            lines.append(f'  "u:{_dot_escape(uid)}" -- "{item_node}";')
            for c in it["concepts"]:
                c_node = f"c:{_dot_escape(c['concept'])}"
                clabel = c["concept"] if c["score"] is None else \
                    f"{c['concept']}\\n{c['score']:.3f}"
                lines.append(f'  "{c_node}" [label="{_dot_escape(clabel)}", '
                             f"shape=ellipse];")
                lines.append(f'  "{item_node}" -- "{c_node}";')
        lines.append("}")
        _atomic_write(os.path.join(out_dir, f"user_{uid}.dot"),
                      "\n".join(lines) + "\n")
    return True


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--users", "user_list", required=True,
              help="comma-separated user ids")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--dot/--no-dot", default=True, show_default=True)
@click.option("--json", "want_json", is_flag=True, default=True)
def explain(graph_path, checkpoint, user_list, out_dir, dot, want_json):
    """Export denoised subgraphs (JSON + DOT) for selected users."""
    try:
        g = load_graph(graph_path)
        params = ModelParams.load(checkpoint)
        if params.user_emb.data.shape[0] != g.n_users or \
                params.item_emb.data.shape[0] != g.n_items:
            _fail("checkpoint and graph disagree on node counts")
        os.makedirs(out_dir, exist_ok=True)
        uidx = {str(u): i for i, u in enumerate(g.user_ids)}
        hidden = warmup_pass(g, params)
        exported, skipped = [], []
        for uid in (s.strip() for s in user_list.split(",") if s.strip()):
            if uid not in uidx:
                skipped.append(uid)
                continue
            if _export_user(g, params, hidden, uidx[uid], out_dir, dot,
                            want_json):
                exported.append(uid)
            else:
                skipped.append(uid)
                click.echo(f"warning: user {uid} has an empty neighborhood",
                           err=True)
        _atomic_write(os.path.join(out_dir, "index.json"),
                      json.dumps({"exported": exported, "skipped": skipped},
                                 indent=2) + "\n")
    except (ValueError, OSError, RuntimeError) as e:
        _fail(str(e))
    click.echo(f"exported {len(exported)} users, skipped {len(skipped)}")


SWEEP_AXES = {
    "n2": [6, 10, 20, 30],
    "G": [2, 4, 6],
    "tau0": [10.0, 100.0, 1000.0],
}
TAU0_ETA = {10.0: 2e-4, 100.0: 5e-4, 1000.0: 1e-3}


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--valid", "valid_path", required=True, type=click.Path(exists=True))
@click.option("--test", "test_path", required=True, type=click.Path(exists=True))
@click.option("--axis", required=True, type=click.Choice(sorted(SWEEP_AXES)))
@click.option("--values", help="comma-separated override of axis values")
@click.option("--report", "report_path", type=click.Path())
@click.option("--verbose", is_flag=True)
@_train_options
def sweep(graph_path, valid_path, test_path, axis, values, report_path,
          verbose, config_path, **overrides):
    """Train one setting per axis value under a shared seed and tabulate."""
    try:
        base = _config_from_flags(config_path, overrides)
        g = load_graph(graph_path)
        valid_task = _split_task(g, valid_path, base.seed)
        test_task = _split_task(g, test_path, base.seed)
    except (ValueError, OSError) as e:
        _fail(str(e))
    axis_values = SWEEP_AXES[axis]
    if values:
        cast = float if axis == "tau0" else int
        axis_values = [cast(v) for v in values.split(",")]
    rows = []
    for value in axis_values:
        log = click.echo if verbose else None
        try:
            if axis == "n2":
                cfg = replace(base, n2=int(value))
            elif axis == "G":
                cfg = replace(base, k=int(value))
            else:
                cfg = replace(base, tau0=float(value),
                              eta=TAU0_ETA.get(float(value), base.eta))
            params, _ = tr.train(g, cfg, valid_task=valid_task, log=log)
            report = tr._evaluate_split(g, params, test_task, cfg,
                                        "denoise", "denoise")
            rows.append({axis: value, **report.to_dict()})
            click.echo(f"{axis}={value}  {report.to_text()}")
        except (ValueError, RuntimeError) as e:
            rows.append({axis: value, "error": str(e)})
            click.echo(f"{axis}={value}  aborted: {e}", err=True)
    if report_path:
        _atomic_write(report_path, json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
