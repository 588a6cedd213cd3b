"""Minibatch training: k-subgraph cross-entropy loss, 1:1 negative
sampling, temperature annealing, Adam/SGD, and the phase ablations."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from .autodiff import Tensor
from .graph import TripartiteGraph, sample_neighborhood
from .model import (GumbelConfig, ModelConfig, ModelParams, denoise_user,
                    predict, refine_preference, user_preference, warmup_pass)

PHASE_MODES = ("denoise", "random", "keep")

ABLATION_VARIANTS = {
    "denoise-1+2": ("denoise", "denoise"),
    "denoise-1": ("denoise", "keep"),
    "denoise-2": ("keep", "denoise"),
    "random-1": ("random", "denoise"),
    "random-2": ("denoise", "random"),
    "random-1+2": ("random", "random"),
}


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    lam: float = 1e-5
    k: int = 4
    tau0: float = 10.0
    eta: float = 2e-4
    p: int = 40
    n1: int = 6
    n2: int = 10
    d: int = 128
    optimizer: str = "adam"
    seed: int = 0
    freeze_concepts: bool = False
    two_hop_users: bool = False
    patience: int = 5
    eval_k: int = 5

    def __post_init__(self):
        for name in ("epochs", "batch_size", "k", "p", "n1", "n2", "d",
                     "patience", "eval_k"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.tau0 <= 0 or self.eta <= 0 or self.lam < 0:
            raise ValueError("lr, tau0, eta must be positive and lam non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, n1=self.n1, n2=self.n2, k=self.k,
                           lam=self.lam, tau0=self.tau0, eta=self.eta, p=self.p,
                           two_hop_users=self.two_hop_users,
                           freeze_concepts=self.freeze_concepts)


def load_config(path: str) -> TrainConfig:
    """Flat ``key = value`` config file; every key mirrors a TrainConfig field."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    with open(path, encoding="utf-8") as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
            values[key] = _parse_value(val)
    return TrainConfig(**values)


def _parse_value(val: str):
    if val.lower() in ("true", "false"):
        return val.lower() == "true"
    if val.startswith('"') and val.endswith('"'):
        return val[1:-1]
    try:
        return int(val)
    except ValueError:
        pass
    try:
        return float(val)
    except ValueError:
        return val


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            m_hat = self.m[i] / (1 - self.b1 ** self.t)
            v_hat = self.v[i] / (1 - self.b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class SGD:
    def __init__(self, params, lr=1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            p.data -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def make_optimizer(cfg: TrainConfig, params: ModelParams):
    trainable = params.trainable()
    return Adam(trainable, lr=cfg.lr) if cfg.optimizer == "adam" else \
        SGD(trainable, lr=cfg.lr)


def sample_negatives(g: TripartiteGraph, positives, rng: np.random.Generator,
                     warn=None):
    """One unobserved item per positive, rejection-sampled per user."""
    clicked_cache = {}
    examples = []
    skipped = 0
    for u, m in positives:
        clicked = clicked_cache.get(u)
        if clicked is None:
            clicked = set(g.user_items[u])
            clicked_cache[u] = clicked
        if len(clicked) >= g.n_items:
            skipped += 1
            continue
        while True:
            j = int(rng.integers(g.n_items))
            if j not in clicked:
                break
        examples.append((u, m, 1))
        examples.append((u, j, 0))
    if skipped and warn is not None:
        warn(skipped)
    return examples


def _cross_entropy(y_hat: Tensor, label: int) -> Tensor:
    p = ad.clamp_min(y_hat if label == 1 else (Tensor(1.0) - y_hat), 1e-12)
    return -ad.log(p)


def loss_for_user(user, nbhd, examples, hidden, params: ModelParams,
                  gcfg: GumbelConfig, k: int, rng,
                  phase1="denoise", phase2="denoise",
                  include_reg: bool = True):
    """Sum of cross-entropy over k denoised subgraphs and all examples.

    ``examples`` is a list of (item index, label). Returns (loss tensor,
    number of prediction terms); None when the user has no neighborhood.
    """
    total = None
    n_terms = 0
    items = [m for m, _ in examples]
    labels = np.array([y for _, y in examples], dtype=np.float64)
    # p = y_hat for positives, 1 - y_hat for negatives, in one vector op
    sign = Tensor(np.where(labels == 1, 1.0, -1.0))
    offset = Tensor(np.where(labels == 1, 0.0, 1.0))
    for _ in range(k):
        sub = denoise_user(user, nbhd, hidden, params, gcfg, rng=rng,
                           random_phase1=(phase1 == "random"),
                           random_phase2=(phase2 == "random"),
                           keep_phase1=(phase1 == "keep"),
                           keep_phase2=(phase2 == "keep"))
        if sub.is_empty():
            return None, 0
        h_star_u, _ = refine_preference(user, sub, hidden, params)
        y_hat = ad.sigmoid(ad.matmul(ad.gather(hidden.item_mat, items), h_star_u))
        prob = ad.add(ad.mul(y_hat, sign), offset)
        term = -ad.sum_all(ad.log(ad.clamp_min(prob, 1e-12)))
        total = term if total is None else total + term
        n_terms += len(examples)
    if include_reg and params.config.lam > 0:
        total = total + Tensor(params.config.lam) * params.l2_penalty()
    return total, n_terms


def _score_task(g, params, task, rng=None, phase1="denoise", phase2="denoise"):
    """Inference-mode scoring of an evaluation task; fills entry.scores."""
    hidden = warmup_pass(g, params)
    pref = {}
    for entry in task.users:
        if entry.user not in pref:
            use_rng = rng if (phase1 == "random" or phase2 == "random") else None
            sub, h_star = _inference_pref(g, entry.user, hidden, params, use_rng,
                                          phase1, phase2)
            pref[entry.user] = h_star
        h_star = pref[entry.user]
        if h_star is None:
            entry.scores = [0.0] * len(entry.candidates)
            continue
        logits = hidden.item_mat.data[entry.candidates] @ h_star.data
        entry.scores = (1.0 / (1.0 + np.exp(-logits))).tolist()
    return task


def _inference_pref(g, user, hidden, params, rng, phase1, phase2):
    from .graph import full_neighborhood
    gcfg = GumbelConfig(tau0=params.config.tau0, eta=params.config.eta,
                        x=0, training=False)
    nbhd = full_neighborhood(g, user)
    sub = denoise_user(user, nbhd, hidden, params, gcfg, rng=rng,
                       random_phase1=(phase1 == "random"),
                       random_phase2=(phase2 == "random"),
                       keep_phase1=(phase1 == "keep"),
                       keep_phase2=(phase2 == "keep"))
    if sub.is_empty():
        return sub, None
    h_star_u, _ = refine_preference(user, sub, hidden, params)
    return sub, h_star_u


@dataclass
class TraceRow:
    epoch: int
    split: str
    auc: float | None
    ndcg: float | None
    hit: float | None
    map: float | None
    loss: float
    tau: float

    def csv(self):
        def f(v):
            return "" if v is None else f"{v:.10f}"
        return (f"{self.epoch},{self.split},{f(self.auc)},{f(self.ndcg)},"
                f"{f(self.hit)},{f(self.map)},{self.loss:.10f},{self.tau:.10f}")


TRACE_HEADER = "epoch,split,auc,ndcg@K,hit@K,map@K,loss,tau"


def train(g: TripartiteGraph, cfg: TrainConfig,
          valid_task: mt.EvalTask | None = None,
          phase1: str = "denoise", phase2: str = "denoise",
          concept_vectors=None, log=None):
    """Optimize the model on the training graph.

    Returns (params at best validation UAUC, list of TraceRow). With no
    validation task the final parameters are returned.
    """
    if phase1 not in PHASE_MODES or phase2 not in PHASE_MODES:
        raise ValueError(f"phase modes must be one of {PHASE_MODES}")
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams.init(g.n_users, g.n_items, g.n_concepts,
                              cfg.model_config(), rng,
                              concept_vectors=concept_vectors)
    opt = make_optimizer(cfg, params)
    trace: list[TraceRow] = []
    best = None  # (uauc, epoch, snapshot)
    x_counter = 0
    users_with_degree = [u for u in range(g.n_users) if g.user_items[u]]
    if not users_with_degree:
        raise ValueError("graph has no user with positive degree")

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(users_with_degree))
        epoch_loss, epoch_terms = 0.0, 0
        tau_last = cfg.tau0 * math.exp(-cfg.eta * x_counter)
        for start in range(0, len(order), cfg.batch_size):
            batch = [users_with_degree[i] for i in order[start:start + cfg.batch_size]]
            gcfg = GumbelConfig(tau0=cfg.tau0, eta=cfg.eta, x=x_counter,
                                training=True)
            tau_last = gcfg.tau
            hidden = warmup_pass(g, params, rng=rng, p=cfg.p)
            total = None
            for u in batch:
                nbhd = sample_neighborhood(g, u, cfg.p, rng,
                                           include_users=cfg.two_hop_users)
                positives = [(u, m) for m in nbhd.items]
                examples = [(m, y) for _, m, y in
                            sample_negatives(g, positives, rng)]
                loss_u, n_terms = loss_for_user(
                    u, nbhd, examples, hidden, params, gcfg, cfg.k, rng,
                    phase1=phase1, phase2=phase2, include_reg=False)
                if loss_u is None:
                    continue
                total = loss_u if total is None else total + loss_u
                epoch_terms += n_terms
            if total is None:
                x_counter += 1
                continue
            if cfg.lam > 0:
                total = total + Tensor(cfg.lam) * params.l2_penalty()
            loss_val = total.item()
            if not math.isfinite(loss_val):
                norms = {n: float(np.linalg.norm(t.data))
                         for n, t in params.named_tensors().items()}
                raise RuntimeError(
                    f"non-finite loss at minibatch {x_counter} "
                    f"(tau={gcfg.tau:.6g}, param norms={norms})")
            epoch_loss += loss_val
            opt.zero_grad()
            ad.backward(total)
            opt.step()
            x_counter += 1

        mean_loss = epoch_loss / max(1, epoch_terms)
        if valid_task is not None:
            report = _evaluate_split(g, params, valid_task, cfg, phase1, phase2)
            trace.append(TraceRow(epoch=epoch, split="valid", auc=report.uauc,
                                  ndcg=report.ndcg, hit=report.hit, map=report.map,
                                  loss=mean_loss, tau=tau_last))
            if log:
                log(f"epoch {epoch}: loss {mean_loss:.4f} tau {tau_last:.4f} "
                    f"valid {report.to_text()}")
            if report.uauc is not None and (best is None or report.uauc > best[0]):
                best = (report.uauc, epoch, _snapshot(params))
            elif best is not None and epoch - best[1] >= cfg.patience:
                break
        else:
            trace.append(TraceRow(epoch=epoch, split="train", auc=None, ndcg=None,
                                  hit=None, map=None, loss=mean_loss, tau=tau_last))
            if log:
                log(f"epoch {epoch}: loss {mean_loss:.4f} tau {tau_last:.4f}")

    if best is not None:
        _restore(params, best[2])
    params.assert_finite()
    return params, trace


def _snapshot(params: ModelParams):
    return {name: t.data.copy() for name, t in params.named_tensors().items()}


def _restore(params: ModelParams, snap):
    for name, t in params.named_tensors().items():
        t.data[...] = snap[name]


def _evaluate_split(g, params, task, cfg: TrainConfig, phase1, phase2):
    rng = np.random.default_rng(cfg.seed + 104729)
    for entry in task.users:
        entry.scores = None
    _score_task(g, params, task, rng=rng, phase1=phase1, phase2=phase2)
    return mt.evaluate(task, cfg.eval_k)


def run_ablation(g: TripartiteGraph, cfg: TrainConfig, variant: str,
                 valid_task: mt.EvalTask, test_task: mt.EvalTask, log=None):
    """Train one phase-ablation variant and evaluate it on the test task."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; "
                         f"expected one of {sorted(ABLATION_VARIANTS)}")
    phase1, phase2 = ABLATION_VARIANTS[variant]
    params, trace = train(g, cfg, valid_task=valid_task,
                          phase1=phase1, phase2=phase2, log=log)
    report = _evaluate_split(g, params, test_task, cfg, phase1, phase2)
    return params, trace, report
