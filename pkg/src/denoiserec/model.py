"""Three-phase graph model: warm-up propagation, personalized denoising,
preference refinement, and click-score prediction.

All forward math runs on the autodiff engine so the training loss is
differentiable end to end, including the relaxed weights of the discrete
neighbor selection.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import TripartiteGraph, SampledNeighborhood, full_neighborhood


@dataclass
class ModelConfig:
    d: int = 128
    n1: int = 6          # retained one-hop items
    n2: int = 10         # retained two-hop neighbors per item
    k: int = 4           # denoised subgraphs per user in the loss
    lam: float = 1e-5    # L2 coefficient
    tau0: float = 10.0
    eta: float = 2e-4
    p: int = 40          # neighbor sampling budget
    user_budget: int | None = None  # two-hop co-click user budget, defaults to p
    two_hop_users: bool = False     # mix co-click users into two-hop candidates
    freeze_concepts: bool = False


@dataclass
class GumbelConfig:
    tau0: float = 10.0
    eta: float = 2e-4
    x: int = 0           # minibatch counter
    training: bool = True

    @property
    def tau(self) -> float:
        return self.tau0 * math.exp(-self.eta * self.x)


@dataclass
class AttentionLayer:
    W: Tensor   # (d, d)
    a: Tensor   # (2d,)


@dataclass
class GRUCell:
    Wz: Tensor
    Uz: Tensor
    bz: Tensor
    Wr: Tensor
    Ur: Tensor
    br: Tensor
    Wh: Tensor
    Uh: Tensor
    bh: Tensor

    def tensors(self):
        return [self.Wz, self.Uz, self.bz, self.Wr, self.Ur, self.br,
                self.Wh, self.Uh, self.bh]


def _row(t: Tensor, i: int) -> Tensor:
    return ad.gather(t, np.asarray(i, dtype=np.intp))


class ModelParams:
    """All learnable tensors plus hyperparameters."""

    ATT_LAYERS = ("concept_item", "item_user", "user_item")

    def __init__(self, user_emb, item_emb, concept_emb, layers, gru, w_denoise,
                 config: ModelConfig):
        self.user_emb = user_emb
        self.item_emb = item_emb
        self.concept_emb = concept_emb
        self.layers = layers  # name -> AttentionLayer
        self.gru = gru
        self.w_denoise = w_denoise
        self.config = config

    @classmethod
    def init(cls, n_users: int, n_items: int, n_concepts: int,
             config: ModelConfig, rng: np.random.Generator,
             concept_vectors: np.ndarray | None = None) -> "ModelParams":
        d = config.d
        bound = 1.0 / math.sqrt(d)

        def u(*shape):
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        user_emb = u(n_users, d)
        item_emb = u(n_items, d)
        if concept_vectors is not None:
            if concept_vectors.shape != (n_concepts, d):
                raise ValueError(f"concept vectors shape {concept_vectors.shape} "
                                 f"does not match ({n_concepts}, {d})")
            concept_emb = Tensor(np.array(concept_vectors, dtype=np.float64),
                                 requires_grad=not config.freeze_concepts)
        else:
            concept_emb = u(n_concepts, d)
            concept_emb.requires_grad = not config.freeze_concepts
            if config.freeze_concepts:
                concept_emb.grad = None
        layers = {name: AttentionLayer(W=u(d, d), a=u(2 * d)) for name in cls.ATT_LAYERS}
        gru = GRUCell(
            Wz=u(d, d), Uz=u(d, d), bz=Tensor(np.zeros(d), requires_grad=True),
            Wr=u(d, d), Ur=u(d, d), br=Tensor(np.zeros(d), requires_grad=True),
            Wh=u(d, d), Uh=u(d, d), bh=Tensor(np.zeros(d), requires_grad=True),
        )
        return cls(user_emb, item_emb, concept_emb, layers, gru, u(d), config)

    def named_tensors(self):
        out = {"user_emb": self.user_emb, "item_emb": self.item_emb,
               "concept_emb": self.concept_emb, "w_denoise": self.w_denoise}
        for name, layer in self.layers.items():
            out[f"att_{name}_W"] = layer.W
            out[f"att_{name}_a"] = layer.a
        for field_name, t in zip(("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh"),
                                 self.gru.tensors()):
            out[f"gru_{field_name}"] = t
        return out

    def trainable(self):
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def zero_grad(self):
        for t in self.trainable():
            t.zero_grad()

    def l2_penalty(self) -> Tensor:
        total = Tensor(0.0)
        for t in self.trainable():
            total = total + ad.sum_all(ad.mul(t, t))
        return total

    def assert_finite(self):
        for name, t in self.named_tensors().items():
            if not np.all(np.isfinite(t.data)):
                raise RuntimeError(f"non-finite values in parameter {name}")

    def save(self, path: str):
        arrays = {name: t.data for name, t in self.named_tensors().items()}
        arrays["_config"] = np.frombuffer(
            json.dumps(asdict(self.config)).encode("utf-8"), dtype=np.uint8)
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            np.savez(f, **arrays)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "ModelParams":
        with np.load(path) as z:
            cfg = ModelConfig(**json.loads(bytes(z["_config"]).decode("utf-8")))
            get = lambda name: np.array(z[name], dtype=np.float64)
            layers = {name: AttentionLayer(W=Tensor(get(f"att_{name}_W"), True),
                                           a=Tensor(get(f"att_{name}_a"), True))
                      for name in cls.ATT_LAYERS}
            gru = GRUCell(**{f: Tensor(get(f"gru_{f}"), True)
                             for f in ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")})
            concept_emb = Tensor(get("concept_emb"),
                                 requires_grad=not cfg.freeze_concepts)
            return cls(Tensor(get("user_emb"), True), Tensor(get("item_emb"), True),
                       concept_emb, layers, gru, Tensor(get("w_denoise"), True), cfg)


class _Rows:
    """List-like view over the rows of a matrix tensor.

    Row tensors are cached so repeated lookups share one graph node and
    their gradients accumulate into the same gather.
    """

    def __init__(self, mat: Tensor):
        self.mat = mat
        self._cache: dict = {}

    def __len__(self):
        return self.mat.data.shape[0]

    def __getitem__(self, i: int) -> Tensor:
        row = self._cache.get(i)
        if row is None:
            row = ad.gather(self.mat, np.asarray(i, dtype=np.intp))
            self._cache[i] = row
        return row

    def __iter__(self):
        return (self[i] for i in range(len(self)))


class HiddenStates:
    """Warm-up hidden states, stored as (n, d) matrices."""

    def __init__(self, item_mat: Tensor, user_mat: Tensor):
        self.item_mat = item_mat
        self.user_mat = user_mat
        self.h_item = _Rows(item_mat)
        self.h_user = _Rows(user_mat)


@dataclass
class DenoisedSubgraph:
    user: int
    items: list                     # retained one-hop item indices
    item_candidates: list
    item_scores: np.ndarray | None  # s over one-hop candidates
    item_weights: Tensor | None     # renormalized pi over retained items
    two_hop: dict = field(default_factory=dict)
    # per retained item: dict with keys
    #   retained: list of ("concept"|"user", index)
    #   candidates, scores (np or None), weights (Tensor or None)
    tau: float = 0.0

    def is_empty(self) -> bool:
        return not self.items


def attention_aggregate(center_emb: Tensor, neighbors: Tensor,
                        layer: AttentionLayer, weights: Tensor | None = None,
                        return_alpha: bool = False):
    """Attention-weighted neighbor aggregation.

    ``neighbors`` is an (n, d) matrix with n >= 1. Optional ``weights``
    (length n, or length of the retained set) modulate the attention
    probabilities multiplicatively and are renormalized.
    """
    d = center_emb.data.shape[0]
    a_center = ad.gather(layer.a, np.arange(d))
    a_nbr = ad.gather(layer.a, np.arange(d, 2 * d))
    logits = ad.leaky_relu(ad.dot(a_center, center_emb) + ad.matmul(neighbors, a_nbr))
    alpha = ad.softmax(logits)
    if weights is not None:
        alpha = ad.mul(alpha, weights)
        alpha = ad.div(alpha, ad.sum_all(alpha))
    pooled = ad.matmul(alpha, neighbors)
    out = ad.leaky_relu(ad.matmul(layer.W, pooled))
    if return_alpha:
        return out, alpha
    return out


def attention_step(center_mat: Tensor, nbr_mat: Tensor,
                   src: np.ndarray, dst: np.ndarray, n_out: int,
                   layer: AttentionLayer, fallback: Tensor,
                   weights: Tensor | None = None) -> Tensor:
    """Attention aggregation for a whole node set in one pass.

    ``src``/``dst`` are parallel edge arrays: neighbor row in ``nbr_mat``
    and destination row in the (n_out, d) output. Destinations with no
    edges take their row from ``fallback``. Optional edge ``weights``
    modulate the per-destination attention and are renormalized, exactly
    as in :func:`attention_aggregate`.
    """
    d = center_mat.data.shape[1]
    a_center = ad.gather(layer.a, np.arange(d))
    a_nbr = ad.gather(layer.a, np.arange(d, 2 * d))
    logits = ad.leaky_relu(ad.add(ad.gather(ad.matmul(center_mat, a_center), dst),
                                  ad.gather(ad.matmul(nbr_mat, a_nbr), src)))
    alpha = ad.segment_softmax(logits, dst, n_out)
    if weights is not None:
        aw = ad.mul(alpha, weights)
        alpha = ad.div(aw, ad.gather(ad.segment_sum(aw, dst, n_out), dst))
    pooled = ad.segment_sum(ad.scale_rows(ad.gather(nbr_mat, src), alpha),
                            dst, n_out)
    out = ad.leaky_relu(ad.matmul(pooled, ad.transpose(layer.W)))
    has = np.zeros(n_out)
    has[dst] = 1.0
    if has.all():
        return out
    return ad.add(ad.scale_rows(out, Tensor(has)),
                  ad.scale_rows(fallback, Tensor(1.0 - has)))


def gru_compose(state: Tensor, x: Tensor, gru: GRUCell) -> Tensor:
    """Standard GRU cell; accepts (d,) vectors or (n, d) row batches."""
    if x.data.ndim == 1:
        z = ad.sigmoid(ad.matmul(gru.Wz, x) + ad.matmul(gru.Uz, state) + gru.bz)
        r = ad.sigmoid(ad.matmul(gru.Wr, x) + ad.matmul(gru.Ur, state) + gru.br)
        h_tilde = ad.tanh(ad.matmul(gru.Wh, x) + ad.matmul(gru.Uh, ad.mul(r, state))
                          + gru.bh)
    else:
        WzT, UzT = ad.transpose(gru.Wz), ad.transpose(gru.Uz)
        WrT, UrT = ad.transpose(gru.Wr), ad.transpose(gru.Ur)
        WhT, UhT = ad.transpose(gru.Wh), ad.transpose(gru.Uh)
        z = ad.sigmoid(ad.add_bias(ad.matmul(x, WzT) + ad.matmul(state, UzT), gru.bz))
        r = ad.sigmoid(ad.add_bias(ad.matmul(x, WrT) + ad.matmul(state, UrT), gru.br))
        h_tilde = ad.tanh(ad.add_bias(
            ad.matmul(x, WhT) + ad.matmul(ad.mul(r, state), UhT), gru.bh))
    one = Tensor(1.0)
    return ad.add(ad.mul(ad.sub(one, z), state), ad.mul(z, h_tilde))


def retention_scores(f: Tensor, w: Tensor) -> Tensor:
    """Softmax retention likelihoods from relevance rows (n, d)."""
    return ad.softmax(ad.matmul(f, w))


def gumbel_top_n(s: Tensor, n: int, tau: float, training: bool,
                 rng: np.random.Generator | None = None):
    """Sample-without-replacement top-n selection with a relaxed weight path.

    Training: perturb the tempered log-scores ln(s)/tau with Gumbel noise
    once and keep the n largest; the returned weights are the softmax of
    those same perturbed logits, so the hard selection is exactly their
    top-n. At tau=1 the selection law is the score distribution itself;
    as tau shrinks the draw degenerates to the deterministic top-n by
    score. Inference: deterministic top-n by score; weights are the
    scores renormalized over the retained set. Returns
    (retained candidate positions, weights Tensor).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    count = s.data.shape[0]
    logs = ad.log(ad.clamp_min(s, ad.LOG_CLAMP))
    if training:
        if rng is None:
            raise ValueError("training-mode sampling needs an rng")
        uni = rng.uniform(size=count)
        noise = -np.log(-np.log(uni))
        keys = logs.data / tau + noise
        retained = sorted(np.argsort(-keys, kind="stable")[:min(n, count)].tolist())
        pi = ad.softmax(ad.add(ad.mul(logs, Tensor(1.0 / tau)), Tensor(noise)))
        return retained, pi
    order = np.argsort(-s.data, kind="stable")
    retained = sorted(order[:min(n, count)].tolist())
    kept = ad.gather(s, retained)
    return retained, ad.div(kept, ad.sum_all(kept))


def retained_weights(s: Tensor, retained: list) -> Tensor:
    """Relevance scores renormalized over the retained set.

    Used to modulate attention over the retained neighbors in both
    training and inference, keeping the scorer on the gradient path with
    no train/serve mismatch; the stochasticity of training lives entirely
    in which candidates get retained.
    """
    kept = ad.gather(s, retained)
    return ad.div(kept, ad.sum_all(kept))


def warmup_pass(g: TripartiteGraph, params: ModelParams,
                rng: np.random.Generator | None = None,
                p: int | None = None) -> HiddenStates:
    """Warm-up propagation over (optionally sampled) adjacency.

    Three attention aggregations in sequence: concepts into items, items
    into users, then users back into items. A node with no neighbors at a
    step keeps its previous hidden state (its embedding for step one).
    """

    def pick(pool):
        if p is None or len(pool) <= p:
            return pool
        chosen = rng.choice(len(pool), size=p, replace=False)
        return [pool[i] for i in sorted(chosen)]

    def flatten(adj):
        src, dst = [], []
        for i, pool in enumerate(adj):
            sel = pick(pool)
            src.extend(sel)
            dst.extend([i] * len(sel))
        return (np.asarray(src, dtype=np.intp),
                np.asarray(dst, dtype=np.intp))

    src, dst = flatten(g.item_concepts)
    h_item1 = attention_step(params.item_emb, params.concept_emb, src, dst,
                             g.n_items, params.layers["concept_item"],
                             fallback=params.item_emb)
    src, dst = flatten(g.user_items)
    h_user = attention_step(params.user_emb, h_item1, src, dst,
                            g.n_users, params.layers["item_user"],
                            fallback=params.user_emb)
    src, dst = flatten(g.item_users)
    h_item = attention_step(params.item_emb, h_user, src, dst,
                            g.n_items, params.layers["user_item"],
                            fallback=h_item1)
    return HiddenStates(item_mat=h_item, user_mat=h_user)


def denoise_user(user: int, nbhd: SampledNeighborhood, hidden: HiddenStates,
                 params: ModelParams, cfg: GumbelConfig,
                 rng: np.random.Generator | None = None,
                 random_phase1: bool = False,
                 random_phase2: bool = False,
                 keep_phase1: bool = False,
                 keep_phase2: bool = False) -> DenoisedSubgraph:
    """Two-phase breadth-first denoising of a user's neighborhood.

    Phase 1 retains up to n1 one-hop items; phase 2 retains up to n2
    two-hop neighbors (concepts by default) per retained item. The random
    flags replace the learned selection of a phase with uniform sampling;
    the keep flags disable selection in a phase entirely (used by the
    single-phase ablations).
    """
    mc = params.config
    candidates = list(nbhd.items)
    if not candidates:
        return DenoisedSubgraph(user=user, items=[], item_candidates=[],
                                item_scores=None, item_weights=None, tau=cfg.tau)

    n_cand = len(candidates)
    f_items = None
    if keep_phase1:
        retained_loc = list(range(n_cand))
        s_np, weights = None, None
    elif random_phase1:
        keep = min(mc.n1, n_cand)
        retained_loc = sorted(rng.choice(n_cand, size=keep, replace=False).tolist()) \
            if keep < n_cand else list(range(n_cand))
        s_np, weights = None, None
    else:
        x = ad.gather(hidden.item_mat, candidates)
        state = ad.gather(hidden.user_mat, [user] * n_cand)
        f_items = gru_compose(state, x, params.gru)
        s = retention_scores(f_items, params.w_denoise)
        retained_loc, _ = gumbel_top_n(s, mc.n1, cfg.tau, cfg.training, rng)
        s_np = s.data.copy()
        weights = retained_weights(s, retained_loc)

    sub = DenoisedSubgraph(
        user=user,
        items=[candidates[i] for i in retained_loc],
        item_candidates=candidates,
        item_scores=s_np,
        item_weights=weights,
        tau=cfg.tau,
    )

    for loc, m in zip(retained_loc, sub.items):
        cand2 = [("concept", c) for c in nbhd.item_concepts.get(m, ())]
        if mc.two_hop_users:
            cand2 += [("user", v) for v in nbhd.item_users.get(m, ())]
        entry = {"candidates": cand2, "retained": [], "scores": None, "weights": None}
        sub.two_hop[m] = entry
        if not cand2:
            continue
        if keep_phase2:
            entry["retained"] = list(cand2)
            continue
        if random_phase2:
            keep = min(mc.n2, len(cand2))
            locs = sorted(rng.choice(len(cand2), size=keep, replace=False).tolist()) \
                if keep < len(cand2) else list(range(len(cand2)))
            entry["retained"] = [cand2[i] for i in locs]
            continue
        if all(kind == "concept" for kind, _ in cand2):
            x2 = ad.gather(params.concept_emb, [idx for _, idx in cand2])
        else:
            x2 = ad.stack_rows([_row(params.concept_emb, idx) if kind == "concept"
                                else hidden.h_user[idx] for kind, idx in cand2])
        if f_items is not None:
            state2 = ad.gather(f_items, [loc] * len(cand2))
        else:
            # random phase 1 skipped the GRU; compose the state on demand
            f_m = gru_compose(hidden.h_user[user], hidden.h_item[m], params.gru)
            state2 = ad.stack_rows([f_m] * len(cand2))
        f_two = gru_compose(state2, x2, params.gru)
        s2 = retention_scores(f_two, params.w_denoise)
        locs, _ = gumbel_top_n(s2, mc.n2, cfg.tau, cfg.training, rng)
        entry["retained"] = [cand2[i] for i in locs]
        entry["scores"] = s2.data.copy()
        entry["weights"] = retained_weights(s2, locs)
    return sub


def refine_preference(user: int, sub: DenoisedSubgraph, hidden: HiddenStates,
                      params: ModelParams):
    """Re-aggregate over the denoised subgraph to get the refined user vector.

    Reuses the warm-up layer parameters. Retained neighbors selected by the
    learned scorer carry their renormalized relevance scores, which modulate
    the attention probabilities; this keeps the scorer on the gradient path
    during training and is applied identically at inference. Neighbors kept
    by the random / keep-everything phases carry no weights and fall back to
    plain attention.
    """
    if sub.is_empty():
        raise ValueError("cannot refine an empty subgraph")
    layer_ci = params.layers["concept_item"]
    layer_iu = params.layers["item_user"]

    concepts_only = all(kind == "concept"
                        for m in sub.items
                        for kind, _ in sub.two_hop.get(m, {}).get("retained", ()))
    if concepts_only:
        src, dst, weight_parts, modulated = [], [], [], False
        for j, m in enumerate(sub.items):
            entry = sub.two_hop.get(m, {})
            retained = entry.get("retained", ())
            if not retained:
                continue
            src.extend(idx for _, idx in retained)
            dst.extend([j] * len(retained))
            w = entry.get("weights")
            if w is not None:
                weight_parts.append(w)
                modulated = True
            else:
                weight_parts.append(Tensor(np.ones(len(retained))))
        centers = ad.gather(params.item_emb, sub.items)
        if not src:
            h_star_items = centers
        else:
            wflat = None
            if modulated:
                wflat = weight_parts[0]
                for part in weight_parts[1:]:
                    wflat = ad.concat(wflat, part)
            h_star_items = attention_step(
                centers, params.concept_emb,
                np.asarray(src, dtype=np.intp), np.asarray(dst, dtype=np.intp),
                len(sub.items), layer_ci, fallback=centers, weights=wflat)
    else:
        rows_out = []
        for m in sub.items:
            entry = sub.two_hop.get(m, {"retained": []})
            retained = entry["retained"]
            if not retained:
                rows_out.append(_row(params.item_emb, m))
                continue
            rows = [_row(params.concept_emb, idx) if kind == "concept"
                    else hidden.h_user[idx] for kind, idx in retained]
            weights = entry.get("weights")
            rows_out.append(attention_aggregate(
                _row(params.item_emb, m), ad.stack_rows(rows), layer_ci,
                weights=weights))
        h_star_items = ad.stack_rows(rows_out)

    h_star_u = attention_aggregate(_row(params.user_emb, user),
                                   h_star_items, layer_iu,
                                   weights=sub.item_weights)
    return h_star_u, h_star_items


def predict(h_star_u: Tensor, h_m: Tensor) -> Tensor:
    """Click probability for a (refined user, warm-up item) pair."""
    return ad.sigmoid(ad.dot(h_star_u, h_m))


def user_preference(g: TripartiteGraph, user: int, hidden: HiddenStates,
                    params: ModelParams,
                    rng: np.random.Generator | None = None,
                    random_phase1: bool = False,
                    random_phase2: bool = False):
    """Inference-mode denoise + refine for one user over the full graph."""
    cfg = GumbelConfig(tau0=params.config.tau0, eta=params.config.eta,
                       x=0, training=False)
    nbhd = full_neighborhood(g, user)
    sub = denoise_user(user, nbhd, hidden, params, cfg, rng=rng,
                       random_phase1=random_phase1, random_phase2=random_phase2)
    if sub.is_empty():
        return sub, None
    h_star_u, _ = refine_preference(user, sub, hidden, params)
    return sub, h_star_u


def load_concept_vectors(path: str, concept_texts: list, d: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Read a TSV of ``concept_text <tab> v1 ... vd`` rows.

    Concepts missing from the file fall back to random initialization.
    """
    table = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{ln}: expected 'text<TAB>v1 ... vd'")
            vec = np.array([float(v) for v in parts[1].split()])
            if vec.shape[0] != d:
                raise ValueError(f"{path}:{ln}: expected {d} components, "
                                 f"got {vec.shape[0]}")
            table[parts[0]] = vec
    bound = 1.0 / math.sqrt(d)
    out = rng.uniform(-bound, bound, size=(len(concept_texts), d))
    for i, text in enumerate(concept_texts):
        if text in table:
            out[i] = table[text]
    return out
