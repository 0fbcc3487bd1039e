"""Reference implementations used as baselines and as test oracles.

dense_oracle_layer recomputes one convolution layer with plain Python
loops and a naive softmax. It shares no aggregation code with conv.py,
so agreement between the two is evidence of correctness rather than of
copy-paste.

rgcn_mode_forward is the degenerate configuration where both attention
levels collapse to constants: neighbors are averaged (or symmetrically
normalized), per-relation projections are summed with unit weights, the
node transform is the identity, and the residual blend is fixed at one
half. Attention parameters play no part in it. dense_rgcn_oracle checks
it edge by edge.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .conv import LEAKY_SLOPE
from .evaluation import evaluate, f1_scores
from .train import DivergenceError


def _param_values(store, key):
    v = store[key]
    return v.values if hasattr(v, "values") else np.asarray(v, dtype=np.float64)


def _naive_softmax(scores):
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


def _leaky(x):
    return x if x >= 0.0 else LEAKY_SLOPE * x


def _act_scalar(name, x):
    if name == "relu":
        return x if x > 0.0 else 0.0
    if name == "elu":
        return x if x > 0.0 else math.exp(x) - 1.0
    return 1.0 / (1.0 + math.exp(-x))


def _matvec(m, x):
    return [sum(m[i][j] * x[j] for j in range(len(x))) for i in range(len(m))]


def dense_oracle_layer(g, h_prev, params, cfg, layer=1, capture=None):
    """One layer recomputed node by node. h_prev maps type id to a plain
    array; returns the same. Small graphs only.

    With `capture` (a dict), per-head attention lands under
    capture["alpha"][(relation id, v, u)] and
    capture["beta"][(type id, v, relation id)].
    """
    total = sum(t.count for t in g.node_types)
    if total > 100:
        raise ValueError("oracle is for small graphs (<= 100 nodes)")
    K, dh, width = cfg.heads, cfg.d_head, cfg.width

    def p(name):
        return _param_values(params, f"layer{layer}.{name}")

    out = {}
    for t in g.node_types:
        rows = []
        for v in range(t.count):
            summaries = []
            for r in g.relations:
                if r.dst_type != t.id:
                    continue
                neigh = g.neighbors(r.id, v)
                if neigh.size == 0:
                    continue
                src_name = g.node_types[r.src_type].name
                w_src = p(f"micro.W.{src_name}")
                z_us = [_matvec(w_src, h_prev[r.src_type][u]) for u in neigh]
                if cfg.no_micro:
                    alphas = [[1.0 / len(z_us)] * len(z_us) for _ in range(K)]
                else:
                    z_v = _matvec(p(f"micro.W.{t.name}"), h_prev[t.id][v])
                    a = p(f"micro.a.{src_name}")
                    alphas = []
                    for k in range(K):
                        scores = []
                        for z_u in z_us:
                            s = 0.0
                            for j in range(dh):
                                s += a[k][j] * z_v[k * dh + j]
                                s += a[k][dh + j] * z_u[k * dh + j]
                            scores.append(_leaky(s))
                        alphas.append(_naive_softmax(scores))
                if capture is not None:
                    for i, u in enumerate(neigh):
                        capture.setdefault("alpha", {})[(r.id, v, int(u))] = [
                            alphas[k][i] for k in range(K)]
                c = [0.0] * width
                for k in range(K):
                    for j in range(dh):
                        s = 0.0
                        for i, z_u in enumerate(z_us):
                            s += alphas[k][i] * z_u[k * dh + j]
                        c[k * dh + j] = _act_scalar(cfg.activation, s)
                summaries.append((r.id, c))
            if not summaries:
                h_tilde = [0.0] * width
            else:
                projected = [
                    _matvec(p(f"macro.M.{g.relation_name(rid)}"), c)
                    for rid, c in summaries]
                if cfg.no_macro:
                    betas = [[1.0 / len(projected)] * len(projected)
                             for _ in range(K)]
                else:
                    h_proj = _matvec(p(f"macro.U.{t.name}"), h_prev[t.id][v])
                    mu = p("macro.mu")
                    betas = []
                    for k in range(K):
                        scores = []
                        for cp in projected:
                            s = 0.0
                            for j in range(dh):
                                s += mu[k][j] * h_proj[k * dh + j]
                                s += mu[k][dh + j] * cp[k * dh + j]
                            scores.append(_leaky(s))
                        betas.append(_naive_softmax(scores))
                if capture is not None:
                    for i, (rid, _) in enumerate(summaries):
                        capture.setdefault("beta", {})[(t.id, v, rid)] = [
                            betas[k][i] for k in range(K)]
                h_tilde = [0.0] * width
                for k in range(K):
                    for j in range(dh):
                        s = 0.0
                        for i, cp in enumerate(projected):
                            s += betas[k][i] * cp[k * dh + j]
                        h_tilde[k * dh + j] = s
            if cfg.no_wrc:
                rows.append(h_tilde)
            else:
                lam = 1.0 / (1.0 + math.exp(-p(f"res.gate.{t.name}")[0]))
                own = _matvec(p(f"res.Wo.{t.name}"), h_prev[t.id][v])
                rows.append([lam * own[i] + (1.0 - lam) * h_tilde[i]
                             for i in range(width)])
        out[t.id] = np.asarray(rows, dtype=np.float64).reshape(t.count, width)
    return out


NORMALIZATIONS = ("mean", "symmetric")


@dataclass(frozen=True)
class RgcnModeConfig:
    """Switches for the degenerate constant-attention configuration.

    Only `normalization` is a real choice; the rest records what the
    reduction fixes and is not configurable.
    """
    enabled: bool = True
    normalization: str = "mean"
    identity_transform: bool = True
    uniform_micro: bool = True
    unit_macro_weights: bool = True
    residual_weight: float = 0.5

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if not (self.identity_transform and self.uniform_micro
                and self.unit_macro_weights and self.residual_weight == 0.5):
            raise ValueError("reduction behavior switches are fixed")


def relation_matrices(g, source, layer=1):
    """Normalize the per-relation matrix argument to {relation id: array}.

    Accepts a parameter store (only the per-relation projections are
    read from it) or a mapping keyed by relation id or relation name.
    """
    if isinstance(source, ad.ParamStore):
        return {r.id: _param_values(source, f"layer{layer}.macro.M.{g.relation_name(r.id)}")
                for r in g.relations}
    by_name = {g.relation_name(r.id): r.id for r in g.relations}
    out = {}
    for key, m in source.items():
        if isinstance(key, str):
            if key not in by_name:
                raise KeyError(f"unknown relation {key!r}")
            rid = by_name[key]
        else:
            rid = int(key)
            if not 0 <= rid < len(g.relations):
                raise KeyError(f"relation id {rid} out of range")
        out[rid] = np.asarray(m.values if hasattr(m, "values") else m,
                              dtype=np.float64)
    return out


def _edge_weights(g, relation_id, normalization):
    src, dst = g.edges(relation_id)
    deg_in = g.in_degrees(relation_id)
    if normalization == "mean":
        return src, dst, 1.0 / deg_in[dst]
    n_src = g.node_types[g.relations[relation_id].src_type].count
    deg_out = np.bincount(src, minlength=n_src)
    return src, dst, 1.0 / np.sqrt(deg_in[dst] * deg_out[src])


def rgcn_mode_forward(g, h_prev, matrices, cfg, layer=1):
    """Constant-attention propagation:
    out_v = 0.5 * h_v + 0.5 * sum_R M_R (normalized sum of h_u).

    `matrices` is anything relation_matrices accepts; attention and gate
    parameters in a full store are ignored by construction.
    """
    if not cfg.enabled:
        raise ValueError("rgcn mode is disabled in this config")
    mats = relation_matrices(g, matrices, layer)
    out = {}
    for t in g.node_types:
        h_v = np.asarray(h_prev[t.id], dtype=np.float64)
        acc = np.zeros_like(h_v)
        for r in g.relations:
            if r.dst_type != t.id:
                continue
            src, dst, weights = _edge_weights(g, r.id, cfg.normalization)
            if src.size == 0:
                continue
            h_src = np.asarray(h_prev[r.src_type], dtype=np.float64)
            pooled = np.zeros((t.count, h_src.shape[1]))
            np.add.at(pooled, dst, weights[:, None] * h_src[src])
            acc += pooled @ mats[r.id].T
        out[t.id] = 0.5 * h_v + 0.5 * acc
    return out


def dense_rgcn_oracle(g, h_prev, matrices, cfg, layer=1):
    """Same propagation, one edge at a time."""
    mats = relation_matrices(g, matrices, layer)
    out = {}
    for t in g.node_types:
        h_v = np.asarray(h_prev[t.id], dtype=np.float64)
        n, d = h_v.shape
        acc = [[0.0] * d for _ in range(n)]
        for r in g.relations:
            if r.dst_type != t.id:
                continue
            src, dst = g.edges(r.id)
            deg_in = g.in_degrees(r.id)
            n_src = g.node_types[r.src_type].count
            deg_out = np.bincount(src, minlength=n_src)
            m = mats[r.id]
            h_src = np.asarray(h_prev[r.src_type], dtype=np.float64)
            for e in range(src.size):
                u, v = src[e], dst[e]
                if cfg.normalization == "mean":
                    w = 1.0 / deg_in[v]
                else:
                    w = 1.0 / math.sqrt(deg_in[v] * deg_out[u])
                for i in range(d):
                    s = 0.0
                    for j in range(h_src.shape[1]):
                        s += m[i][j] * h_src[u][j]
                    acc[v][i] += w * s
        res = np.empty((n, d))
        for v in range(n):
            for i in range(d):
                res[v][i] = 0.5 * h_v[v][i] + 0.5 * acc[v][i]
        out[t.id] = res
    return out


def _mlp_forward(x, params):
    hidden = ad.relu(ad.add(ad.linear(x, params["mlp.W1"]), params["mlp.b1"]))
    logits = ad.add(ad.linear(hidden, params["mlp.W2"]), params["mlp.b2"])
    return hidden, logits


def mlp_baseline(attrs, labels, split, model_cfg, train_cfg):
    """Structure-blind control: a two-layer perceptron (hidden width
    equal to the convolution width, ReLU, biases) on the labeled type's
    raw attributes, trained with the same Adam/early-stopping rules.
    Returns the test-set EvalReport; clustering runs on the test rows'
    hidden activations."""
    x = np.asarray(attrs, dtype=np.float64)
    split.check_against(labels)
    classes = np.full(x.shape[0], -1, dtype=np.int64)
    classes[labels.ids] = labels.classes
    width = model_cfg.layers[0].width
    num_classes = model_cfg.num_classes
    d = x.shape[1]

    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
    lim1 = math.sqrt(6.0 / (d + width))
    lim2 = math.sqrt(6.0 / (width + num_classes))
    params = ad.ParamStore()
    params["mlp.W1"] = rng.uniform(-lim1, lim1, size=(width, d))
    params["mlp.b1"] = np.zeros((1, width))
    params["mlp.W2"] = rng.uniform(-lim2, lim2, size=(num_classes, width))
    params["mlp.b2"] = np.zeros((1, num_classes))
    adam = ad.AdamState(params, lr=train_cfg.lr)

    x_train = np.ascontiguousarray(x[split.train])
    y_train = classes[split.train]
    best_params = params.copy()
    best_metric = None
    stall = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        try:
            with ad.Tape() as tape:
                tape.watch(params)
                _, logits = _mlp_forward(ad.Tensor(x_train), params)
                loss = ad.cross_entropy_sum(logits, y_train)
            grads = ad.backward(tape, loss)
            ad.adam_step(params, grads, adam)
            _, val_logits = _mlp_forward(ad.Tensor(x[split.val]), params)
        except ad.NonFiniteError as exc:
            raise DivergenceError(epoch) from exc
        pred = np.argmax(val_logits.values, axis=1)
        metric, _ = f1_scores(pred, classes[split.val], num_classes)
        if best_metric is None or metric > best_metric:
            best_metric = metric
            best_params = params.copy()
            stall = 0
        else:
            stall += 1
            if stall >= train_cfg.patience:
                break

    hidden, logits = _mlp_forward(ad.Tensor(x[split.test]), best_params)
    pred = np.argmax(logits.values, axis=1)
    return evaluate(pred, classes[split.test], num_classes,
                    embeddings=hidden.values, cluster_seed=train_cfg.seed)
