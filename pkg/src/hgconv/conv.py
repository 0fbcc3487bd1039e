"""Hybrid two-level graph convolution.

Each layer runs three stages per destination node v:

1. micro: within every relation R, project nodes with type-specific
   matrices, score each neighbor u against v with the source-type
   attention vector, softmax over N_R(v) per head, and aggregate the
   projected neighbors (relation-level summary c_{v,R}).
2. macro: project v's previous state and each relation summary, score
   every connected relation with one attention vector shared across
   relations, softmax over R(v) per head, and aggregate the projected
   summaries into a single neighborhood vector.
3. residual: a per-type sigmoid gate blends the (aligned) previous
   state with the neighborhood vector.

Attention heads live side by side in one matrix: every projection has
K blocks of d_head columns, and attention vectors are stored (K, 2*d_head)
with the focal half first. Relations whose neighbor set is empty for a
node are excluded from that node's macro softmax; nodes connected to
nothing fall back to the residual path alone.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("relu", "elu", "sigmoid")
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class LayerConfig:
    heads: int = 8
    d_head: int = 8
    activation: str = "relu"
    attn_dropout: float = 0.0
    feat_dropout: float = 0.0
    no_micro: bool = False
    no_macro: bool = False
    no_wrc: bool = False

    def __post_init__(self):
        if self.heads < 1 or self.d_head < 1:
            raise ValueError("heads and d_head must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        for p in (self.attn_dropout, self.feat_dropout):
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout rates must be in [0, 1)")

    @property
    def width(self):
        return self.heads * self.d_head


@dataclass(frozen=True)
class ModelConfig:
    label_type: str
    num_classes: int
    layers: tuple = field(default_factory=lambda: (LayerConfig(), LayerConfig()))

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("at least one layer required")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def num_layers(self):
        return len(self.layers)

    def to_dict(self):
        return {
            "label_type": self.label_type,
            "num_classes": self.num_classes,
            "layers": [{f.name: getattr(layer, f.name) for f in fields(LayerConfig)}
                       for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, doc, label_type=None, num_classes=None):
        doc = dict(doc)
        layer_keys = {f.name for f in fields(LayerConfig)}
        allowed = {"label_type", "num_classes", "layers"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        layers = []
        for entry in doc.get("layers", ({}, {})):
            bad = set(entry) - layer_keys
            if bad:
                raise ValueError(f"unknown layer config keys: {sorted(bad)}")
            layers.append(LayerConfig(**entry))
        label = doc.get("label_type", label_type)
        classes = doc.get("num_classes", num_classes)
        if label is None or classes is None:
            raise ValueError("label_type and num_classes must be provided")
        return cls(label_type=str(label), num_classes=int(classes),
                   layers=tuple(layers))


def _xavier(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def input_dims(graph, cfg):
    """Per-type input width for every layer: attributes feed layer 1,
    each layer's output feeds the next."""
    dims = [{t.id: t.attr_dim for t in graph.node_types}]
    for layer in cfg.layers[:-1]:
        dims.append({t.id: layer.width for t in graph.node_types})
    return dims

def init_params(graph, cfg, seed):
    """Seeded parameter store covering every layer plus the classifier.

    Projections use uniform(+/- sqrt(6/(fan_in+fan_out))); gates start
    at 0 so the residual blend opens at one half. Ablated components get
    no parameters at all.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = ad.ParamStore()
    dims = input_dims(graph, cfg)
    for l, layer in enumerate(cfg.layers, start=1):
        w = layer.width
        d2 = 2 * layer.d_head
        for t in graph.node_types:
            d_in = dims[l - 1][t.id]
            params[f"layer{l}.micro.W.{t.name}"] = _xavier(rng, (w, d_in), d_in, w)
        if not layer.no_micro:
            for t in graph.node_types:
                params[f"layer{l}.micro.a.{t.name}"] = _xavier(
                    rng, (layer.heads, d2), d2, 1)
        if not layer.no_macro:
            for t in graph.node_types:
                d_in = dims[l - 1][t.id]
                params[f"layer{l}.macro.U.{t.name}"] = _xavier(rng, (w, d_in), d_in, w)
        for r in graph.relations:
            params[f"layer{l}.macro.M.{graph.relation_name(r.id)}"] = _xavier(
                rng, (w, w), w, w)
        if not layer.no_macro:
            params[f"layer{l}.macro.mu"] = _xavier(rng, (layer.heads, d2), d2, 1)
        if not layer.no_wrc:
            for t in graph.node_types:
                d_in = dims[l - 1][t.id]
                params[f"layer{l}.res.gate.{t.name}"] = np.zeros(1)
                params[f"layer{l}.res.Wo.{t.name}"] = _xavier(rng, (w, d_in), d_in, w)
    last = cfg.layers[-1].width
    params["classifier.W"] = _xavier(rng, (cfg.num_classes, last), last, cfg.num_classes)
    return params


def _activation(name, x):
    if name == "relu":
        return ad.relu(x)
    if name == "elu":
        return ad.elu(x)
    return ad.sigmoid(x)


def _split_attention_vector(vec, d_head, width):
    """(K, 2*d_head) -> two (1, K*d_head) rows: focal half, neighbor half."""
    left = ad.reshape(ad.slice_cols(vec, 0, d_head), (1, width))
    right = ad.reshape(ad.slice_cols(vec, d_head, 2 * d_head), (1, width))
    return left, right


def micro_conv(h_prev, g, relation_id, params, cfg, layer=1, train=False,
               dropout_seed=(0,), capture=None, z_cache=None):
    """Relation-level aggregation. Returns (c, present) where c has one
    row per destination node with at least one neighbor (listed in
    `present`), or (None, None) for an edge-free relation."""
    r = g.relations[relation_id]
    src_ids, dst_ids = g.edges(relation_id)
    if src_ids.size == 0:
        return None, None
    degrees = g.in_degrees(relation_id)
    present = np.flatnonzero(degrees > 0)
    seg = np.searchsorted(present, dst_ids)
    src_name = g.node_types[r.src_type].name
    dst_name = g.node_types[r.dst_type].name

    def projected(type_id, type_name):
        if z_cache is not None and type_id in z_cache:
            return z_cache[type_id]
        z = ad.linear(h_prev[type_id], params[f"layer{layer}.micro.W.{type_name}"])
        if z_cache is not None:
            z_cache[type_id] = z
        return z

    z_u = ad.row_select(projected(r.src_type, src_name), src_ids)
    if cfg.no_micro:
        uniform = (1.0 / degrees[dst_ids])[:, None] * np.ones((1, cfg.heads))
        alpha = ad.Tensor(uniform)
    else:
        z_v = ad.row_select(projected(r.dst_type, dst_name), dst_ids)
        a_vec = params[f"layer{layer}.micro.a.{src_name}"]
        a_focal, a_neigh = _split_attention_vector(a_vec, cfg.d_head, cfg.width)
        scores = ad.sum_col_blocks(
            ad.add(ad.mul(z_v, a_focal), ad.mul(z_u, a_neigh)), cfg.d_head)
        alpha = ad.segment_softmax(ad.leaky_relu(scores, LEAKY_SLOPE), seg, present.size)
    if capture is not None:
        capture.setdefault("alpha", {})[relation_id] = (
            src_ids, dst_ids, alpha.values.copy())
    if train and cfg.attn_dropout > 0.0:
        alpha = ad.dropout(alpha, cfg.attn_dropout,
                           list(dropout_seed) + [layer, 1, relation_id], train)
    weighted = ad.mul(ad.expand_col_blocks(alpha, cfg.d_head), z_u)
    agg = ad.segment_sum(weighted, seg, present.size)
    return _activation(cfg.activation, agg), present


def macro_conv(h_prev, c, g, params, cfg, layer=1, train=False,
               dropout_seed=(0,), capture=None):
    """Cross-relation aggregation. `c` maps relation id -> (tensor,
    present destination ids) from micro_conv. Returns per-type matrices;
    nodes connected to no relation get zero rows."""
    for rid in c:
        if rid >= len(g.relations):
            raise ValueError(f"relation id {rid} not in graph")
    h_tilde = {}
    for t in g.node_types:
        rids = [rid for rid in sorted(c) if g.relations[rid].dst_type == t.id]
        if not rids:
            h_tilde[t.id] = ad.Tensor(np.zeros((t.count, cfg.width)))
            continue
        projected, node_ids, rel_of_row = [], [], []
        for rid in rids:
            c_r, present = c[rid]
            m = params[f"layer{layer}.macro.M.{g.relation_name(rid)}"]
            projected.append(ad.linear(c_r, m))
            node_ids.append(present)
            rel_of_row.append(np.full(present.size, rid))
        stacked = ad.concat_rows(projected) if len(projected) > 1 else projected[0]
        rows_node = np.concatenate(node_ids)
        rows_rel = np.concatenate(rel_of_row)
        active = np.unique(rows_node)
        seg = np.searchsorted(active, rows_node)
        if cfg.no_macro:
            counts = np.bincount(seg, minlength=active.size)
            uniform = (1.0 / counts[seg])[:, None] * np.ones((1, cfg.heads))
            beta = ad.Tensor(uniform)
        else:
            u = params[f"layer{layer}.macro.U.{t.name}"]
            h_focal = ad.row_select(ad.linear(h_prev[t.id], u), rows_node)
            mu = params[f"layer{layer}.macro.mu"]
            mu_focal, mu_rel = _split_attention_vector(mu, cfg.d_head, cfg.width)
            scores = ad.sum_col_blocks(
                ad.add(ad.mul(h_focal, mu_focal), ad.mul(stacked, mu_rel)), cfg.d_head)
            beta = ad.segment_softmax(ad.leaky_relu(scores, LEAKY_SLOPE),
                                      seg, active.size)
        if capture is not None:
            capture.setdefault("beta", {})[t.id] = (
                rows_rel, rows_node, beta.values.copy())
        if train and cfg.attn_dropout > 0.0:
            beta = ad.dropout(beta, cfg.attn_dropout,
                              list(dropout_seed) + [layer, 2, t.id], train)
        weighted = ad.mul(ad.expand_col_blocks(beta, cfg.d_head), stacked)
        agg = ad.segment_sum(weighted, seg, active.size)
        h_tilde[t.id] = ad.scatter_rows(agg, active, t.count)
    return h_tilde


def weighted_residual(h_prev, h_tilde, g, params, layer=1):
    """Per-type gated blend: sigmoid(gate) * (Wo h_prev) + rest * h_tilde."""
    out = {}
    for t in g.node_types:
        gate = params[f"layer{layer}.res.gate.{t.name}"]
        lam = ad.sigmoid(gate)
        aligned = ad.linear(h_prev[t.id], params[f"layer{layer}.res.Wo.{t.name}"])
        rest = ad.add_const(ad.scale(lam, -1.0), 1.0)
        out[t.id] = ad.add(ad.mul(lam, aligned), ad.mul(rest, h_tilde[t.id]))
    return out


def layer_forward(h_prev, g, params, cfg, layer=1, train=False,
                  dropout_seed=(0,), capture=None):
    """One full layer: feature dropout, micro per relation, macro per
    type, then the residual blend (skipped under no_wrc)."""
    h = {}
    for t in g.node_types:
        h[t.id] = ad.dropout(h_prev[t.id], cfg.feat_dropout,
                             list(dropout_seed) + [layer, 0, t.id], train)
    z_cache = {}
    c = {}
    for r in g.relations:
        c_r, present = micro_conv(h, g, r.id, params, cfg, layer=layer, train=train,
                                  dropout_seed=dropout_seed, capture=capture,
                                  z_cache=z_cache)
        if c_r is not None:
            c[r.id] = (c_r, present)
    h_tilde = macro_conv(h, c, g, params, cfg, layer=layer, train=train,
                         dropout_seed=dropout_seed, capture=capture)
    if cfg.no_wrc:
        return h_tilde
    return weighted_residual(h, h_tilde, g, params, layer=layer)


def model_forward(g, cfg, params, train=False, dropout_seed=(0,),
                  capture_attention=False):
    """Stack all layers over the raw attributes.

    Returns (embeddings per type id, logits for the labeled type,
    attention capture from the last layer or None).
    """
    h = {t.id: ad.Tensor(g.attrs[t.id]) for t in g.node_types}
    captures = None
    last = len(cfg.layers)
    for l, layer_cfg in enumerate(cfg.layers, start=1):
        cap = {} if (capture_attention and l == last) else None
        h = layer_forward(h, g, params, layer_cfg, layer=l, train=train,
                          dropout_seed=dropout_seed, capture=cap)
        if cap is not None:
            captures = cap
    label_tid = g.type_by_name(cfg.label_type).id
    logits = ad.linear(h[label_tid], params["classifier.W"])
    return h, logits, captures
