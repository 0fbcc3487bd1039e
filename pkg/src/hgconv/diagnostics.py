"""Gradient self-checks for every differentiable op and the full model.

Each case builds a scalar loss from one op (inputs drawn away from the
kinks of the piecewise activations so central differences stay valid)
and compares the tape gradient against finite differences. The model
case wires a complete two-layer network over a fixed small graph and
checks every named parameter.
"""

import numpy as np

from . import autodiff as ad
from . import hetgraph as hg
from .conv import LayerConfig, ModelConfig, init_params, model_forward

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, low=0.3, high=1.5):
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def _weighted(op, rng, shape):
    """Reduce `op(store)` to a scalar with a weight frozen at build time
    so the loss is a fixed function of the store."""
    w = ad.Tensor(rng.normal(size=shape))
    return lambda s: ad.sum_all(ad.mul(op(s), w))


def _case_matmul(rng, store):
    store["A"] = rng.normal(size=(3, 4))
    store["B"] = rng.normal(size=(4, 2))
    return _weighted(lambda s: ad.matmul(s["A"], s["B"]), rng, (3, 2))


def _case_linear(rng, store):
    store["x"] = rng.normal(size=(3, 4))
    store["W"] = rng.normal(size=(2, 4))
    return _weighted(lambda s: ad.linear(s["x"], s["W"]), rng, (3, 2))


def _case_add(rng, store):
    store["A"] = rng.normal(size=(3, 4))
    store["b"] = rng.normal(size=(1, 4))
    return _weighted(lambda s: ad.add(s["A"], s["b"]), rng, (3, 4))


def _case_add_const(rng, store):
    store["A"] = rng.normal(size=(3, 3))
    return _weighted(lambda s: ad.add_const(s["A"], 2.5), rng, (3, 3))


def _case_mul(rng, store):
    store["A"] = rng.normal(size=(3, 4))
    store["B"] = rng.normal(size=(3, 4))
    return _weighted(lambda s: ad.mul(s["A"], s["B"]), rng, (3, 4))


def _case_scale(rng, store):
    store["A"] = rng.normal(size=(2, 5))
    return _weighted(lambda s: ad.scale(s["A"], -1.75), rng, (2, 5))


def _case_concat_cols(rng, store):
    store["A"] = rng.normal(size=(3, 2))
    store["B"] = rng.normal(size=(3, 3))
    return _weighted(lambda s: ad.concat_cols([s["A"], s["B"]]), rng, (3, 5))


def _case_concat_rows(rng, store):
    store["A"] = rng.normal(size=(2, 3))
    store["B"] = rng.normal(size=(4, 3))
    return _weighted(lambda s: ad.concat_rows([s["A"], s["B"]]), rng, (6, 3))


def _case_row_select(rng, store):
    store["A"] = rng.normal(size=(5, 3))
    ids = rng.integers(0, 5, size=7)
    return _weighted(lambda s: ad.row_select(s["A"], ids), rng, (7, 3))


def _case_scatter_rows(rng, store):
    store["A"] = rng.normal(size=(3, 2))
    ids = np.asarray(rng.choice(6, size=3, replace=False))
    return _weighted(lambda s: ad.scatter_rows(s["A"], ids, 6), rng, (6, 2))


def _case_slice_cols(rng, store):
    store["A"] = rng.normal(size=(4, 6))
    return _weighted(lambda s: ad.slice_cols(s["A"], 1, 4), rng, (4, 3))


def _case_reshape(rng, store):
    store["A"] = rng.normal(size=(4, 6))
    return _weighted(lambda s: ad.reshape(s["A"], (2, 12)), rng, (2, 12))


def _case_sum_col_blocks(rng, store):
    store["A"] = rng.normal(size=(3, 8))
    return _weighted(lambda s: ad.sum_col_blocks(s["A"], 2), rng, (3, 4))


def _case_expand_col_blocks(rng, store):
    store["A"] = rng.normal(size=(3, 4))
    return _weighted(lambda s: ad.expand_col_blocks(s["A"], 3), rng, (3, 12))


def _case_relu(rng, store):
    store["A"] = _away_from_zero(rng, (4, 4))
    return _weighted(lambda s: ad.relu(s["A"]), rng, (4, 4))


def _case_leaky_relu(rng, store):
    store["A"] = _away_from_zero(rng, (4, 4))
    return _weighted(lambda s: ad.leaky_relu(s["A"], 0.2), rng, (4, 4))


def _case_elu(rng, store):
    store["A"] = _away_from_zero(rng, (4, 4))
    return _weighted(lambda s: ad.elu(s["A"]), rng, (4, 4))


def _case_sigmoid(rng, store):
    store["A"] = rng.normal(size=(4, 4))
    return _weighted(lambda s: ad.sigmoid(s["A"]), rng, (4, 4))


def _case_softplus(rng, store):
    store["A"] = rng.normal(size=(4, 4))
    return _weighted(lambda s: ad.softplus(s["A"]), rng, (4, 4))


def _case_dropout(rng, store):
    store["A"] = rng.normal(size=(6, 5))
    seed = int(rng.integers(0, 2 ** 31))
    return _weighted(lambda s: ad.dropout(s["A"], 0.4, seed, True), rng,
                     (6, 5))


def _case_segment_sum(rng, store):
    store["A"] = rng.normal(size=(7, 3))
    seg = np.sort(rng.integers(0, 4, size=7))
    return _weighted(lambda s: ad.segment_sum(s["A"], seg, 4), rng, (4, 3))


def _case_segment_softmax(rng, store):
    store["A"] = rng.normal(size=(7, 2))
    seg = np.sort(rng.integers(0, 3, size=7))
    seg[:3] = (0, 1, 2)  # keep every segment populated
    seg = np.sort(seg)
    return _weighted(lambda s: ad.segment_softmax(s["A"], seg, 3), rng,
                     (7, 2))


def _case_sum_all(rng, store):
    store["A"] = rng.normal(size=(3, 5))
    return lambda s: ad.sum_all(s["A"])


def _case_cross_entropy_sum(rng, store):
    store["A"] = rng.normal(size=(4, 3))
    labels = rng.integers(0, 3, size=4)
    return lambda s: ad.cross_entropy_sum(s["A"], labels)


OP_CASES = {
    "matmul": _case_matmul,
    "linear": _case_linear,
    "add": _case_add,
    "add_const": _case_add_const,
    "mul": _case_mul,
    "scale": _case_scale,
    "concat_cols": _case_concat_cols,
    "concat_rows": _case_concat_rows,
    "row_select": _case_row_select,
    "scatter_rows": _case_scatter_rows,
    "slice_cols": _case_slice_cols,
    "reshape": _case_reshape,
    "sum_col_blocks": _case_sum_col_blocks,
    "expand_col_blocks": _case_expand_col_blocks,
    "relu": _case_relu,
    "leaky_relu": _case_leaky_relu,
    "elu": _case_elu,
    "sigmoid": _case_sigmoid,
    "softplus": _case_softplus,
    "dropout": _case_dropout,
    "segment_sum": _case_segment_sum,
    "segment_softmax": _case_segment_softmax,
    "sum_all": _case_sum_all,
    "cross_entropy_sum": _case_cross_entropy_sum,
}


def _fixed_graph(rng):
    types = [hg.NodeType(0, "t0", 3, 2), hg.NodeType(1, "t1", 3, 2)]
    attrs = [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))]
    edges = [hg.Relation(0, 0, "e0", 1), hg.Relation(1, 1, "e1", 1)]
    adjacency = [
        hg._csr_from_edges([0, 1, 2, 0], [0, 0, 1, 2], 3),
        hg._csr_from_edges([0, 2, 1], [1, 1, 2], 3),
    ]
    return hg.add_inverse_relations(hg.HeteroGraph(types, edges, attrs,
                                                   adjacency))


def model_gradient_case(seed, eps=1e-5):
    """Max relative gradient error of a full 2-layer loss over every
    named parameter."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    g = _fixed_graph(rng)
    layer = LayerConfig(heads=2, d_head=1)
    cfg = ModelConfig(label_type="t1", num_classes=2, layers=(layer, layer))
    params = init_params(g, cfg, seed=seed)
    labels = np.asarray(rng.integers(0, 2, size=3))

    def loss_fn(p):
        _, logits, _ = model_forward(g, cfg, p)
        return ad.cross_entropy_sum(logits, labels)

    return ad.grad_check(loss_fn, params, eps=eps)


def _model_suite(seed, instances):
    """Model instances are drawn at random, so a relu or leaky-relu kink
    occasionally lands inside the difference interval; there the scheme
    measures the kink offset, not the gradient, and the apparent error
    grows like 1/eps. Such seeds are skipped, but only after a smaller
    eps confirms the growth; a genuinely wrong gradient plateaus under
    eps refinement and is never skipped."""
    worst = 0.0
    used = 0
    offset = 0
    while used < instances and offset < 4 * instances:
        err = model_gradient_case(seed + offset)
        offset += 1
        if err > TOLERANCE and model_gradient_case(seed + offset - 1,
                                                   eps=1e-6) >= 2.0 * err:
            continue
        worst = max(worst, err)
        used += 1
    return worst


def run_gradient_suite(seed=0, instances=5):
    """Max relative error per op plus the full-model case, as a dict."""
    results = {}
    for idx, (name, build) in enumerate(sorted(OP_CASES.items())):
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng(np.random.SeedSequence([seed, idx, i]))
            store = ad.ParamStore()
            loss_fn = build(rng, store)
            worst = max(worst, ad.grad_check(loss_fn, store, eps=1e-5))
        results[name] = worst
    results["model_2layer"] = _model_suite(seed, instances)
    return results
