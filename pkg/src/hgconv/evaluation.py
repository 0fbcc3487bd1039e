"""Metrics and interpretability exports.

Classification: macro/micro F1 with per-class precision and recall.
Clustering: seeded k-means++ on row-normalized embeddings, scored per
restart with ARI and NMI and averaged. NMI uses the arithmetic mean of
the two entropies as normalizer; mutual information is computed as
H(a) + H(b) - H(a,b) so identical partitions score exactly 1.

Attention export returns the last layer's head-averaged scores for one
focal node. pca_project is a power-method principal projection used for
2-D scatter files.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import _format_float
from .conv import model_forward

NMI_NORMALIZATION = "arithmetic mean of entropies"


@dataclass(frozen=True)
class EvalReport:
    macro_f1: float
    micro_f1: float
    ari: float
    nmi: float
    precision: tuple
    recall: tuple

    def to_dict(self):
        return {
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "ari": self.ari,
            "nmi": self.nmi,
            "precision": list(self.precision),
            "recall": list(self.recall),
        }


def _check_labels(pred, truth):
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(
            f"label arrays must be 1-D and equal length, got shapes "
            f"{pred.shape} and {truth.shape}")
    return pred, truth


def confusion_matrix(pred, truth, num_classes):
    """Counts indexed [true class, predicted class]."""
    pred, truth = _check_labels(pred, truth)
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes
                      or truth.min() < 0 or truth.max() >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (truth, pred), 1)
    return m


def classification_stats(pred, truth, num_classes):
    """(macro_f1, micro_f1, per-class precision, per-class recall).

    Classes absent from both pred and truth count as F1 = 0 in the
    macro average. Zero denominators give 0. Micro F1 reduces to plain
    accuracy for single-label predictions.
    """
    m = confusion_matrix(pred, truth, num_classes)
    n = int(m.sum())
    if n == 0:
        raise ValueError("empty input")
    tp = np.diag(m).astype(np.float64)
    pred_totals = m.sum(axis=0).astype(np.float64)
    true_totals = m.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_totals, out=np.zeros(num_classes),
                          where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros(num_classes),
                       where=true_totals > 0)
    denom = 2.0 * tp + (pred_totals - tp) + (true_totals - tp)
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(num_classes),
                   where=denom > 0)
    macro = float(f1.mean())
    micro = float(tp.sum() / n)
    return macro, micro, tuple(precision.tolist()), tuple(recall.tolist())


def f1_scores(pred, truth, num_classes):
    macro, micro, _, _ = classification_stats(pred, truth, num_classes)
    return macro, micro


def row_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0.0, norms, 1.0)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(embeddings, k, seed, restarts=10):
    """Row-normalize, then run `restarts` seeded k-means++ Lloyd loops.
    Returns an array (restarts, n) of assignments; callers score each
    restart and average."""
    x = row_normalize(embeddings)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    out = np.empty((restarts, n), dtype=np.int64)
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        centers = _kmeans_pp(x, k, rng)
        assign = None
        for _ in range(300):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_assign = np.argmin(d2, axis=1)
            if assign is not None and np.array_equal(new_assign, assign):
                break
            assign = new_assign
            for c in range(k):
                mask = assign == c
                if mask.any():
                    centers[c] = x[mask].mean(axis=0)
        out[r] = assign
    return out


def _contingency(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    m = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(m, (ai, bi), 1)
    return m


def _comb2(counts):
    counts = counts.astype(np.float64)
    return float((counts * (counts - 1.0) / 2.0).sum())


def ari(pred, truth):
    """Adjusted Rand index by pair counting. A zero adjustment range
    (e.g. both partitions trivial) scores 1."""
    pred, truth = _check_labels(pred, truth)
    if pred.size == 0:
        raise ValueError("empty input")
    if pred.size < 2:
        return 1.0
    m = _contingency(pred, truth)
    index = _comb2(m.ravel())
    sum_a = _comb2(m.sum(axis=1))
    sum_b = _comb2(m.sum(axis=0))
    total = pred.size * (pred.size - 1) / 2.0
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def _entropy(probs):
    probs = probs[probs > 0.0]
    return float(-(probs * np.log(probs)).sum())


def nmi(pred, truth):
    """Normalized mutual information, 2*I / (H(pred) + H(truth)), with
    I = H(pred) + H(truth) - H(joint)."""
    pred, truth = _check_labels(pred, truth)
    if pred.size == 0:
        raise ValueError("empty input")
    m = _contingency(pred, truth).astype(np.float64) / pred.size
    h_pred = _entropy(m.sum(axis=1))
    h_truth = _entropy(m.sum(axis=0))
    if h_pred == 0.0 and h_truth == 0.0:
        return 1.0
    info = max(h_pred + h_truth - _entropy(m.ravel()), 0.0)
    return min(2.0 * info / (h_pred + h_truth), 1.0)


def clustering_scores(embeddings, truth, k, seed, restarts=10):
    """Mean (ari, nmi) over k-means restarts."""
    assignments = kmeans(embeddings, k, seed, restarts=restarts)
    aris = [ari(a, truth) for a in assignments]
    nmis = [nmi(a, truth) for a in assignments]
    return float(np.mean(aris)), float(np.mean(nmis))


def evaluate(pred, truth, num_classes, embeddings=None, cluster_seed=0,
             restarts=10):
    """Full report. Clustering scores come from k-means with k equal to
    the class count on `embeddings` (skipped as 0.0 when not given)."""
    macro, micro, precision, recall = classification_stats(pred, truth,
                                                           num_classes)
    ari_v = nmi_v = 0.0
    if embeddings is not None:
        ari_v, nmi_v = clustering_scores(embeddings, truth, num_classes,
                                         cluster_seed, restarts=restarts)
    return EvalReport(macro_f1=macro, micro_f1=micro, ari=ari_v, nmi=nmi_v,
                      precision=precision, recall=recall)


@dataclass(frozen=True)
class AttentionRecord:
    """Head-averaged last-layer attention around one focal node."""
    node_type: str
    node_id: int
    relation_scores: tuple      # (relation name, beta)
    neighbor_scores: tuple      # (relation name, neighbor id, alpha)


def export_attention(g, cfg, params, node_id, type_name=None):
    """AttentionRecord for `node_id` of `type_name` (default: the
    labeled type). Errors on nodes connected to no relation."""
    type_name = type_name if type_name is not None else cfg.label_type
    t = g.type_by_name(type_name)
    if not 0 <= node_id < t.count:
        raise ValueError(f"node {node_id} out of range for type {t.name}")
    _, _, cap = model_forward(g, cfg, params, capture_attention=True)
    beta_cap = cap.get("beta", {}).get(t.id)
    if beta_cap is None:
        raise ValueError(f"type {t.name} is connected to no relation")
    rel_rows, node_rows, beta = beta_cap
    rows = np.flatnonzero(node_rows == node_id)
    if rows.size == 0:
        raise ValueError(
            f"node {node_id} of type {t.name} has no neighbors in any "
            "relation")
    relation_scores = []
    neighbor_scores = []
    for row in rows:
        rid = int(rel_rows[row])
        name = g.relation_name(rid)
        relation_scores.append((name, float(beta[row].mean())))
        src, dst, alpha = cap["alpha"][rid]
        for e in np.flatnonzero(dst == node_id):
            neighbor_scores.append((name, int(src[e]), float(alpha[e].mean())))
    return AttentionRecord(node_type=t.name, node_id=int(node_id),
                           relation_scores=tuple(relation_scores),
                           neighbor_scores=tuple(neighbor_scores))


def attention_tsv(record):
    """Relation rows first, then neighbor rows, tab-separated."""
    lines = [f"{name}\t{_format_float(beta)}"
             for name, beta in record.relation_scores]
    lines += [f"{name}\t{u}\t{_format_float(alpha)}"
              for name, u, alpha in record.neighbor_scores]
    return "\n".join(lines) + "\n"


def pca_project(embeddings, dims=2, seed=0):
    """Mean-centered projection onto the top principal directions,
    found by power iteration with deflation. Falls back to the actual
    rank with a warning when the data cannot fill `dims` directions."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be 2-D")
    n, d = x.shape
    if dims < 1:
        raise ValueError("dims must be >= 1")
    if n < dims:
        raise ValueError(f"need at least {dims} points, got {n}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(n - 1, 1)
    scale = max(float(np.trace(cov)), 1.0)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    components = []
    for _ in range(min(dims, d)):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(1000):
            w = cov @ v
            lam = float(v @ w)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                lam = 0.0
                break
            w /= norm
            if np.linalg.norm(w - v) < 1e-13:
                v = w
                break
            v = w
        if lam <= scale * 1e-12:
            break
        components.append(v)
        cov = cov - lam * np.outer(v, v)
    if len(components) < dims:
        warnings.warn(
            f"data rank {len(components)} is below the requested {dims} "
            "dimensions; returning fewer columns", RuntimeWarning)
    if not components:
        return np.zeros((n, 0))
    return centered @ np.stack(components, axis=1)


def metrics_json(report, config_echo):
    """metrics.json payload: report fields, config echo, and the NMI
    convention so scores are comparable."""
    doc = report.to_dict()
    doc["nmi_normalization"] = NMI_NORMALIZATION
    doc["config"] = config_echo
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def embeddings_tsv(node_ids, embeddings):
    x = np.asarray(embeddings, dtype=np.float64)
    lines = []
    for i, node in enumerate(node_ids):
        row = "\t".join(_format_float(v) for v in x[i])
        lines.append(f"{node}\t{row}")
    return "\n".join(lines) + "\n"


def projection_tsv(node_ids, xy, classes):
    xy = np.asarray(xy, dtype=np.float64)
    lines = []
    for i, node in enumerate(node_ids):
        coords = "\t".join(_format_float(v) for v in xy[i])
        lines.append(f"{node}\t{coords}\t{int(classes[i])}")
    return "\n".join(lines) + "\n"
