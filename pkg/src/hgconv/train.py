"""Losses, negative sampling, and the full-batch training loop.

Strategies: `semi_supervised` is summed cross-entropy over labeled
training nodes; `unsupervised` is the skip-gram objective over observed
edges against per-epoch resampled negatives; `joint` mixes the two with
weight `joint_weight` (the untouched branch is skipped entirely at the
0/1 endpoints, so those runs are bit-identical to the pure strategies).

One Adam step per epoch on the whole graph. Early stopping tracks
validation Macro-F1 (semi_supervised/joint) or validation loss on a
fixed pair set (unsupervised); the returned parameters are a snapshot
of the best validation epoch, earliest on ties.
"""

from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .conv import init_params, model_forward
from .evaluation import f1_scores

STRATEGIES = ("semi_supervised", "unsupervised", "joint")


class DivergenceError(RuntimeError):
    """Raised when a training epoch produces a non-finite loss."""

    def __init__(self, epoch):
        super().__init__(f"training diverged at epoch {epoch}: non-finite loss")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 300
    patience: int = 100
    lr: float = 0.01
    dropout: float = 0.0
    seed: int = 0
    strategy: str = "semi_supervised"
    joint_weight: float = 0.5
    negatives: int = 5

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("patience must be in [1, max_epochs]")
        if not self.lr > 0.0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not 0.0 <= self.joint_weight <= 1.0:
            raise ValueError("joint_weight must be in [0, 1]")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(TrainConfig)}

    @classmethod
    def from_dict(cls, doc):
        allowed = {f.name for f in fields(TrainConfig)}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


def parse_config(doc, label_type=None, num_classes=None):
    """Split a config document into (ModelConfig, TrainConfig). Top-level
    keys other than "model" and "train" are rejected."""
    from .conv import ModelConfig
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    model = ModelConfig.from_dict(doc.get("model", {}), label_type=label_type,
                                  num_classes=num_classes)
    training = TrainConfig.from_dict(doc.get("train", {}))
    return model, training


@dataclass(frozen=True)
class PairGroup:
    """All positive and negative pairs drawn from one base relation."""
    relation_id: int
    src_type: int
    dst_type: int
    pos_src: np.ndarray
    pos_dst: np.ndarray
    neg_src: np.ndarray
    neg_dst: np.ndarray


@dataclass(frozen=True)
class PairSet:
    groups: tuple

    @property
    def num_positives(self):
        return sum(grp.pos_src.size for grp in self.groups)

    @property
    def num_negatives(self):
        return sum(grp.neg_src.size for grp in self.groups)


def sample_pairs(g, k, seed, epoch):
    """Positives are every edge of every base relation; each positive
    contributes k negatives with the source replaced by a uniformly
    random same-type non-neighbor of the destination. Deterministic per
    (seed, epoch)."""
    if k < 1:
        raise ValueError("negatives per positive must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    groups = []
    for r in g.relations:
        if r.is_inverse:
            continue
        src, dst = g.edges(r.id)
        if src.size == 0:
            continue
        n_src = g.node_types[r.src_type].count
        all_src = np.arange(n_src)
        neg_src_parts, neg_dst_parts = [], []
        for v in np.unique(dst):
            neighbors = g.neighbors(r.id, v)
            candidates = np.setdiff1d(all_src, neighbors, assume_unique=True)
            if candidates.size == 0:
                raise ValueError(
                    f"negative sampling impossible for relation "
                    f"{g.relation_name(r.id)}: node {v} is linked to every "
                    f"{g.node_types[r.src_type].name} node")
            count = k * neighbors.size
            draws = rng.integers(0, candidates.size, size=count)
            neg_src_parts.append(candidates[draws])
            neg_dst_parts.append(np.full(count, v))
        groups.append(PairGroup(
            relation_id=r.id, src_type=r.src_type, dst_type=r.dst_type,
            pos_src=src, pos_dst=dst,
            neg_src=np.concatenate(neg_src_parts),
            neg_dst=np.concatenate(neg_dst_parts)))
    if not groups:
        raise ValueError("graph has no edges to sample pairs from")
    return PairSet(groups=tuple(groups))


def semi_supervised_loss(logits, labels):
    """Summed softmax cross-entropy over the given rows."""
    return ad.cross_entropy_sum(logits, labels)


def _pair_dots(emb_src, emb_dst, src_ids, dst_ids):
    n_src = emb_src.values.shape[0]
    n_dst = emb_dst.values.shape[0]
    if src_ids.size and (src_ids.min() < 0 or src_ids.max() >= n_src
                         or dst_ids.min() < 0 or dst_ids.max() >= n_dst):
        raise ValueError("pair id out of range for the embedding matrix")
    width = emb_src.values.shape[1]
    rows = ad.mul(ad.row_select(emb_src, src_ids),
                  ad.row_select(emb_dst, dst_ids))
    return ad.sum_col_blocks(rows, width)


def unsupervised_loss(embeddings, pairs):
    """Skip-gram objective: -log sigmoid(dot) summed over positives plus
    -log sigmoid(-dot) over negatives, via softplus for stability."""
    if not pairs.groups:
        raise ValueError("empty pair set")
    total = None
    for grp in pairs.groups:
        emb_s = embeddings[grp.src_type]
        emb_d = embeddings[grp.dst_type]
        pos = _pair_dots(emb_s, emb_d, grp.pos_src, grp.pos_dst)
        neg = _pair_dots(emb_s, emb_d, grp.neg_src, grp.neg_dst)
        term = ad.add(ad.sum_all(ad.softplus(ad.scale(pos, -1.0))),
                      ad.sum_all(ad.softplus(neg)))
        total = term if total is None else ad.add(total, term)
    return total


@dataclass(frozen=True)
class TrainHistory:
    train_loss: tuple
    val_metric: tuple
    val_metric_name: str
    best_epoch: int
    stopped_epoch: int

    def to_tsv(self):
        lines = ["epoch\ttrain_loss\tval_metric"]
        for i, (loss, metric) in enumerate(zip(self.train_loss,
                                               self.val_metric), start=1):
            lines.append(f"{i}\t{ad._format_float(loss)}"
                         f"\t{ad._format_float(metric)}")
        return "\n".join(lines) + "\n"


def _training_model_config(model_cfg, dropout):
    if dropout <= 0.0:
        return model_cfg
    layers = tuple(replace(layer, attn_dropout=dropout, feat_dropout=dropout)
                   for layer in model_cfg.layers)
    return replace(model_cfg, layers=layers)


def _classes_by_id(g, labels, model_cfg):
    t = g.type_by_name(model_cfg.label_type)
    if labels.node_type != t.id:
        raise ValueError(
            f"labels are for type id {labels.node_type}, model expects "
            f"{t.name} (id {t.id})")
    table = np.full(t.count, -1, dtype=np.int64)
    table[labels.ids] = labels.classes
    return table


def train(g, labels, split, model_cfg, train_cfg):
    """Full training run; returns (best parameters, history).

    Labels and split are required for semi_supervised and joint runs;
    unsupervised runs may pass None for both.
    """
    supervised = train_cfg.strategy in ("semi_supervised", "joint")
    uses_pairs = train_cfg.strategy in ("unsupervised", "joint")
    if supervised:
        if labels is None or split is None:
            raise ValueError(
                f"{train_cfg.strategy} training needs labels and a split")
        split.check_against(labels)
        classes = _classes_by_id(g, labels, model_cfg)
    params = init_params(g, model_cfg, train_cfg.seed)
    train_mcfg = _training_model_config(model_cfg, train_cfg.dropout)
    val_pairs = (sample_pairs(g, train_cfg.negatives, train_cfg.seed, 0)
                 if train_cfg.strategy == "unsupervised" else None)
    adam = ad.AdamState(params, lr=train_cfg.lr)
    omega = train_cfg.joint_weight

    best_params = params.copy()
    best_metric = None
    best_epoch = 0
    stall = 0
    losses, metrics = [], []
    higher_is_better = supervised
    metric_name = "macro_f1" if supervised else "loss"

    epoch = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        try:
            with ad.Tape() as tape:
                tape.watch(params)
                emb, logits, _ = model_forward(
                    g, train_mcfg, params, train=True,
                    dropout_seed=(train_cfg.seed, epoch))
                parts = []
                if supervised and (train_cfg.strategy == "semi_supervised"
                                   or omega > 0.0):
                    picked = ad.row_select(logits, split.train)
                    sup = semi_supervised_loss(picked, classes[split.train])
                    parts.append(sup if train_cfg.strategy == "semi_supervised"
                                 or omega == 1.0 else ad.scale(sup, omega))
                if uses_pairs and (train_cfg.strategy == "unsupervised"
                                   or omega < 1.0):
                    pairs = sample_pairs(g, train_cfg.negatives,
                                         train_cfg.seed, epoch)
                    unsup = unsupervised_loss(emb, pairs)
                    parts.append(unsup if train_cfg.strategy == "unsupervised"
                                 or omega == 0.0
                                 else ad.scale(unsup, 1.0 - omega))
                loss = parts[0] if len(parts) == 1 else ad.add(*parts)
            grads = ad.backward(tape, loss)
            ad.adam_step(params, grads, adam)

            losses.append(float(loss.values))
            emb_eval, logits_eval, _ = model_forward(g, model_cfg, params)
            if supervised:
                pred = np.argmax(logits_eval.values[split.val], axis=1)
                metric, _ = f1_scores(pred, classes[split.val],
                                      model_cfg.num_classes)
            else:
                metric = float(unsupervised_loss(emb_eval, val_pairs).values)
        except ad.NonFiniteError as exc:
            raise DivergenceError(epoch) from exc
        metrics.append(metric)

        improved = (best_metric is None
                    or (metric > best_metric if higher_is_better
                        else metric < best_metric))
        if improved:
            best_metric = metric
            best_epoch = epoch
            best_params = params.copy()
            stall = 0
        else:
            stall += 1
            if stall >= train_cfg.patience:
                break

    history = TrainHistory(train_loss=tuple(losses),
                           val_metric=tuple(metrics),
                           val_metric_name=metric_name,
                           best_epoch=best_epoch,
                           stopped_epoch=epoch)
    return best_params, history
