"""Typed heterogeneous graph data model.

A graph holds multiple node types, each with its own attribute matrix,
and multiple relations (source type, edge name, destination type).
Adjacency is stored destination-indexed: for every relation, a CSR
structure mapping each destination node to its sorted list of source
neighbors. Both convolution levels aggregate into the destination node,
so one layout serves everything, and the canonical sort makes results
independent of input edge order.

Every relation gets a derived inverse (edge name suffixed with
INVERSE_SUFFIX) so information can propagate both ways. Graphs are
immutable after construction: arrays are frozen and all mutating
operations return new graphs.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import _format_float

INVERSE_SUFFIX = "⁻¹"


@dataclass(frozen=True)
class NodeType:
    id: int
    name: str
    count: int
    attr_dim: int


@dataclass(frozen=True)
class Relation:
    id: int
    src_type: int
    edge_name: str
    dst_type: int
    inverse_of: int = None

    @property
    def is_inverse(self):
        return self.edge_name.endswith(INVERSE_SUFFIX)


def _frozen(array):
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def _csr_from_edges(src, dst, num_dst, context=""):
    """Destination-indexed CSR with per-destination sources sorted
    ascending. Duplicate (src, dst) pairs are an error."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    if src.size > 1:
        same = (src[1:] == src[:-1]) & (dst[1:] == dst[:-1])
        if same.any():
            i = int(np.argmax(same))
            raise ValueError(
                f"duplicate edge ({src[i]}, {dst[i]}){' in ' + context if context else ''}")
    counts = np.bincount(dst, minlength=num_dst)
    indptr = np.zeros(num_dst + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return _frozen(indptr), _frozen(src)


class HeteroGraph:
    """Immutable typed graph. `adjacency[r]` is an (indptr, src) pair
    for relation id r, indexed by destination node."""

    def __init__(self, node_types, relations, attrs, adjacency):
        self.node_types = tuple(node_types)
        self.relations = tuple(relations)
        self.attrs = tuple(_frozen(np.asarray(a, dtype=np.float64)) for a in attrs)
        self.adjacency = tuple((_frozen(p), _frozen(s)) for p, s in adjacency)
        self._validate()
        self._name_to_type = {t.name: t for t in self.node_types}

    # -- validation ---------------------------------------------------------

    def _validate(self):
        names = [t.name for t in self.node_types]
        if len(set(names)) != len(names):
            raise ValueError("node type names must be unique")
        for i, t in enumerate(self.node_types):
            if t.id != i:
                raise ValueError("node type ids must be 0..n-1 in order")
            if t.count < 1 or t.attr_dim < 1:
                raise ValueError(f"node type {t.name}: count and attr_dim must be >= 1")
        if len(self.attrs) != len(self.node_types):
            raise ValueError("one attribute matrix per node type required")
        for t, x in zip(self.node_types, self.attrs):
            if x.shape != (t.count, t.attr_dim):
                raise ValueError(
                    f"attribute matrix for {t.name} has shape {x.shape}, "
                    f"expected {(t.count, t.attr_dim)}")
        triples = set()
        for i, r in enumerate(self.relations):
            if r.id != i:
                raise ValueError("relation ids must be 0..n-1 in order")
            if not (0 <= r.src_type < len(self.node_types)
                    and 0 <= r.dst_type < len(self.node_types)):
                raise ValueError(f"relation {r.edge_name}: type id out of range")
            triple = (r.src_type, r.edge_name, r.dst_type)
            if triple in triples:
                raise ValueError(f"duplicate relation triple {triple}")
            triples.add(triple)
        if len(self.adjacency) != len(self.relations):
            raise ValueError("one adjacency structure per relation required")
        for r in self.relations:
            indptr, src = self.adjacency[r.id]
            n_dst = self.node_types[r.dst_type].count
            n_src = self.node_types[r.src_type].count
            if indptr.shape != (n_dst + 1,) or indptr[0] != 0 or indptr[-1] != src.size:
                raise ValueError(f"relation {r.edge_name}: malformed CSR index")
            if np.any(np.diff(indptr) < 0):
                raise ValueError(f"relation {r.edge_name}: malformed CSR index")
            if src.size and (src.min() < 0 or src.max() >= n_src):
                raise ValueError(f"relation {r.edge_name}: source index out of range")
            for v in range(n_dst):
                seg = src[indptr[v]:indptr[v + 1]]
                if seg.size > 1 and np.any(np.diff(seg) <= 0):
                    raise ValueError(
                        f"relation {r.edge_name}: neighbor list of node {v} "
                        "not sorted or contains duplicates")
        for r in self.relations:
            if r.inverse_of is None:
                continue
            if not (0 <= r.inverse_of < len(self.relations)):
                raise ValueError(f"relation {r.edge_name}: bad inverse id")
            other = self.relations[r.inverse_of]
            if other.inverse_of != r.id:
                raise ValueError(f"relation {r.edge_name}: inverse link not mutual")
            if (other.src_type, other.dst_type) != (r.dst_type, r.src_type):
                raise ValueError(f"relation {r.edge_name}: inverse types do not match")
            if r.is_inverse == other.is_inverse:
                raise ValueError(
                    f"relations {r.edge_name} and {other.edge_name}: exactly one "
                    "of an inverse pair must carry the inverse suffix")
            if r.is_inverse and r.edge_name != other.edge_name + INVERSE_SUFFIX:
                raise ValueError(f"relation {r.edge_name}: inverse name mismatch")
            # transposed edge sets must agree exactly
            su, du = self.edges(r.id)
            sv, dv = self.edges(other.id)
            mine = np.lexsort((du, su))
            theirs = np.lexsort((sv, dv))
            if not (np.array_equal(su[mine], dv[theirs])
                    and np.array_equal(du[mine], sv[theirs])):
                raise ValueError(
                    f"relation {r.edge_name}: edges are not the transpose of "
                    f"{other.edge_name}")

    # -- accessors ----------------------------------------------------------

    def num_nodes(self, type_id):
        return self.node_types[type_id].count

    def type_by_name(self, name):
        try:
            return self._name_to_type[name]
        except KeyError:
            raise ValueError(f"unknown node type {name!r}") from None

    def relation_name(self, relation_id):
        r = self.relations[relation_id]
        src = self.node_types[r.src_type].name
        dst = self.node_types[r.dst_type].name
        return f"{src}__{r.edge_name}__{dst}"

    def base_relations(self):
        return [r for r in self.relations if not r.is_inverse]

    def neighbors(self, relation_id, v):
        """Sorted source neighbors of destination node v under a relation."""
        r = self.relations[relation_id]
        indptr, src = self.adjacency[relation_id]
        if not 0 <= v < self.node_types[r.dst_type].count:
            raise ValueError(f"node id {v} out of range for type "
                             f"{self.node_types[r.dst_type].name}")
        return src[indptr[v]:indptr[v + 1]]

    def relations_of(self, v, type_id):
        """Ids of relations pointing into type `type_id` that have at
        least one neighbor for node v."""
        if not 0 <= type_id < len(self.node_types):
            raise ValueError(f"type id {type_id} out of range")
        if not 0 <= v < self.node_types[type_id].count:
            raise ValueError(f"node id {v} out of range")
        out = []
        for r in self.relations:
            if r.dst_type != type_id:
                continue
            indptr, _ = self.adjacency[r.id]
            if indptr[v + 1] > indptr[v]:
                out.append(r.id)
        return out

    def relations_into(self, type_id):
        return [r.id for r in self.relations if r.dst_type == type_id]

    def edges(self, relation_id):
        """(src, dst) arrays, ordered by destination then source."""
        indptr, src = self.adjacency[relation_id]
        dst = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
        return src, dst

    def in_degrees(self, relation_id):
        indptr, _ = self.adjacency[relation_id]
        return np.diff(indptr)

    def num_edges(self, relation_id):
        return int(self.adjacency[relation_id][1].size)


def neighbors(g, relation_id, v):
    return g.neighbors(relation_id, v)


def relations_of(g, v, type_id):
    return g.relations_of(v, type_id)


def add_inverse_relations(g):
    """Append one transposed relation per existing relation. A no-op if
    the graph already contains inverse-marked relations."""
    if any(r.inverse_of is not None for r in g.relations):
        return g
    base = list(g.relations)
    n = len(base)
    relations = [Relation(r.id, r.src_type, r.edge_name, r.dst_type, inverse_of=r.id + n)
                 for r in base]
    adjacency = list(g.adjacency)
    for r in base:
        src, dst = g.edges(r.id)
        n_dst = g.num_nodes(r.src_type)
        indptr, inv_src = _csr_from_edges(dst, src, n_dst, context=g.relation_name(r.id))
        relations.append(Relation(r.id + n, r.dst_type, r.edge_name + INVERSE_SUFFIX,
                                  r.src_type, inverse_of=r.id))
        adjacency.append((indptr, inv_src))
    return HeteroGraph(g.node_types, relations, g.attrs, adjacency)


# ---------------------------------------------------------------------------
# labels and splits


@dataclass(frozen=True, eq=False)
class LabelSet:
    node_type: int
    ids: np.ndarray
    classes: np.ndarray
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "ids", _frozen(np.asarray(self.ids, dtype=np.int64)))
        object.__setattr__(self, "classes",
                           _frozen(np.asarray(self.classes, dtype=np.int64)))
        if self.ids.shape != self.classes.shape or self.ids.ndim != 1:
            raise ValueError("ids and classes must be aligned 1-D arrays")
        if self.ids.size == 0:
            raise ValueError("label set is empty")
        if np.unique(self.ids).size != self.ids.size:
            raise ValueError("duplicate node id in label set")
        if self.classes.min() < 0 or self.classes.max() >= self.num_classes:
            raise ValueError("class id outside [0, num_classes)")
        present = np.unique(self.classes)
        if present.size != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
            raise ValueError(f"classes never used: {missing}")

    def to_dict(self):
        return dict(zip(self.ids.tolist(), self.classes.tolist()))


@dataclass(frozen=True, eq=False)
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for part in ("train", "val", "test"):
            arr = _frozen(np.sort(np.asarray(getattr(self, part), dtype=np.int64)))
            object.__setattr__(self, part, arr)
            if arr.size == 0:
                raise ValueError(f"{part} split is empty")
            if np.unique(arr).size != arr.size:
                raise ValueError(f"duplicate node id in {part} split")
        combined = np.concatenate([self.train, self.val, self.test])
        if np.unique(combined).size != combined.size:
            raise ValueError("splits overlap")

    def check_against(self, labels):
        labeled = set(labels.ids.tolist())
        for part in ("train", "val", "test"):
            extra = set(getattr(self, part).tolist()) - labeled
            if extra:
                raise ValueError(f"{part} split contains unlabeled ids {sorted(extra)}")


# ---------------------------------------------------------------------------
# directory format


def _read_lines(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().splitlines()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing file: {path}") from None


def _meta_path(dir_path):
    return os.path.join(dir_path, "meta.json")


def _load_meta(dir_path):
    path = _meta_path(dir_path)
    try:
        with open(path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    for key in ("node_types", "relations", "label_type", "num_classes"):
        if key not in meta:
            raise ValueError(f"{path}: missing key {key!r}")
    return meta


def load_graph(dir_path):
    """Read a graph directory (meta.json, per-type attrs, per-relation
    edge files), validate it, and return the inverse-closed graph."""
    meta = _load_meta(dir_path)
    node_types = []
    for i, entry in enumerate(meta["node_types"]):
        node_types.append(NodeType(i, str(entry["name"]), int(entry["count"]),
                                   int(entry["attr_dim"])))
    type_ids = {t.name: t.id for t in node_types}
    if len(type_ids) != len(node_types):
        raise ValueError("node type names must be unique")

    attrs = []
    for t in node_types:
        path = os.path.join(dir_path, f"{t.name}.attrs.tsv")
        lines = _read_lines(path)
        if len(lines) != t.count:
            raise ValueError(f"{path}: {len(lines)} rows, expected {t.count}")
        matrix = np.empty((t.count, t.attr_dim))
        for ln, line in enumerate(lines, start=1):
            parts = line.split("\t")
            if len(parts) != t.attr_dim:
                raise ValueError(f"{path}:{ln}: expected {t.attr_dim} values, "
                                 f"got {len(parts)}")
            try:
                matrix[ln - 1] = [float(p) for p in parts]
            except ValueError:
                raise ValueError(f"{path}:{ln}: malformed float") from None
        attrs.append(matrix)

    relations = []
    adjacency = []
    for i, entry in enumerate(meta["relations"]):
        src_name, edge, dst_name = str(entry["src"]), str(entry["edge"]), str(entry["dst"])
        if INVERSE_SUFFIX in edge:
            raise ValueError(f"edge name {edge!r} uses the reserved inverse marker")
        if src_name not in type_ids or dst_name not in type_ids:
            raise ValueError(f"relation {src_name}__{edge}__{dst_name}: unknown node type")
        r = Relation(i, type_ids[src_name], edge, type_ids[dst_name])
        path = os.path.join(dir_path, f"{src_name}__{edge}__{dst_name}.edges.tsv")
        lines = _read_lines(path)
        src_ids, dst_ids = [], []
        n_src = node_types[r.src_type].count
        n_dst = node_types[r.dst_type].count
        for ln, line in enumerate(lines, start=1):
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{ln}: expected src<TAB>dst")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(f"{path}:{ln}: malformed integer") from None
            if not (0 <= u < n_src and 0 <= v < n_dst):
                raise ValueError(f"{path}:{ln}: index out of range")
            src_ids.append(u)
            dst_ids.append(v)
        relations.append(r)
        adjacency.append(_csr_from_edges(src_ids, dst_ids, n_dst, context=path))

    graph = HeteroGraph(node_types, relations, attrs, adjacency)
    return add_inverse_relations(graph)


def load_labels(dir_path):
    meta = _load_meta(dir_path)
    label_type = str(meta["label_type"])
    num_classes = int(meta["num_classes"])
    type_ids = {str(e["name"]): i for i, e in enumerate(meta["node_types"])}
    if label_type not in type_ids:
        raise ValueError(f"label_type {label_type!r} is not a declared node type")
    path = os.path.join(dir_path, "labels.tsv")
    ids, classes = [], []
    for ln, line in enumerate(_read_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected node_id<TAB>class_id")
        try:
            ids.append(int(parts[0]))
            classes.append(int(parts[1]))
        except ValueError:
            raise ValueError(f"{path}:{ln}: malformed integer") from None
    count = next(int(e["count"]) for e in meta["node_types"] if str(e["name"]) == label_type)
    ids_arr = np.array(ids, dtype=np.int64)
    if ids_arr.size and (ids_arr.min() < 0 or ids_arr.max() >= count):
        raise ValueError(f"{path}: node id out of range for type {label_type}")
    return LabelSet(type_ids[label_type], ids_arr, np.array(classes, dtype=np.int64),
                    num_classes)


def load_splits(dir_path):
    path = os.path.join(dir_path, "splits.json")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    for key in ("train", "val", "test"):
        if key not in doc:
            raise ValueError(f"{path}: missing key {key!r}")
    return SplitSpec(np.array(doc["train"], dtype=np.int64),
                     np.array(doc["val"], dtype=np.int64),
                     np.array(doc["test"], dtype=np.int64))


def load_dataset(dir_path):
    graph = load_graph(dir_path)
    labels = load_labels(dir_path)
    splits = load_splits(dir_path)
    splits.check_against(labels)
    return graph, labels, splits


def save_dataset(dir_path, graph, labels, splits):
    """Write the directory format. Only base relations are written; the
    loader re-derives inverses."""
    os.makedirs(dir_path, exist_ok=True)
    base = graph.base_relations()
    meta = {
        "node_types": [{"name": t.name, "count": t.count, "attr_dim": t.attr_dim}
                       for t in graph.node_types],
        "relations": [{"src": graph.node_types[r.src_type].name,
                       "edge": r.edge_name,
                       "dst": graph.node_types[r.dst_type].name}
                      for r in base],
        "label_type": graph.node_types[labels.node_type].name,
        "num_classes": labels.num_classes,
    }
    with open(_meta_path(dir_path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    for t, x in zip(graph.node_types, graph.attrs):
        path = os.path.join(dir_path, f"{t.name}.attrs.tsv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in x:
                fh.write("\t".join(_format_float(v) for v in row))
                fh.write("\n")
    for r in base:
        src, dst = graph.edges(r.id)
        path = os.path.join(dir_path, f"{graph.relation_name(r.id)}.edges.tsv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for u, v in zip(src.tolist(), dst.tolist()):
                fh.write(f"{u}\t{v}\n")
    with open(os.path.join(dir_path, "labels.tsv"), "w", encoding="utf-8",
              newline="\n") as fh:
        for i, c in zip(labels.ids.tolist(), labels.classes.tolist()):
            fh.write(f"{i}\t{c}\n")
    with open(os.path.join(dir_path, "splits.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump({"train": splits.train.tolist(), "val": splits.val.tolist(),
                   "test": splits.test.tolist()}, fh)
        fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic data


SIGNALS = ("attribute-only", "structure-only", "mixed")


@dataclass(frozen=True)
class SyntheticSpec:
    """Blueprint for a generated dataset.

    node_types: tuples (name, count, attr_dim)
    relations: tuples (src_name, edge_name, dst_name, mean_degree), degree
      meaning expected incoming edges per destination node
    signal: where the class signal lives. "structure-only" plants it in
      the neighborhood composition (attributes are pure noise),
      "attribute-only" in the attributes (edges are uniform noise),
      "mixed" in both, each weaker.
    """

    node_types: tuple
    relations: tuple
    label_type: str
    num_classes: int
    signal: str

    def __post_init__(self):
        object.__setattr__(self, "node_types",
                           tuple((str(n), int(c), int(d)) for n, c, d in self.node_types))
        object.__setattr__(self, "relations",
                           tuple((str(s), str(e), str(d), float(m))
                                 for s, e, d, m in self.relations))
        if self.signal not in SIGNALS:
            raise ValueError(f"signal must be one of {SIGNALS}")
        names = {n for n, _, _ in self.node_types}
        if len(names) != len(self.node_types):
            raise ValueError("node type names must be unique")
        if self.label_type not in names:
            raise ValueError(f"label_type {self.label_type!r} not declared")

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        allowed = {"node_types", "relations", "label_type", "num_classes", "signal"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        missing = allowed - set(doc)
        if missing:
            raise ValueError(f"missing spec keys: {sorted(missing)}")
        return cls(
            node_types=tuple((e["name"], e["count"], e["attr_dim"])
                             for e in doc["node_types"]),
            relations=tuple((e["src"], e["edge"], e["dst"], e["mean_degree"])
                            for e in doc["relations"]),
            label_type=doc["label_type"],
            num_classes=int(doc["num_classes"]),
            signal=doc["signal"],
        )


def make_split(labels, seed, train_fraction=0.2, val_fraction=0.1):
    """Stratified split: within each class, train_fraction/val_fraction
    of the nodes go to train/val, the rest to test."""
    if train_fraction <= 0 or val_fraction <= 0 or train_fraction + val_fraction >= 1:
        raise ValueError("fractions must be positive and sum below 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    train, val, test = [], [], []
    for c in range(labels.num_classes):
        ids = labels.ids[labels.classes == c]
        ids = ids[rng.permutation(ids.size)]
        n_train = int(ids.size * train_fraction)
        n_val = int(ids.size * val_fraction)
        if n_train == 0 or n_val == 0 or n_train + n_val >= ids.size:
            raise ValueError(f"class {c} too small to split")
        train.extend(ids[:n_train].tolist())
        val.extend(ids[n_train:n_train + n_val].tolist())
        test.extend(ids[n_train + n_val:].tolist())
    return SplitSpec(np.array(train), np.array(val), np.array(test))


def generate_synthetic(spec, seed):
    """Deterministic synthetic dataset: (graph, labels, splits).

    Every node gets a latent group (balanced over the classes); the
    label-type groups are the labels. Under structure/mixed signal,
    edges prefer same-group sources with the configured fidelity; under
    attribute/mixed signal, the label-type attribute block belonging to
    the node's class is shifted upward.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    c = spec.num_classes
    if c < 2:
        raise ValueError("num_classes must be >= 2")
    fidelity = {"structure-only": 1.0, "mixed": 0.9, "attribute-only": None}[spec.signal]
    strength = {"structure-only": 0.0, "mixed": 1.0, "attribute-only": 2.0}[spec.signal]

    node_types = [NodeType(i, name, count, dim)
                  for i, (name, count, dim) in enumerate(spec.node_types)]
    type_ids = {t.name: t.id for t in node_types}
    label_tid = type_ids[spec.label_type]
    if node_types[label_tid].count < c:
        raise ValueError("fewer label-type nodes than classes")

    # latent groups, balanced over classes
    groups = []
    for t in node_types:
        groups.append(rng.permutation(t.count) % c)

    attrs = []
    for t in node_types:
        x = rng.normal(size=(t.count, t.attr_dim))
        if strength > 0.0 and t.id == label_tid:
            block = t.attr_dim // c
            if block == 0:
                raise ValueError("attr_dim of the label type must be >= num_classes "
                                 "for attribute signal")
            for v in range(t.count):
                g = groups[t.id][v]
                x[v, g * block:(g + 1) * block] += strength
        attrs.append(x)

    relations = []
    adjacency = []
    for i, (src_name, edge, dst_name, mean_degree) in enumerate(spec.relations):
        if INVERSE_SUFFIX in edge:
            raise ValueError(f"edge name {edge!r} uses the reserved inverse marker")
        if src_name not in type_ids or dst_name not in type_ids:
            raise ValueError(f"relation {src_name}__{edge}__{dst_name}: unknown node type")
        stid, dtid = type_ids[src_name], type_ids[dst_name]
        n_src = node_types[stid].count
        n_dst = node_types[dtid].count
        if mean_degree < 1 or mean_degree > n_src:
            raise ValueError(
                f"relation {edge}: mean degree {mean_degree} infeasible for "
                f"{n_src} source nodes")
        pools = [np.where(groups[stid] == g)[0] for g in range(c)]
        complements = [np.where(groups[stid] != g)[0] for g in range(c)]
        src_ids, dst_ids = [], []
        degrees = np.clip(rng.poisson(mean_degree, size=n_dst), 1, n_src)
        for v in range(n_dst):
            deg = int(degrees[v])
            if fidelity is None:
                chosen = rng.choice(n_src, size=deg, replace=False)
            else:
                g = groups[dtid][v]
                same, other = pools[g], complements[g]
                n_same = min(int(rng.binomial(deg, fidelity)), same.size)
                n_other = min(deg - n_same, other.size)
                parts = []
                if n_same:
                    parts.append(rng.choice(same, size=n_same, replace=False))
                if n_other:
                    parts.append(rng.choice(other, size=n_other, replace=False))
                chosen = np.concatenate(parts)
            src_ids.extend(chosen.tolist())
            dst_ids.extend([v] * chosen.size)
        relations.append(Relation(i, stid, edge, dtid))
        adjacency.append(_csr_from_edges(src_ids, dst_ids, n_dst,
                                         context=f"{src_name}__{edge}__{dst_name}"))

    graph = add_inverse_relations(HeteroGraph(node_types, relations, attrs, adjacency))
    labels = LabelSet(label_tid, np.arange(node_types[label_tid].count),
                      groups[label_tid], c)
    # split seed is derived from the generator stream so the whole output
    # remains a pure function of (spec, seed)
    split_seed = int(rng.integers(0, 2**31))
    splits = make_split(labels, split_seed)
    return graph, labels, splits
