"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tape records every operation executed inside its `with` block whose
inputs require gradients; `backward` replays the records in reverse to
accumulate cotangents. The op set is deliberately small: just enough for
attention-based graph convolutions, their losses, and the optimizer.

Conventions:
- all values are float64 ndarrays; every op raises NonFiniteError if its
  output contains NaN or Inf
- ops run eagerly; outside a tape (or when no input requires grad) they
  return plain constants, which makes inference free of tracking overhead
- parameter tensors (leaves) may be reused across tapes and are
  re-registered on the tape currently active; a tensor derived under an
  older tape may not
"""

import json

import numpy as np

from . import kernels


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def _check_finite(values, op):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values in output of {op}")


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tensor:
    """A dense float64 array plus gradient-tracking metadata."""

    __slots__ = ("values", "requires_grad", "name", "is_leaf", "_tape", "_node")

    def __init__(self, values, requires_grad=False, name=None):
        v = np.asarray(values, dtype=np.float64)
        # keep 0-d scalars 0-d (ascontiguousarray would promote to 1-d)
        self.values = v if v.flags.c_contiguous else np.ascontiguousarray(v)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.is_leaf = True
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def node_id(self):
        return self._node

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{grad}{name})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_TAPE_STACK = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Node:
    __slots__ = ("tensor", "parents", "vjps")

    def __init__(self, tensor, parents, vjps):
        self.tensor = tensor
        self.parents = parents
        self.vjps = vjps


class Tape:
    """Wengert list of recorded operations, topologically ordered."""

    def __init__(self):
        self._nodes = []
        self._watched = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def watch(self, target):
        """Register a parameter Tensor (or a whole ParamStore) as leaves.

        Watched entries are guaranteed a slot in the gradients returned by
        backward, zero-filled when the loss never touches them.
        """
        if isinstance(target, ParamStore):
            for name, tensor in target.items():
                self._ensure_leaf(tensor)
                self._watched[name] = tensor
            return
        if not isinstance(target, Tensor):
            raise TypeError("watch expects a Tensor or ParamStore")
        self._ensure_leaf(target)
        key = target.name if target.name is not None else f"_watched{len(self._watched)}"
        self._watched[key] = target

    def _ensure_leaf(self, tensor):
        """Give `tensor` a leaf node on this tape, re-registering leaves
        that were last used under a different tape."""
        if tensor._tape is self:
            return tensor._node
        if not tensor.is_leaf:
            raise ValueError(
                "tensor was produced under a different tape and cannot be "
                "reused; only leaf tensors carry over"
            )
        node_id = len(self._nodes)
        self._nodes.append(_Node(tensor, (), ()))
        tensor._tape = self
        tensor._node = node_id
        return node_id

    def _record(self, values, parents, vjps):
        """Append an op output. `parents` are the grad-requiring input
        tensors, `vjps` the matching cotangent rules."""
        out = Tensor(values, requires_grad=True)
        out.is_leaf = False
        out._tape = self
        parent_ids = tuple(self._ensure_leaf(p) if p.is_leaf else p._node for p in parents)
        for p in parents:
            if p._tape is not self:
                raise ValueError("op mixes tensors from different tapes")
        out._node = len(self._nodes)
        self._nodes.append(_Node(out, parent_ids, tuple(vjps)))
        return out


def _finish(op, values, pairs):
    """Common op epilogue: finiteness check, then record on the active
    tape when any input requires grad. `pairs` is [(tensor, vjp), ...]."""
    _check_finite(values, op)
    tape = _active_tape()
    tracked = [(t, vjp) for t, vjp in pairs if t.requires_grad]
    if tape is None or not tracked:
        return Tensor(values)
    return tape._record(values, [t for t, _ in tracked], [v for _, v in tracked])


def backward(tape, loss):
    """Accumulate d(loss)/d(leaf) over the tape, reversed.

    Returns a ParamStore holding one gradient per watched parameter;
    parameters the loss never reached get zeros. Each recorded node is
    visited exactly once.
    """
    if not isinstance(loss, Tensor) or loss.values.size != 1:
        raise ValueError("loss must be a scalar Tensor")
    if not tape._nodes:
        raise ValueError("tape is empty")
    if loss.requires_grad and loss._tape is not tape:
        raise ValueError("loss was recorded on a different tape")
    grads = ParamStore()
    leaf_grads = {}
    if loss._tape is tape and loss._node is not None:
        cotangents = {loss._node: np.ones(loss.values.shape)}
        for node_id in range(loss._node, -1, -1):
            g = cotangents.pop(node_id, None)
            if g is None:
                continue
            node = tape._nodes[node_id]
            if not node.parents:
                leaf_grads[node_id] = g
                continue
            for parent_id, vjp in zip(node.parents, node.vjps):
                contribution = vjp(g)
                if parent_id in cotangents:
                    cotangents[parent_id] = cotangents[parent_id] + contribution
                else:
                    cotangents[parent_id] = contribution
    for name, tensor in tape._watched.items():
        g = leaf_grads.get(tensor._node)
        if g is None:
            g = np.zeros(tensor.values.shape)
        grads[name] = Tensor(np.ascontiguousarray(g), requires_grad=True)
    return grads


# ---------------------------------------------------------------------------
# forward ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv
    return _finish("matmul", out, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def linear(a, w):
    """a @ w.T for a weight stored (out_dim, in_dim)."""
    a, w = _as_tensor(a), _as_tensor(w)
    if a.values.ndim != 2 or w.values.ndim != 2 or a.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: {a.shape} vs weight {w.shape}")
    av, wv = a.values, w.values
    out = av @ wv.T
    return _finish("linear", out, [(a, lambda g: g @ wv), (w, lambda g: g.T @ av)])


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    np.broadcast_shapes(a.shape, b.shape)
    out = a.values + b.values
    ash, bsh = a.shape, b.shape
    return _finish("add", out, [
        (a, lambda g: _unbroadcast(g, ash)),
        (b, lambda g: _unbroadcast(g, bsh)),
    ])


def add_const(a, c):
    a = _as_tensor(a)
    out = a.values + float(c)
    return _finish("add_const", out, [(a, lambda g: g)])


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    np.broadcast_shapes(a.shape, b.shape)
    out = a.values * b.values
    av, bv, ash, bsh = a.values, b.values, a.shape, b.shape
    return _finish("mul", out, [
        (a, lambda g: _unbroadcast(g * bv, ash)),
        (b, lambda g: _unbroadcast(g * av, bsh)),
    ])


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    out = a.values * s
    return _finish("scale", out, [(a, lambda g: g * s)])


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_cols needs at least one input")
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.values.ndim != 2 or t.shape[0] != rows:
            raise ValueError("concat_cols inputs must be 2-D with equal row counts")
    out = np.concatenate([t.values for t in tensors], axis=1)
    pairs = []
    offset = 0
    for t in tensors:
        width = t.shape[1]
        pairs.append((t, lambda g, o=offset, w=width: g[:, o:o + w]))
        offset += width
    return _finish("concat_cols", out, pairs)


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_rows needs at least one input")
    cols = tensors[0].shape[1]
    for t in tensors:
        if t.values.ndim != 2 or t.shape[1] != cols:
            raise ValueError("concat_rows inputs must be 2-D with equal column counts")
    out = np.concatenate([t.values for t in tensors], axis=0)
    pairs = []
    offset = 0
    for t in tensors:
        height = t.shape[0]
        pairs.append((t, lambda g, o=offset, h=height: g[o:o + h]))
        offset += height
    return _finish("concat_rows", out, pairs)


def row_select(a, ids):
    a = _as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if a.values.ndim != 2:
        raise ValueError("row_select expects a 2-D tensor")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise ValueError("row_select index out of range")
    out = a.values[ids]
    rows, cols = a.shape

    def vjp(g):
        return kernels.scatter_add_rows(np.zeros((rows, cols)), ids, g)

    return _finish("row_select", out, [(a, vjp)])


def scatter_rows(a, ids, num_rows):
    """Rows of `a` added into a zero matrix at positions `ids` (the
    adjoint of row_select; duplicate ids accumulate)."""
    a = _as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if a.values.ndim != 2 or ids.shape[0] != a.shape[0]:
        raise ValueError("scatter_rows needs one id per input row")
    if ids.size and (ids.min() < 0 or ids.max() >= num_rows):
        raise ValueError("scatter_rows index out of range")
    out = kernels.scatter_add_rows(np.zeros((num_rows, a.shape[1])), ids, a.values)
    return _finish("scatter_rows", out, [(a, lambda g: g[ids])])


def slice_cols(a, start, stop):
    a = _as_tensor(a)
    if a.values.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ValueError("slice_cols range invalid")
    out = a.values[:, start:stop].copy()
    rows, cols = a.shape

    def vjp(g):
        full = np.zeros((rows, cols))
        full[:, start:stop] = g
        return full

    return _finish("slice_cols", out, [(a, vjp)])


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.values.reshape(shape)
    old = a.values.shape
    return _finish("reshape", out, [(a, lambda g: g.reshape(old))])


def sum_col_blocks(a, block):
    """Sum adjacent column blocks of width `block`: (N, B·block) -> (N, B)."""
    a = _as_tensor(a)
    n, width = a.shape
    if width % block:
        raise ValueError(f"width {width} not divisible by block {block}")
    out = a.values.reshape(n, width // block, block).sum(axis=2)
    return _finish("sum_col_blocks", out, [(a, lambda g: np.repeat(g, block, axis=1))])


def expand_col_blocks(a, block):
    """Repeat each column `block` times: (N, B) -> (N, B·block). Adjoint
    of sum_col_blocks."""
    a = _as_tensor(a)
    n, b = a.shape
    out = np.repeat(a.values, block, axis=1)
    return _finish("expand_col_blocks", out,
                   [(a, lambda g: g.reshape(n, b, block).sum(axis=2))])


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.values, 0.0)
    mask = a.values > 0
    return _finish("relu", out, [(a, lambda g: g * mask)])


def leaky_relu(a, slope=0.2):
    a = _as_tensor(a)
    av = a.values
    out = np.where(av > 0, av, slope * av)
    return _finish("leaky_relu", out, [(a, lambda g: g * np.where(av > 0, 1.0, slope))])


def elu(a):
    a = _as_tensor(a)
    av = a.values
    out = np.where(av > 0, av, np.expm1(av))
    return _finish("elu", out, [(a, lambda g: g * np.where(av > 0, 1.0, out + 1.0))])


def sigmoid(a):
    a = _as_tensor(a)
    out = _stable_sigmoid(a.values)
    return _finish("sigmoid", out, [(a, lambda g: g * out * (1.0 - out))])


def softplus(a):
    """log(1 + exp(a)), computed without overflow."""
    a = _as_tensor(a)
    av = a.values
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    return _finish("softplus", out, [(a, lambda g: g * _stable_sigmoid(av))])


def dropout(a, p, seed, train):
    """Inverted dropout: zero with probability p, scale survivors by
    1/(1-p). Identity when train is false or p == 0."""
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    rng = np.random.default_rng(seed)
    mask = (rng.random(a.values.shape) >= p) / (1.0 - p)
    out = a.values * mask
    return _finish("dropout", out, [(a, lambda g: g * mask)])


def segment_sum(values, segment_ids, num_segments):
    """Sum rows into segments: out[s] = sum of rows i with segment_ids[i]==s.
    Segment ids may arrive in any order; accumulation is sequential."""
    values = _as_tensor(values)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if values.values.ndim != 2 or segment_ids.shape[0] != values.shape[0]:
        raise ValueError("segment_sum needs one segment id per row")
    if segment_ids.size and (segment_ids.min() < 0 or segment_ids.max() >= num_segments):
        raise ValueError("segment id out of range")
    out = kernels.segment_sum(values.values, segment_ids, num_segments)
    return _finish("segment_sum", out, [(values, lambda g: g[segment_ids])])


def segment_softmax(scores, segment_ids, num_segments):
    """Column-wise softmax within each segment, max-subtracted for
    stability. Every segment must contain at least one row."""
    scores = _as_tensor(scores)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if scores.values.ndim != 2 or segment_ids.shape[0] != scores.shape[0]:
        raise ValueError("segment_softmax needs one segment id per row")
    if segment_ids.size and (segment_ids.min() < 0 or segment_ids.max() >= num_segments):
        raise ValueError("segment id out of range")
    seg_max = kernels.segment_max(scores.values, segment_ids, num_segments)
    if not np.all(np.isfinite(seg_max)):
        raise ValueError("segment_softmax received an empty segment")
    shifted = np.exp(scores.values - seg_max[segment_ids])
    denom = kernels.segment_sum(shifted, segment_ids, num_segments)
    out = shifted / denom[segment_ids]

    def vjp(g):
        weighted = kernels.segment_sum(out * g, segment_ids, num_segments)
        return out * (g - weighted[segment_ids])

    return _finish("segment_softmax", out, [(scores, vjp)])


def sum_all(a):
    a = _as_tensor(a)
    out = np.asarray(a.values.sum())
    shape = a.values.shape
    return _finish("sum_all", out, [(a, lambda g: np.broadcast_to(g, shape))])


def cross_entropy_sum(logits, labels):
    """Softmax + negative log-likelihood, summed over rows."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    lv = logits.values
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ValueError("cross_entropy_sum needs (N, C) logits and N labels")
    if labels.size and (labels.min() < 0 or labels.max() >= lv.shape[1]):
        raise ValueError("label outside [0, C)")
    rows = np.arange(lv.shape[0])
    m = lv.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(lv - m).sum(axis=1, keepdims=True))
    out = np.asarray((lse[:, 0] - lv[rows, labels]).sum())

    def vjp(g):
        p = np.exp(lv - lse)
        p[rows, labels] -= 1.0
        return g * p

    return _finish("cross_entropy_sum", out, [(logits, vjp)])


# ---------------------------------------------------------------------------
# parameters and optimizer


def _format_float(x):
    """17-significant-digit decimal that always parses back as a float
    (a trailing .0 keeps JSON from reading whole numbers as ints, which
    would drop the sign of -0.0)."""
    s = format(x, ".17g")
    if "." not in s and "e" not in s and "E" not in s:
        s += ".0"
    return s


class ParamStore:
    """Named parameter tensors with deterministic sorted-name iteration."""

    def __init__(self, params=None):
        self._params = {}
        if params:
            for name, value in params.items():
                self[name] = value

    def __setitem__(self, name, value):
        tensor = value if isinstance(value, Tensor) else Tensor(value)
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(sorted(self._params))

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in sorted(self._params):
            yield name, self._params[name]

    def copy(self):
        out = ParamStore()
        for name, t in self.items():
            out[name] = Tensor(t.values.copy(), requires_grad=True, name=name)
        return out

    def to_json(self):
        """Serialize as name -> {shape, values}, floats written with 17
        significant digits so reloading is bit-exact."""
        chunks = []
        for name, t in self.items():
            shape = json.dumps(list(t.values.shape))
            vals = ", ".join(_format_float(x) for x in t.values.ravel())
            chunks.append(f'{json.dumps(name)}: {{"shape": {shape}, "values": [{vals}]}}')
        return "{" + ", ".join(chunks) + "}"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        store = cls()
        for name, entry in doc.items():
            values = np.array(entry["values"], dtype=np.float64)
            store[name] = values.reshape(entry["shape"])
        return store


class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(t.values.shape) for name, t in params.items()}
        self.v = {name: np.zeros(t.values.shape) for name, t in params.items()}


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in sorted-name order.
    Mutates params and state in place and returns them."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name].values
        if g.shape != p.values.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def grad_check(f, theta, eps=1e-5):
    """Compare backward() against central finite differences.

    `f` maps `theta` (a Tensor or ParamStore, evaluated at its current
    values) to a scalar Tensor. Returns the max over all components of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    store = theta if isinstance(theta, ParamStore) else ParamStore({"theta": theta})
    arg = theta

    with Tape() as tape:
        tape.watch(store)
        loss = f(arg)
    grads = backward(tape, loss)

    def evaluate():
        out = f(arg)
        return float(out.values.reshape(()))

    worst = 0.0
    for name, p in store.items():
        flat = p.values.ravel()
        analytic = grads[name].values.ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = evaluate()
            flat[i] = saved - eps
            lo = evaluate()
            flat[i] = saved
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
