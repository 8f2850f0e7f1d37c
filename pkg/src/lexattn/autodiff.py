"""Dense float64 tensors with reverse-mode automatic differentiation.

Graphs are recorded on an explicit per-run ``Tape`` (define-by-run): every
operation whose operands include a tape-bound tensor appends one node, and
``Tape.backward`` replays the nodes in exact reverse recording order,
accumulating gradients by addition wherever a value fans out to several
consumers. Operands that are plain numpy arrays (or tensors created outside
any tape) act as constants and receive no gradient.

Storage is row-major float64 throughout. There is no general broadcasting;
the only shape relaxation is bias addition over the leading axis. A tape and
its tensors belong to one thread; independent tapes share no state.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "EmptySequenceError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "concat",
    "gather_rows",
    "masked_softmax",
    "matmul",
    "mul",
    "sigmoid",
    "softmax_cross_entropy",
    "stack_columns",
    "sum_all",
    "tanh",
    "weighted_sum",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptySequenceError(ValueError):
    """A masked softmax was asked for zero valid positions."""


class TapeError(RuntimeError):
    """Tape misuse: mixed tapes, non-scalar loss, unregistered loss."""


class _Node:
    __slots__ = ("op", "parents", "grad_fn", "shape")

    def __init__(self, op, parents, grad_fn, shape):
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn
        self.shape = shape


class Tensor:
    """A dense float64 array, optionally registered on a gradient tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self):
        return sum_all(self)


class Tape:
    """Append-only record of operations; gradients replay it in reverse.

    Node ids are assigned sequentially, so every node's parents have
    smaller ids and a single reverse sweep is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def tensor(self, data) -> Tensor:
        """Register ``data`` as a leaf and return its tape-bound tensor."""
        arr = np.asarray(data, dtype=np.float64)
        return self._record("leaf", arr, [], None)

    def _record(self, op, data, parents, grad_fn) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, parents, grad_fn, data.shape))
        return Tensor(data, self, node_id)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node recorded so far.

        Returns ``{node_id: float64 array}``. Nodes that do not influence
        the loss (including unused leaves) map to exact zeros. The arrays
        may share memory with internal buffers; treat them as read-only
        except where an op is documented to allocate (leaf gradients from
        ``gather_rows`` and any fan-out accumulation are freshly owned).
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise TapeError("loss is not registered on this tape")
        if loss.data.ndim != 0:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        partial: list[np.ndarray | None] = [None] * len(self.nodes)
        partial[loss.node_id] = np.ones((), dtype=np.float64)
        for node_id in range(loss.node_id, -1, -1):
            out_grad = partial[node_id]
            node = self.nodes[node_id]
            if out_grad is None or node.grad_fn is None:
                continue
            for parent_id, grad in zip(node.parents, node.grad_fn(out_grad)):
                if parent_id is None or grad is None:
                    continue
                if partial[parent_id] is None:
                    partial[parent_id] = grad
                else:
                    partial[parent_id] = partial[parent_id] + grad
        return {
            node_id: (partial[node_id] if partial[node_id] is not None
                      else np.zeros(node.shape))
            for node_id, node in enumerate(self.nodes)
        }


def _operand(x):
    """Split an operand into (array, tape, node_id); raw arrays are constants."""
    if isinstance(x, Tensor):
        return x.data, x.tape, x.node_id
    return np.asarray(x, dtype=np.float64), None, None


def _one_tape(*tapes):
    found = None
    for tape in tapes:
        if tape is None:
            continue
        if found is None:
            found = tape
        elif found is not tape:
            raise TapeError("operands were recorded on different tapes")
    return found


def _emit(tape, op, data, parents, grad_fn) -> Tensor:
    if tape is None:
        return Tensor(data)
    return tape._record(op, data, parents, grad_fn)


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    """Matrix product with numpy's 1-D/2-D semantics.

    ``transpose_b`` requires both operands 2-D and uses ``b`` transposed
    without putting an explicit transpose on the tape.
    """
    a_data, a_tape, a_id = _operand(a)
    b_data, b_tape, b_id = _operand(b)
    tape = _one_tape(a_tape, b_tape)

    if transpose_b:
        if a_data.ndim != 2 or b_data.ndim != 2 or a_data.shape[1] != b_data.shape[1]:
            raise ShapeError(
                f"matmul shape mismatch: {a_data.shape} @ transpose of {b_data.shape}")
        out = a_data @ b_data.T

        def grad_fn(g):
            return [g @ b_data, g.T @ a_data]

    elif a_data.ndim == 2 and b_data.ndim == 2:
        if a_data.shape[1] != b_data.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a_data.shape} @ {b_data.shape}")
        out = a_data @ b_data

        def grad_fn(g):
            return [g @ b_data.T, a_data.T @ g]

    elif a_data.ndim == 1 and b_data.ndim == 2:
        if a_data.shape[0] != b_data.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a_data.shape} @ {b_data.shape}")
        out = a_data @ b_data

        def grad_fn(g):
            return [b_data @ g, np.outer(a_data, g)]

    elif a_data.ndim == 2 and b_data.ndim == 1:
        if a_data.shape[1] != b_data.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a_data.shape} @ {b_data.shape}")
        out = a_data @ b_data

        def grad_fn(g):
            return [np.outer(g, b_data), a_data.T @ g]

    elif a_data.ndim == 1 and b_data.ndim == 1:
        if a_data.shape != b_data.shape:
            raise ShapeError(f"matmul shape mismatch: {a_data.shape} @ {b_data.shape}")
        out = np.asarray(a_data @ b_data)

        def grad_fn(g):
            return [g * b_data, g * a_data]

    else:
        raise ShapeError(f"matmul shape mismatch: {a_data.shape} @ {b_data.shape}")

    return _emit(tape, "matmul", out, [a_id, b_id], grad_fn)


def add(a, b) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias against a 2-D left operand,
    or a scalar against anything."""
    a_data, a_tape, a_id = _operand(a)
    b_data, b_tape, b_id = _operand(b)
    tape = _one_tape(a_tape, b_tape)

    if a_data.shape == b_data.shape:
        out = a_data + b_data

        def grad_fn(g):
            return [g, g]

    elif a_data.ndim == 2 and b_data.ndim == 1 and a_data.shape[1] == b_data.shape[0]:
        out = a_data + b_data

        def grad_fn(g):
            return [g, g.sum(axis=0)]

    elif b_data.ndim == 0:
        out = a_data + b_data

        def grad_fn(g):
            return [g, np.asarray(g.sum())]

    elif a_data.ndim == 0:
        out = a_data + b_data

        def grad_fn(g):
            return [np.asarray(g.sum()), g]

    else:
        raise ShapeError(f"add shape mismatch: {a_data.shape} + {b_data.shape}")

    return _emit(tape, "add", out, [a_id, b_id], grad_fn)


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a scalar."""
    a_data, a_tape, a_id = _operand(a)
    b_data, b_tape, b_id = _operand(b)
    tape = _one_tape(a_tape, b_tape)

    if a_data.shape == b_data.shape:
        out = a_data * b_data

        def grad_fn(g):
            return [g * b_data, g * a_data]

    elif b_data.ndim == 0:
        out = a_data * b_data

        def grad_fn(g):
            return [g * b_data, np.asarray((g * a_data).sum())]

    elif a_data.ndim == 0:
        out = a_data * b_data

        def grad_fn(g):
            return [np.asarray((g * b_data).sum()), g * a_data]

    else:
        raise ShapeError(f"mul shape mismatch: {a_data.shape} * {b_data.shape}")

    return _emit(tape, "mul", out, [a_id, b_id], grad_fn)


def tanh(x) -> Tensor:
    x_data, tape, x_id = _operand(x)
    out = np.tanh(x_data)

    def grad_fn(g):
        return [g * (1.0 - out * out)]

    return _emit(tape, "tanh", out, [x_id], grad_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    flat = np.atleast_1d(x)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(np.shape(x))


def sigmoid(x) -> Tensor:
    x_data, tape, x_id = _operand(x)
    out = _sigmoid(x_data)

    def grad_fn(g):
        return [g * out * (1.0 - out)]

    return _emit(tape, "sigmoid", out, [x_id], grad_fn)


def concat(a, b) -> Tensor:
    """Concatenate along the last axis; leading dimensions must agree.

    Either side may be zero-width. The backward pass splits the incoming
    gradient at the width of the first operand.
    """
    a_data, a_tape, a_id = _operand(a)
    b_data, b_tape, b_id = _operand(b)
    tape = _one_tape(a_tape, b_tape)
    if a_data.ndim == 0 or a_data.ndim != b_data.ndim \
            or a_data.shape[:-1] != b_data.shape[:-1]:
        raise ShapeError(f"concat shape mismatch: {a_data.shape} vs {b_data.shape}")
    split = a_data.shape[-1]
    out = np.concatenate([a_data, b_data], axis=-1)

    def grad_fn(g):
        return [g[..., :split], g[..., split:]]

    return _emit(tape, "concat", out, [a_id, b_id], grad_fn)


def masked_softmax(scores, valid_len) -> Tensor:
    """Softmax over the first ``valid_len`` positions; the tail is exactly 0.

    1-D scores take an integer count, 2-D scores one count per row. Both the
    stabilizing max and the normalizing sum skip padded positions entirely,
    so arbitrary values there can neither leak in nor overflow.
    """
    s_data, tape, s_id = _operand(scores)
    if s_data.ndim == 1:
        if np.ndim(valid_len) != 0:
            raise ShapeError("1-D scores take a single integer valid length")
        rows = s_data[None, :]
        lens = np.asarray([valid_len], dtype=np.int64)
        squeeze = True
    elif s_data.ndim == 2:
        rows = s_data
        lens = np.asarray(valid_len, dtype=np.int64)
        if lens.shape != (rows.shape[0],):
            raise ShapeError(
                f"masked_softmax needs one valid length per row: scores "
                f"{s_data.shape}, lengths {lens.shape}")
        squeeze = False
    else:
        raise ShapeError(f"masked_softmax expects 1-D or 2-D scores, got {s_data.shape}")

    width = rows.shape[1]
    if np.any(lens < 1):
        raise EmptySequenceError("masked_softmax needs at least one valid position")
    if np.any(lens > width):
        raise ShapeError(f"valid length exceeds the {width} available positions")

    mask = np.arange(width)[None, :] < lens[:, None]
    peak = np.max(np.where(mask, rows, -np.inf), axis=1, keepdims=True)
    exps = np.zeros_like(rows)
    np.exp(rows - peak, out=exps, where=mask)
    probs = exps / exps.sum(axis=1, keepdims=True)
    out = probs[0] if squeeze else probs

    def grad_fn(g):
        g2 = g[None, :] if squeeze else g
        inner = (g2 * probs).sum(axis=1, keepdims=True)
        ds = probs * (g2 - inner)
        return [ds[0] if squeeze else ds]

    return _emit(tape, "masked_softmax", out, [s_id], grad_fn)


def gather_rows(table, indices) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the table."""
    t_data, tape, t_id = _operand(table)
    idx = np.asarray(indices, dtype=np.int64)
    if t_data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(
            f"gather_rows expects a 2-D table and 1-D indices, got "
            f"{t_data.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= t_data.shape[0]):
        raise ShapeError(f"row index out of range for table {t_data.shape}")
    out = t_data[idx]

    def grad_fn(g):
        acc = np.zeros_like(t_data)
        np.add.at(acc, idx, g)
        return [acc]

    return _emit(tape, "gather_rows", out, [t_id], grad_fn)


def stack_columns(columns) -> Tensor:
    """Stack equal-length vectors as the columns of one matrix."""
    datas, ids, tapes = [], [], []
    for col in columns:
        d, t, i = _operand(col)
        datas.append(d)
        ids.append(i)
        tapes.append(t)
    if not datas:
        raise ShapeError("stack_columns needs at least one column")
    n = datas[0].shape
    if any(d.ndim != 1 or d.shape != n for d in datas):
        raise ShapeError(
            f"stack_columns needs equal-length vectors, got "
            f"{[d.shape for d in datas]}")
    tape = _one_tape(*tapes)
    out = np.stack(datas, axis=1)

    def grad_fn(g):
        return [g[:, t] for t in range(len(datas))]

    return _emit(tape, "stack_columns", out, ids, grad_fn)


def weighted_sum(weights, items) -> Tensor:
    """Pool row-stacked items by per-column weights.

    ``weights`` is (n, T) and ``items`` a sequence of T matrices (n, d);
    the result is ``sum_t weights[:, t, None] * items[t]`` of shape (n, d).
    """
    w_data, w_tape, w_id = _operand(weights)
    datas, ids, tapes = [], [], [w_tape]
    for item in items:
        d, t, i = _operand(item)
        datas.append(d)
        ids.append(i)
        tapes.append(t)
    steps = len(datas)
    if w_data.ndim != 2 or w_data.shape[1] != steps:
        raise ShapeError(
            f"weighted_sum: weights {w_data.shape} do not match {steps} items")
    n = w_data.shape[0]
    if any(d.ndim != 2 or d.shape[0] != n for d in datas):
        raise ShapeError(
            f"weighted_sum: items must be ({n}, d) matrices, got "
            f"{[d.shape for d in datas]}")
    tape = _one_tape(*tapes)
    out = np.zeros((n, datas[0].shape[1]))
    for t in range(steps):
        out += w_data[:, t, None] * datas[t]

    def grad_fn(g):
        dw = np.empty_like(w_data)
        for t in range(steps):
            dw[:, t] = (g * datas[t]).sum(axis=1)
        return [dw] + [w_data[:, t, None] * g for t in range(steps)]

    return _emit(tape, "weighted_sum", out, [w_id] + ids, grad_fn)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; returns a scalar tensor."""
    l_data, tape, l_id = _operand(logits)
    y = np.asarray(labels, dtype=np.int64)
    if l_data.ndim != 2 or y.shape != (l_data.shape[0],):
        raise ShapeError(
            f"cross entropy expects (B, K) logits and (B,) labels, got "
            f"{l_data.shape} and {y.shape}")
    if y.min() < 0 or y.max() >= l_data.shape[1]:
        raise ShapeError(f"label out of range for {l_data.shape[1]} classes")
    batch = l_data.shape[0]
    shifted = l_data - l_data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = np.asarray(-log_probs[np.arange(batch), y].mean())
    probs = np.exp(log_probs)

    def grad_fn(g):
        d = probs.copy()
        d[np.arange(batch), y] -= 1.0
        return [d * (float(g) / batch)]

    return _emit(tape, "softmax_cross_entropy", loss, [l_id], grad_fn)


def sum_all(x) -> Tensor:
    """Sum all entries to a scalar."""
    x_data, tape, x_id = _operand(x)
    out = np.asarray(x_data.sum())

    def grad_fn(g):
        return [np.full(x_data.shape, float(g))]

    return _emit(tape, "sum", out, [x_id], grad_fn)
