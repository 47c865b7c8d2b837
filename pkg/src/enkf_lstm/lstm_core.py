"""Deterministic LSTM forward propagation driven by a flat weight vector.

The recurrence, for input x_t and previous cell output m_{t-1}::

    i_t = sigmoid(W_ix x_t + W_im m_{t-1} + b_i)
    f_t = sigmoid(W_fx x_t + W_mf m_{t-1} + b_f)
    c_t = f_t * c_{t-1} + i_t * tanh(W_cx x_t + W_cm m_{t-1} + b_c)
    o_t = sigmoid(W_ox x_t + W_om m_{t-1} + b_o)
    m_t = o_t * tanh(c_t)
    y_t = W_ym m_t + b_y

Weights are packed row-major in the order given by ``PART_ORDER``. The same
layout is used by the batched ensemble evaluator :func:`forward_ensemble`, which
propagates many weight vectors over many sequences at once.
"""

from dataclasses import dataclass

import numpy as np

from . import binfmt
from .errors import ShapeError

PART_ORDER = (
    "W_ix", "W_im", "b_i",
    "W_fx", "W_mf", "b_f",
    "W_cx", "W_cm", "b_c",
    "W_ox", "W_om", "b_o",
    "W_ym", "b_y",
)

# (input-weight, recurrent-weight, bias) names per gate, in packing order
_GATES = (
    ("W_ix", "W_im", "b_i"),
    ("W_fx", "W_mf", "b_f"),
    ("W_cx", "W_cm", "b_c"),
    ("W_ox", "W_om", "b_o"),
)

# members processed together by forward_ensemble; fixed so results never
# depend on the worker count
MEMBER_CHUNK = 32


@dataclass(frozen=True)
class LstmShape:
    input_dim: int
    hidden_dim: int
    output_dim: int

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "output_dim"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ShapeError(f"{name} must be a positive integer, got {value!r}")

    @property
    def weight_count(self):
        p, h, q = self.input_dim, self.hidden_dim, self.output_dim
        return 4 * h * (p + h + 1) + q * (h + 1)

    def part_shapes(self):
        p, h, q = self.input_dim, self.hidden_dim, self.output_dim
        shapes = {}
        for wx, wm, b in _GATES:
            shapes[wx] = (h, p)
            shapes[wm] = (h, h)
            shapes[b] = (h,)
        shapes["W_ym"] = (q, h)
        shapes["b_y"] = (q,)
        return shapes

    def slices(self):
        """Offsets of every named part inside the flat vector."""
        out = {}
        offset = 0
        shapes = self.part_shapes()
        for name in PART_ORDER:
            size = int(np.prod(shapes[name]))
            out[name] = (slice(offset, offset + size), shapes[name])
            offset += size
        return out

    def to_dict(self):
        return {"input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                "output_dim": self.output_dim}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["input_dim"]), int(d["hidden_dim"]), int(d["output_dim"]))


def weight_count(shape):
    return shape.weight_count


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    shape: LstmShape

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.shape.weight_count:
            raise ShapeError(
                f"weight vector has {values.size} entries, shape {self.shape} "
                f"needs {self.shape.weight_count}"
            )
        if not np.all(np.isfinite(values)):
            raise ShapeError("weight vector contains non-finite entries")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def to_bytes(self):
        return binfmt.dumps({"kind": "weights", "shape": self.shape.to_dict()},
                            {"values": self.values})

    @classmethod
    def from_bytes(cls, blob):
        header, arrays = binfmt.loads(blob)
        return cls(arrays["values"], LstmShape.from_dict(header["shape"]))


@dataclass(frozen=True)
class LstmState:
    cell: np.ndarray
    cell_output: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim):
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim))


def pack(parts, shape):
    """Concatenate named gate matrices and biases into a :class:`WeightVector`."""
    expected = shape.part_shapes()
    missing = set(PART_ORDER) - set(parts)
    if missing:
        raise ShapeError(f"missing weight parts: {sorted(missing)}")
    chunks = []
    for name in PART_ORDER:
        arr = np.asarray(parts[name], dtype=np.float64)
        if arr.shape != expected[name]:
            raise ShapeError(f"{name} has shape {arr.shape}, expected {expected[name]}")
        chunks.append(arr.ravel())
    return WeightVector(np.concatenate(chunks), shape)


def unpack(w):
    """Split a :class:`WeightVector` back into its named parts (copies)."""
    if not isinstance(w, WeightVector):
        raise ShapeError("unpack expects a WeightVector")
    return {name: w.values[sl].reshape(shp).copy() for name, (sl, shp) in w.shape.slices().items()}


def sigmoid(z):
    """Logistic sigmoid that never overflows: exp is only taken of -|z|."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def step(state, x, w):
    """Advance one time step.

    Parameters
    ----------
    state : LstmState
        Previous cell state ``c`` and cell output ``m``.
    x : array_like, shape (input_dim,)
    w : WeightVector

    Returns
    -------
    (LstmState, ndarray of shape (output_dim,))
    """
    shape = w.shape
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (shape.input_dim,):
        raise ShapeError(f"input has shape {x.shape}, expected ({shape.input_dim},)")
    if not np.all(np.isfinite(x)):
        raise ShapeError("input contains non-finite entries")
    c_prev = np.asarray(state.cell, dtype=np.float64)
    m_prev = np.asarray(state.cell_output, dtype=np.float64)
    if c_prev.shape != (shape.hidden_dim,) or m_prev.shape != (shape.hidden_dim,):
        raise ShapeError("state does not match hidden_dim")

    P = unpack(w)
    i = sigmoid(P["W_ix"] @ x + P["W_im"] @ m_prev + P["b_i"])
    f = sigmoid(P["W_fx"] @ x + P["W_mf"] @ m_prev + P["b_f"])
    g = np.tanh(P["W_cx"] @ x + P["W_cm"] @ m_prev + P["b_c"])
    c = f * c_prev + i * g
    o = sigmoid(P["W_ox"] @ x + P["W_om"] @ m_prev + P["b_o"])
    m = o * np.tanh(c)
    y = P["W_ym"] @ m + P["b_y"]
    return LstmState(c, m), y


def forward_sequence(x_seq, w, initial=None):
    """Fold :func:`step` over ``x_seq`` and return only the final output."""
    x_seq = np.asarray(x_seq, dtype=np.float64)
    if x_seq.ndim != 2 or x_seq.shape[0] == 0:
        raise ShapeError("x_seq must be a non-empty (length, input_dim) array")
    state = initial if initial is not None else LstmState.zeros(w.shape.hidden_dim)
    y = None
    for x in x_seq:
        state, y = step(state, x, w)
    return y


def _stack_ensemble(weights, shape):
    """Batched views of the parts: input/recurrent/bias blocks with the four
    gates stacked along the row axis (order i, f, c, o)."""
    n = weights.shape[0]
    sl = shape.slices()

    def part(name):
        s, shp = sl[name]
        return weights[:, s].reshape((n,) + shp)

    Wx = np.concatenate([part(g[0]) for g in _GATES], axis=1)  # (n, 4h, p)
    Wm = np.concatenate([part(g[1]) for g in _GATES], axis=1)  # (n, 4h, h)
    b = np.concatenate([part(g[2]) for g in _GATES], axis=1)   # (n, 4h)
    return Wx, Wm, b, part("W_ym"), part("b_y")


def _forward_chunk(weights, shape, X):
    h = shape.hidden_dim
    Wx, Wm, b, Wy, by = _stack_ensemble(weights, shape)
    n = weights.shape[0]
    s, L, _ = X.shape
    WxT = np.ascontiguousarray(Wx.transpose(0, 2, 1))  # (n, p, 4h)
    WmT = np.ascontiguousarray(Wm.transpose(0, 2, 1))  # (n, h, 4h)
    c = np.zeros((n, s, h))
    m = np.zeros((n, s, h))
    for t in range(L):
        z = np.matmul(X[None, :, t, :], WxT) + np.matmul(m, WmT) + b[:, None, :]
        i = sigmoid(z[..., :h])
        f = sigmoid(z[..., h:2 * h])
        g = np.tanh(z[..., 2 * h:3 * h])
        o = sigmoid(z[..., 3 * h:])
        c = f * c + i * g
        m = o * np.tanh(c)
    return np.matmul(m, Wy.transpose(0, 2, 1)) + by[:, None, :]


def forward_ensemble(weights, shape, X, executor=None):
    """Final-step outputs of every weight member on every sequence.

    Each sequence starts from the zero state.

    Parameters
    ----------
    weights : ndarray, shape (n_members, weight_count)
    shape : LstmShape
    X : ndarray, shape (n_sequences, length, input_dim)
    executor : concurrent.futures.Executor, optional
        Member chunks are dispatched to it; chunking is fixed, so the result
        is identical with or without an executor.

    Returns
    -------
    ndarray, shape (n_members, n_sequences, output_dim)
    """
    weights = np.asarray(weights, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[1] != shape.weight_count:
        raise ShapeError(f"weights must be (n, {shape.weight_count}), got {weights.shape}")
    if X.ndim != 3 or X.shape[2] != shape.input_dim or X.shape[1] == 0:
        raise ShapeError(f"X must be (n_seq, length>0, {shape.input_dim}), got {X.shape}")
    chunks = [weights[k:k + MEMBER_CHUNK] for k in range(0, weights.shape[0], MEMBER_CHUNK)]
    if executor is None or len(chunks) == 1:
        outs = [_forward_chunk(c, shape, X) for c in chunks]
    else:
        outs = list(executor.map(lambda c: _forward_chunk(c, shape, X), chunks))
    return np.concatenate(outs, axis=0)
