"""State vector -> hidden layer -> GRU -> dueling streams -> constraint filter."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .nn import (
    DTYPE,
    DenseParams,
    GruCache,
    GruParams,
    dense_backward,
    dense_forward,
    gru_sequence,
    gru_sequence_backward,
    leaky_relu,
    leaky_relu_grad,
)

# Stand-in for -inf: finite, so masked arithmetic never produces nan.
MASKED = np.finfo(DTYPE).min


@dataclass
class QNetworkParams:
    """Weights of one Q network.

    ``hidden`` and ``recurrent`` may be ``None`` for degenerate (linear,
    memoryless) configurations; the dueling streams then read the layer below.
    """

    hidden: DenseParams | None
    recurrent: GruParams | None
    value: DenseParams
    advantage: DenseParams
    slope: float = 0.01

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        state_dim: int,
        n_actions: int,
        hidden: int | None,
        rnn: int | None,
        slope: float = 0.01,
    ) -> QNetworkParams:
        width = state_dim
        hid = None
        rec = None
        if hidden:
            hid = DenseParams.init(rng, width, hidden)
            width = hidden
        if rnn:
            rec = GruParams.init(rng, width, rnn)
            width = rnn
        return cls(hid, rec, DenseParams.init(rng, width, 1), DenseParams.init(rng, width, n_actions), slope)

    @property
    def state_dim(self) -> int:
        if self.hidden is not None:
            return self.hidden.n_in
        if self.recurrent is not None:
            return self.recurrent.n_in
        return self.value.n_in

    @property
    def n_actions(self) -> int:
        return self.advantage.n_out

    @property
    def rnn_width(self) -> int:
        return self.recurrent.n_hidden if self.recurrent is not None else 0

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view (arrays are shared, not copied)."""
        out = {}
        for prefix, part in (
            ("hidden", self.hidden),
            ("gru", self.recurrent),
            ("value", self.value),
            ("advantage", self.advantage),
        ):
            if part is None:
                continue
            for k, v in part.tensors().items():
                out[f"{prefix}.{k}"] = v
        return out

    def _parts(self):
        return [p for p in (self.hidden, self.recurrent, self.value, self.advantage) if p is not None]

    def flatten(self) -> np.ndarray:
        """Move every tensor into one contiguous vector and return it; the
        tensors become views of that vector (same order as :meth:`tensors`)."""
        flat = np.concatenate([v.ravel() for v in self.tensors().values()])
        off = 0
        for part in self._parts():
            for k, v in part.tensors().items():
                setattr(part, k, flat[off:off + v.size].reshape(v.shape))
                off += v.size
        return flat

    def copy(self) -> QNetworkParams:
        return copy.deepcopy(self)

    def assign_from(self, other: QNetworkParams) -> None:
        mine = self.tensors()
        for k, v in other.tensors().items():
            mine[k][...] = v

    def zero_hidden(self, batch: int | None = None) -> np.ndarray:
        shape = (self.rnn_width,) if batch is None else (batch, self.rnn_width)
        return np.zeros(shape, dtype=DTYPE)


def dueling_combine(value, advantage) -> np.ndarray:
    """Q_a = V + A_a - mean(A); broadcasts over leading dimensions."""
    A = np.asarray(advantage, dtype=DTYPE)
    V = np.asarray(value, dtype=DTYPE)
    if A.shape[-1] < 1:
        raise ValueError("advantage stream must have at least one action")
    if V.ndim == A.ndim:
        V = V[..., 0:1] if V.shape[-1] == 1 else V
    else:
        V = V[..., None]
    return V + A - A.mean(axis=-1, keepdims=True)


def apply_constraint_mask(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=DTYPE)
    mask = np.asarray(mask, dtype=bool)
    if q.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} != q shape {q.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("every entry masked out: no legal action to choose")
    return np.where(mask, q, MASKED)


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> np.ndarray | int:
    return np.argmax(apply_constraint_mask(q, mask), axis=-1)


@dataclass
class QCache:
    x: np.ndarray
    pre: np.ndarray | None
    w: np.ndarray
    gru: GruCache | None
    h: np.ndarray
    last: int | None = None


def q_forward_seq(
    x: np.ndarray, p: QNetworkParams, mask: np.ndarray | None = None, h0: np.ndarray | None = None,
    last: int | None = None,
) -> tuple[np.ndarray, np.ndarray, QCache]:
    """Forward a ``(T, B, state_dim)`` batch of sequences.

    Returns ``(q (T,B,n), final hidden (B,H), cache)``. With ``last=k`` only
    the final k steps get Q-values (``q`` is then ``(k,B,n)``).
    """
    if x.shape[-1] != p.state_dim:
        raise ValueError(f"state width {x.shape[-1]} != network input width {p.state_dim}")
    pre = None
    w = x
    if p.hidden is not None:
        pre = dense_forward(x, p.hidden)
        w = leaky_relu(pre, p.slope)
    gcache = None
    if p.recurrent is not None:
        h, gcache = gru_sequence(w, p.recurrent, mask, h0)
        h_last = gcache.hs[-1]
    else:
        h = w
        h_last = np.zeros((x.shape[1], 0), dtype=DTYPE)
    hq = h if last is None else h[-last:]
    q = dueling_combine(dense_forward(hq, p.value), dense_forward(hq, p.advantage))
    return q, h_last, QCache(x, pre, w, gcache, h, last)


def q_backward_seq(dq: np.ndarray, cache: QCache, p: QNetworkParams) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every tensor given ``dL/dQ`` (shaped like the forward's q)."""
    grads: dict[str, np.ndarray] = {}
    hq = cache.h if cache.last is None else cache.h[-cache.last:]
    dV = dq.sum(axis=-1, keepdims=True)
    dA = dq - dq.mean(axis=-1, keepdims=True)
    dh_v, gv = dense_backward(hq, dV, p.value)
    dh_a, ga = dense_backward(hq, dA, p.advantage)
    grads.update({f"value.{k}": v for k, v in gv.items()})
    grads.update({f"advantage.{k}": v for k, v in ga.items()})
    if cache.last is None:
        dh = dh_v + dh_a
    else:
        dh = np.zeros_like(cache.h)
        dh[-cache.last:] = dh_v + dh_a
    if p.recurrent is not None:
        dw, gg, _ = gru_sequence_backward(dh, cache.gru, p.recurrent)
        grads.update({f"gru.{k}": v for k, v in gg.items()})
    else:
        dw = dh
    if p.hidden is not None:
        dpre = dw * leaky_relu_grad(cache.pre, p.slope)
        _, gh = dense_backward(cache.x, dpre, p.hidden)
        grads.update({f"hidden.{k}": v for k, v in gh.items()})
    return grads


def q_forward(state_vec: np.ndarray, h_prev: np.ndarray, p: QNetworkParams) -> tuple[np.ndarray, np.ndarray]:
    """Single decision step: ``(q (n,), h (H,))`` for one state vector."""
    state_vec = np.asarray(state_vec, dtype=DTYPE)
    if state_vec.ndim != 1:
        raise ValueError("q_forward expects a single state vector")
    h0 = None if p.recurrent is None else np.asarray(h_prev, dtype=DTYPE).reshape(1, -1)
    q, h, _ = q_forward_seq(state_vec.reshape(1, 1, -1), p, None, h0)
    return q[0, 0], h[0]
