"""Small differentiable building blocks with hand-written gradients.

Everything works on float64 numpy arrays. Batched inputs are ``(B, in)`` and
sequences are ``(T, B, in)``; a sequence mask ``(T, B)`` marks active steps so
that variable-length, right-aligned sequences share one padded tensor.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

DTYPE = np.float64


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    if 0.0 <= slope <= 1.0:
        return np.maximum(x, slope * x)
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    """Derivative w.r.t. the pre-activation (0 is treated as the negative side)."""
    return np.where(x > 0, 1.0, slope)


def huber(residual, threshold: float = 1.0):
    """Huber loss and its derivative w.r.t. the residual.

    Works elementwise on scalars or arrays.
    """
    if threshold <= 0:
        raise ValueError("huber threshold must be positive")
    r = np.asarray(residual, dtype=DTYPE)
    a = np.abs(r)
    inside = a <= threshold
    loss = np.where(inside, 0.5 * r * r, threshold * (a - 0.5 * threshold))
    grad = np.where(inside, r, threshold * np.sign(r))
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


# --------------------------------------------------------------------------
# Dense layer


@dataclass
class DenseParams:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> DenseParams:
        return cls(glorot_uniform(rng, n_out, n_in), np.zeros(n_out, dtype=DTYPE))

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> DenseParams:
        return cls(np.zeros((n_out, n_in), dtype=DTYPE), np.zeros(n_out, dtype=DTYPE))

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


def dense_forward(x: np.ndarray, p: DenseParams) -> np.ndarray:
    if x.shape[-1] != p.n_in:
        raise ValueError(f"dense input width {x.shape[-1]} != expected {p.n_in}")
    if x.ndim > 2:
        return (x.reshape(-1, p.n_in) @ p.W.T + p.b).reshape(x.shape[:-1] + (p.n_out,))
    return x @ p.W.T + p.b


def dense_backward(x: np.ndarray, grad_out: np.ndarray, p: DenseParams):
    """Return ``(grad_x, {"W": dW, "b": db})`` for ``y = x W^T + b``.

    Leading dimensions of ``x``/``grad_out`` are summed over.
    """
    if grad_out.shape[-1] != p.n_out:
        raise ValueError(f"dense grad width {grad_out.shape[-1]} != expected {p.n_out}")
    x2 = x.reshape(-1, p.n_in)
    g2 = grad_out.reshape(-1, p.n_out)
    grads = {"W": g2.T @ x2, "b": g2.sum(axis=0)}
    return (g2 @ p.W).reshape(grad_out.shape[:-1] + (p.n_in,)), grads


# --------------------------------------------------------------------------
# Gated recurrent unit
#
#   z  = sigmoid(Wz w + Uz h + bz)
#   r  = sigmoid(Wr w + Ur h + br)
#   hc = tanh(Wh w + Uh (r * h) + bh)
#   h' = (1 - z) * h + z * hc


@dataclass
class GruParams:
    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wh: np.ndarray
    Uh: np.ndarray
    bh: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_hidden: int) -> GruParams:
        def w():
            return glorot_uniform(rng, n_hidden, n_in)

        def u():
            return glorot_uniform(rng, n_hidden, n_hidden)

        def b():
            return np.zeros(n_hidden, dtype=DTYPE)

        return cls(w(), u(), b(), w(), u(), b(), w(), u(), b())

    @classmethod
    def zeros(cls, n_in: int, n_hidden: int) -> GruParams:
        def w():
            return np.zeros((n_hidden, n_in), dtype=DTYPE)

        def u():
            return np.zeros((n_hidden, n_hidden), dtype=DTYPE)

        def b():
            return np.zeros(n_hidden, dtype=DTYPE)

        return cls(w(), u(), b(), w(), u(), b(), w(), u(), b())

    @property
    def n_in(self) -> int:
        return self.Wz.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.Wz.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "Wz": self.Wz, "Uz": self.Uz, "bz": self.bz,
            "Wr": self.Wr, "Ur": self.Ur, "br": self.br,
            "Wh": self.Wh, "Uh": self.Uh, "bh": self.bh,
        }


def gru_step(w: np.ndarray, h_prev: np.ndarray, p: GruParams) -> np.ndarray:
    """One recurrent update for a single vector or a ``(B, in)`` batch."""
    if w.shape[-1] != p.n_in or h_prev.shape[-1] != p.n_hidden:
        raise ValueError(
            f"gru widths (in={w.shape[-1]}, h={h_prev.shape[-1]}) do not match "
            f"params (in={p.n_in}, h={p.n_hidden})"
        )
    z = sigmoid(w @ p.Wz.T + h_prev @ p.Uz.T + p.bz)
    r = sigmoid(w @ p.Wr.T + h_prev @ p.Ur.T + p.br)
    hc = np.tanh(w @ p.Wh.T + (r * h_prev) @ p.Uh.T + p.bh)
    return (1.0 - z) * h_prev + z * hc


@dataclass
class GruCache:
    w: np.ndarray
    mask: np.ndarray
    hs: np.ndarray  # (T+1, B, H); hs[0] is the initial state
    z: np.ndarray
    r: np.ndarray
    hc: np.ndarray


@njit(cache=True)
def _gru_forward_kernel(proj, Uz, Ur, Uh, mask, hs, zs, rs, hcs):
    # proj[..., :H], [H:2H], [2H:] hold the z, r and candidate input projections
    T, B, H = zs.shape
    rh = np.empty(H)
    for t in range(T):
        for b in range(B):
            if mask[t, b] == 0.0:
                for i in range(H):
                    hs[t + 1, b, i] = hs[t, b, i]
                continue
            for i in range(H):
                az = proj[t, b, i]
                ar = proj[t, b, H + i]
                for j in range(H):
                    az += Uz[i, j] * hs[t, b, j]
                    ar += Ur[i, j] * hs[t, b, j]
                zs[t, b, i] = 1.0 / (1.0 + np.exp(-az))
                rs[t, b, i] = 1.0 / (1.0 + np.exp(-ar))
            for j in range(H):
                rh[j] = rs[t, b, j] * hs[t, b, j]
            for i in range(H):
                ah = proj[t, b, 2 * H + i]
                for j in range(H):
                    ah += Uh[i, j] * rh[j]
                hc = 1.0 - 2.0 / (np.exp(2.0 * ah) + 1.0)
                hcs[t, b, i] = hc
                h = hs[t, b, i]
                hs[t + 1, b, i] = h + zs[t, b, i] * (hc - h)


@njit(cache=True)
def _gru_backward_kernel(dh_out, hs, zs, rs, hcs, mask, Uz, Ur, Uh, da, gUz, gUr, gUh, dh):
    # da[..., :H], [H:2H], [2H:] receive the z, r and candidate pre-activation gradients
    T, B, H = dh_out.shape
    d_rh = np.empty(H)
    nxt = np.empty(H)
    for t in range(T - 1, -1, -1):
        for b in range(B):
            for i in range(H):
                dh[b, i] += dh_out[t, b, i]
            if mask[t, b] == 0.0:
                continue
            for i in range(H):
                z = zs[t, b, i]
                hc = hcs[t, b, i]
                g = dh[b, i]
                da[t, b, 2 * H + i] = g * z * (1.0 - hc * hc)
                da[t, b, i] = g * (hc - hs[t, b, i]) * z * (1.0 - z)
            for j in range(H):
                acc = 0.0
                for i in range(H):
                    acc += da[t, b, 2 * H + i] * Uh[i, j]
                d_rh[j] = acc
            for j in range(H):
                r = rs[t, b, j]
                da[t, b, H + j] = d_rh[j] * hs[t, b, j] * r * (1.0 - r)
            for j in range(H):
                acc = dh[b, j] * (1.0 - zs[t, b, j]) + d_rh[j] * rs[t, b, j]
                for i in range(H):
                    acc += da[t, b, i] * Uz[i, j] + da[t, b, H + i] * Ur[i, j]
                nxt[j] = acc
            for i in range(H):
                a_h = da[t, b, 2 * H + i]
                a_z = da[t, b, i]
                a_r = da[t, b, H + i]
                for j in range(H):
                    h = hs[t, b, j]
                    gUh[i, j] += a_h * rs[t, b, j] * h
                    gUz[i, j] += a_z * h
                    gUr[i, j] += a_r * h
            for j in range(H):
                dh[b, j] = nxt[j]


def gru_sequence(
    w: np.ndarray, p: GruParams, mask: np.ndarray | None = None, h0: np.ndarray | None = None
) -> tuple[np.ndarray, GruCache]:
    """Unroll over ``w`` of shape ``(T, B, in)``; returns ``(hs[1:], cache)``.

    Where ``mask[t, b] == 0`` the state is carried through unchanged.
    """
    T, B, _ = w.shape
    if w.shape[-1] != p.n_in:
        raise ValueError(f"gru input width {w.shape[-1]} != expected {p.n_in}")
    H = p.n_hidden
    if mask is None:
        mask = np.ones((T, B), dtype=DTYPE)
    else:
        mask = np.ascontiguousarray(mask, dtype=DTYPE)
    hs = np.zeros((T + 1, B, H), dtype=DTYPE)
    if h0 is not None:
        hs[0] = h0
    # input projections do not depend on the state: one matmul for all steps and gates
    Wc = np.concatenate((p.Wz, p.Wr, p.Wh))
    bc = np.concatenate((p.bz, p.br, p.bh))
    proj = (w.reshape(T * B, -1) @ Wc.T + bc).reshape(T, B, 3 * H)
    zs = np.empty((T, B, H), dtype=DTYPE)
    rs = np.empty((T, B, H), dtype=DTYPE)
    hcs = np.empty((T, B, H), dtype=DTYPE)
    _gru_forward_kernel(proj, p.Uz, p.Ur, p.Uh, mask, hs, zs, rs, hcs)
    return hs[1:], GruCache(w, mask, hs, zs, rs, hcs)


def gru_sequence_backward(dh_out: np.ndarray, cache: GruCache, p: GruParams):
    """Backprop through time.

    ``dh_out`` is ``(T, B, H)``: the loss gradient w.r.t. every emitted state.
    Returns ``(grad_w, grads, grad_h0)``.
    """
    T, B, H = dh_out.shape
    da = np.zeros((T, B, 3 * H), dtype=DTYPE)
    gUz = np.zeros_like(p.Uz)
    gUr = np.zeros_like(p.Ur)
    gUh = np.zeros_like(p.Uh)
    dh = np.zeros((B, H), dtype=DTYPE)
    _gru_backward_kernel(
        np.ascontiguousarray(dh_out), cache.hs, cache.z, cache.r, cache.hc, cache.mask,
        p.Uz, p.Ur, p.Uh, da, gUz, gUr, gUh, dh,
    )
    w2 = cache.w.reshape(T * B, -1)
    da2 = da.reshape(T * B, 3 * H)
    gW = da2.T @ w2
    gb = da2.sum(axis=0)
    grads = {
        "Wz": gW[:H], "Uz": gUz, "bz": gb[:H],
        "Wr": gW[H:2 * H], "Ur": gUr, "br": gb[H:2 * H],
        "Wh": gW[2 * H:], "Uh": gUh, "bh": gb[2 * H:],
    }
    dw = (da2 @ np.concatenate((p.Wz, p.Wr, p.Wh))).reshape(T, B, -1)
    return dw, grads, dh


# --------------------------------------------------------------------------
# Optimizer


@dataclass
class RMSPropState:
    """Running mean of squared gradients per named tensor plus a step counter."""

    sq: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def rmsprop_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: RMSPropState,
    lr: float,
    decay: float = 0.95,
    eps: float = 1e-6,
) -> bool:
    """Apply one RMSProp step in place. Returns False if the step was skipped.

    v <- decay * v + (1 - decay) * g^2 ;  theta <- theta - lr * g / sqrt(v + eps)
    """
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; skipping update", name)
            return False
    for name, g in grads.items():
        v = state.sq.get(name)
        if v is None:
            v = state.sq[name] = np.zeros_like(g)
        v *= decay
        v += (1.0 - decay) * g * g
        params[name] -= lr * g / np.sqrt(v + eps)
    state.step += 1
    return True


def rmsprop_update_flat(
    theta: np.ndarray, g: np.ndarray, state: RMSPropState, lr: float, decay: float = 0.95, eps: float = 1e-6
) -> bool:
    """:func:`rmsprop_update` on a single flat parameter vector (updated in place)."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    if not np.isfinite(g).all():
        log.warning("non-finite gradient; skipping update")
        return False
    v = state.sq.get("flat")
    if v is None:
        v = state.sq["flat"] = np.zeros_like(g)
    v *= decay
    v += (1.0 - decay) * g * g
    theta -= lr * g / np.sqrt(v + eps)
    state.step += 1
    return True


# --------------------------------------------------------------------------
# Gradient checking


def finite_diff_check(
    f: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-4,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``f`` must read the arrays in ``params`` (they are perturbed in place and
    restored). Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps near-zero gradients from turning rounding noise into huge
    ratios. With ``sample`` only that many random entries per tensor are
    checked (all of them when the tensor is smaller).
    """
    if sample is not None and rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for name, arr in params.items():
        g = analytic[name]
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idx = range(flat.size)
        if sample is not None and flat.size > sample:
            idx = rng.choice(flat.size, size=sample, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# Feed-forward stack used by the supervised baselines


class MLP:
    """Dense layers with leaky-ReLU between them and a linear output."""

    def __init__(self, rng: np.random.Generator, sizes: list[int], slope: float = 0.01):
        self.layers = [DenseParams.init(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        self.slope = slope

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.tensors().items():
                out[f"l{i}.{k}"] = v
        return out

    def forward(self, x: np.ndarray):
        acts = [x]
        pres = []
        for i, layer in enumerate(self.layers):
            pre = dense_forward(acts[-1], layer)
            pres.append(pre)
            if i < len(self.layers) - 1:
                acts.append(leaky_relu(pre, self.slope))
            else:
                acts.append(pre)
        return acts[-1], (acts, pres)

    def backward(self, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        acts, pres = cache
        grads = {}
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                g = g * leaky_relu_grad(pres[i], self.slope)
            g_in, gl = dense_backward(acts[i], g, self.layers[i])
            grads[f"l{i}.W"] = gl["W"]
            grads[f"l{i}.b"] = gl["b"]
            g = g_in
        return grads
