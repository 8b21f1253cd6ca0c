"""Dense LSTM building blocks with hand-written backpropagation through time.

Row-vector convention throughout: pre-activations are ``x @ Wx + h @ Wh + b``.
The four gate blocks are stacked along the last axis in the order
(g, f, i, o), each ``hidden`` wide.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

GATES = ("g", "f", "i", "o")
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class LstmParameters:
    Wx: np.ndarray  # (input_dim, 4 * hidden)
    Wh: np.ndarray  # (hidden, 4 * hidden)
    b: np.ndarray  # (4 * hidden,)

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Wx.shape[0]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(W_x, W_h, b) views for one gate, e.g. ``gate("f")``."""
        k = GATES.index(name)
        s = slice(k * self.hidden, (k + 1) * self.hidden)
        return self.Wx[:, s], self.Wh[:, s], self.b[s]

    @classmethod
    def from_dict(cls, params: Mapping[str, np.ndarray], prefix: str) -> "LstmParameters":
        return cls(params[prefix + "Wx"], params[prefix + "Wh"], params[prefix + "b"])


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None, dtype=np.float64) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))


def sigmoid(x):
    return expit(x)


def _cell(a: np.ndarray, c_prev: np.ndarray):
    H = a.shape[-1] // 4
    g = np.tanh(a[..., :H])
    f = expit(a[..., H : 2 * H])
    i = expit(a[..., 2 * H : 3 * H])
    o = expit(a[..., 3 * H :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, (g, f, i, o, tc)


def _cell_backward(gates, c_prev, dh, dc):
    """Gradients through one cell given dL/dh and dL/dc of its outputs.

    Returns (d pre-activation, dL/dc_prev).
    """
    g, f, i, o, tc = gates
    dc = dc + dh * o * (1.0 - tc * tc)
    da = np.concatenate(
        [
            dc * i * (1.0 - g * g),
            dc * c_prev * f * (1.0 - f),
            dc * g * i * (1.0 - i),
            dh * tc * o * (1.0 - o),
        ],
        axis=-1,
    )
    return da, dc * f


def lstm_step(params: LstmParameters, x: np.ndarray, prev: LstmState):
    """One LSTM step. Returns the new state and the (g, f, i, o) gate values."""
    a = x @ params.Wx + prev.h @ params.Wh + params.b
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("non-finite LSTM pre-activation")
    h, c, gates = _cell(a, prev.c)
    return LstmState(h, c), gates[:4]


class StepCache:
    __slots__ = ("x", "h_prev", "c_prev", "gates")

    def __init__(self, x, h_prev, c_prev, gates):
        self.x, self.h_prev, self.c_prev, self.gates = x, h_prev, c_prev, gates


def lstm_step_forward(params: LstmParameters, x, h, c):
    a = x @ params.Wx + h @ params.Wh + params.b
    h_new, c_new, gates = _cell(a, c)
    return h_new, c_new, StepCache(x, h, c, gates)


def lstm_step_backward(params: LstmParameters, cache: StepCache, dh, dc, grads: dict[str, np.ndarray], prefix: str):
    """Accumulates parameter gradients into ``grads``; returns (dx, dh_prev, dc_prev)."""
    da, dc_prev = _cell_backward(cache.gates, cache.c_prev, dh, dc)
    grads[prefix + "Wx"] += cache.x.T @ da
    grads[prefix + "Wh"] += cache.h_prev.T @ da
    grads[prefix + "b"] += da.sum(axis=0)
    return da @ params.Wx.T, da @ params.Wh.T, dc_prev


class SequenceCache:
    __slots__ = ("X", "mask", "reverse", "h_prev", "c_prev", "gates")


def lstm_forward(params: LstmParameters, X: np.ndarray, mask: np.ndarray, reverse: bool = False):
    """Run an LSTM over a padded batch ``X`` of shape (B, T, D).

    ``mask`` (B, T) is 1 on real tokens. States at masked positions are
    forced to zero, so a reversed pass over right-padded sequences starts
    from the zero state just past each sequence's own end.

    Returns hidden states (B, T, H) indexed by time position, and a cache.
    """
    B, T, _ = X.shape
    H = params.hidden
    XW = X @ params.Wx + params.b
    if not np.all(np.isfinite(XW)):
        raise NonFiniteError("non-finite LSTM input")
    dtype = XW.dtype
    h = np.zeros((B, H), dtype)
    c = np.zeros((B, H), dtype)
    Hs = np.zeros((B, T, H), dtype)
    h_prev = np.zeros((B, T, H), dtype)
    c_prev = np.zeros((B, T, H), dtype)
    gates = [None] * T
    m = mask.astype(dtype)[..., None]
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h_prev[:, t] = h
        c_prev[:, t] = c
        h_new, c_new, gates[t] = _cell(XW[:, t] + h @ params.Wh, c)
        h = h_new * m[:, t]
        c = c_new * m[:, t]
        Hs[:, t] = h
    cache = SequenceCache()
    cache.X, cache.mask, cache.reverse = X, m, reverse
    cache.h_prev, cache.c_prev, cache.gates = h_prev, c_prev, gates
    return Hs, cache


def lstm_backward(params: LstmParameters, cache: SequenceCache, dH: np.ndarray, grads: dict[str, np.ndarray], prefix: str):
    """Full (non-truncated) BPTT for ``lstm_forward``.

    ``dH`` is dL/dh at every position. Parameter gradients are accumulated
    into ``grads[prefix + ...]``; returns dL/dX.
    """
    B, T, H = dH.shape
    dh_next = np.zeros((B, H), dH.dtype)
    dc_next = np.zeros((B, H), dH.dtype)
    dA = np.empty((B, T, 4 * H), dH.dtype)
    m = cache.mask
    order = range(T) if cache.reverse else range(T - 1, -1, -1)
    for t in order:
        dh = (dH[:, t] + dh_next) * m[:, t]
        da, dc_prev = _cell_backward(cache.gates[t], cache.c_prev[:, t], dh, dc_next * m[:, t])
        dA[:, t] = da
        dh_next = da @ params.Wh.T
        dc_next = dc_prev
    D = cache.X.shape[-1]
    flat = dA.reshape(-1, 4 * H)
    grads[prefix + "Wx"] += cache.X.reshape(-1, D).T @ flat
    grads[prefix + "Wh"] += cache.h_prev.reshape(-1, H).T @ flat
    grads[prefix + "b"] += flat.sum(axis=0)
    return dA @ params.Wx.T


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_project(h_prev: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return softmax(h_prev @ W + b)


def sequence_loss(probs: np.ndarray, targets: np.ndarray, pad_id: int | None = 0) -> float:
    """Mean cross-entropy of ``targets`` (K,) under rows of ``probs`` (K, C).

    Positions whose target equals ``pad_id`` are dropped from both the
    sum and the divisor.
    """
    targets = np.asarray(targets)
    keep = np.ones(len(targets), bool) if pad_id is None else targets != pad_id
    if not keep.any():
        raise ValueError("sequence has no non-pad targets")
    p = probs[np.arange(len(targets)), targets][keep]
    with np.errstate(divide="ignore"):
        return float(-np.log(p).sum() / keep.sum())


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape).astype(dtype)


def init_lstm(rng: np.random.Generator, input_dim: int, hidden: int, dtype=np.float64, forget_bias: float = 1.0):
    """Glorot-uniform per gate block; forget-gate bias set to ``forget_bias``."""
    Wx = glorot(rng, (input_dim, 4 * hidden), input_dim, hidden, dtype)
    Wh = glorot(rng, (hidden, 4 * hidden), hidden, hidden, dtype)
    b = np.zeros(4 * hidden, dtype)
    b[hidden : 2 * hidden] = forget_bias
    return Wx, Wh, b


def init_parameters(seed: int, input_dim: int, hidden: int, dtype=np.float64) -> LstmParameters:
    return LstmParameters(*init_lstm(np.random.default_rng(seed), input_dim, hidden, dtype))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


class Adam:
    """Adam with optional global-norm clipping. Updates parameters in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, clip: float | None = 5.0):
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.skipped = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> bool:
        norm = global_norm(grads)
        if not np.isfinite(norm):
            self.skipped += 1
            logger.warning("non-finite gradient; update skipped (%d so far)", self.skipped)
            return False
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for name, p in params.items():
            g = grads[name] * scale if scale != 1.0 else grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(p.dtype)
        return True

    def state(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "clip": self.clip}


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], meta: dict, optimizer: Adam | None = None, extra: Mapping[str, np.ndarray] | None = None):
    """Write parameters (as float64, row-major) plus JSON metadata to an ``.npz``."""
    arrays = {f"param/{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
    meta = dict(meta, version=CHECKPOINT_VERSION, dtype=str(next(iter(params.values())).dtype))
    if optimizer is not None:
        meta["optimizer"] = optimizer.state()
        for k in optimizer.m:
            arrays[f"adam_m/{k}"] = np.ascontiguousarray(optimizer.m[k], dtype=np.float64)
            arrays[f"adam_v/{k}"] = np.ascontiguousarray(optimizer.v[k], dtype=np.float64)
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.ascontiguousarray(v, dtype=np.float64)
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path):
    """Returns (params, meta, optimizer_or_None, extra)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        dtype = np.dtype(meta["dtype"])
        params, m, v, extra = {}, {}, {}, {}
        for key in data.files:
            kind, _, name = key.partition("/")
            if kind == "param":
                params[name] = data[key].astype(dtype)
            elif kind == "adam_m":
                m[name] = data[key].astype(dtype)
            elif kind == "adam_v":
                v[name] = data[key].astype(dtype)
            elif kind == "extra":
                extra[name] = data[key]
    opt = None
    if "optimizer" in meta:
        s = meta["optimizer"]
        opt = Adam(s["lr"], s["beta1"], s["beta2"], s["eps"], s["clip"])
        opt.t, opt.m, opt.v = s["t"], m, v
    return params, meta, opt, extra
