"""Recurrent language models over log lines: EM, BEM, T-EM and T-BEM.

Every variant exposes the same day-level interface used by the pipeline:

* ``score_day(seqs, users)`` -> (line losses, per-token losses)
* ``train_day(seqs, users, rng)`` -> mean training loss

A line's anomaly score is its mean per-token cross-entropy in nats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .tokenizer import PAD_ID

VARIANTS = ("em", "bem", "t-em", "t-bem")


@dataclass
class ModelConfig:
    variant: str = "em"
    embed_dim: int = 30
    hidden_dim: int = 64
    context_dim: int = 64
    batch_size: int = 64
    score_batch_size: int = 512
    lr: float = 1e-3
    clip: float = 5.0
    epochs: int = 1
    unroll: int = 3
    max_lines_per_user_day: int = 64
    reset_daily: bool = True
    dtype: str = "float32"
    seed: int = 0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("embed_dim", "hidden_dim", "batch_size", "score_batch_size", "unroll"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.max_lines_per_user_day < 0 or self.epochs < 0:
            raise ValueError("max_lines_per_user_day and epochs must be >= 0")


def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token id arrays into (ids, lengths)."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.min(initial=1) < 1:
        raise ValueError("empty token sequence")
    ids = np.full((len(seqs), int(lengths.max())), PAD_ID, dtype=np.int64)
    for k, s in enumerate(seqs):
        ids[k, : len(s)] = s
    return ids, lengths


class LineForward:
    """Everything the backward pass needs from one batched forward pass."""

    __slots__ = ("ids", "lengths", "mask", "X", "fwd", "Hf", "Hprev", "bwd", "Hb", "Hnext", "probs", "token_loss", "line_loss", "summary")


class EventModel:
    """Single-line LSTM language model, unidirectional (EM) or bidirectional (BEM).

    With ``context_dim > 0`` each token embedding is concatenated with a
    per-line context vector; the tiered model uses this as its lower tier.
    """

    def __init__(self, vocab_size: int, embed_dim: int = 30, hidden_dim: int = 64, bidirectional: bool = False,
                 context_dim: int = 0, seed: int = 0, dtype=np.float64, lr: float = 1e-3, clip: float | None = 5.0):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.bidirectional = bidirectional
        self.context_dim = context_dim
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        C, E, H = vocab_size, embed_dim, hidden_dim
        p = {"embed": nn.glorot(rng, (C, E), C, E, self.dtype)}
        p["fwd.Wx"], p["fwd.Wh"], p["fwd.b"] = nn.init_lstm(rng, E + context_dim, H, self.dtype)
        p["proj.W"] = nn.glorot(rng, (H, C), H, C, self.dtype)
        p["proj.b"] = np.zeros(C, self.dtype)
        if bidirectional:
            p["bwd.Wx"], p["bwd.Wh"], p["bwd.b"] = nn.init_lstm(rng, E + context_dim, H, self.dtype)
            p["proj.Wb"] = nn.glorot(rng, (H, C), H, C, self.dtype)
        self.params = p
        self.optimizer = nn.Adam(lr=lr, clip=clip)

    @property
    def mode(self) -> str:
        return "BEM" if self.bidirectional else "EM"

    @property
    def summary_dim(self) -> int:
        return (4 if self.bidirectional else 2) * self.hidden_dim

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- forward / backward -------------------------------------------------

    def forward(self, ids: np.ndarray, lengths: np.ndarray, context: np.ndarray | None = None) -> LineForward:
        p = self.params
        B, T = ids.shape
        fw = LineForward()
        fw.ids, fw.lengths = ids, lengths
        mask = np.arange(T)[None, :] < lengths[:, None]
        fw.mask = mask
        X = p["embed"][ids]
        if self.context_dim:
            if context is None:
                context = np.zeros((B, self.context_dim), self.dtype)
            X = np.concatenate([X, np.broadcast_to(context[:, None, :], (B, T, self.context_dim))], axis=-1)
        fw.X = X
        fwd = nn.LstmParameters.from_dict(p, "fwd.")
        fw.Hf, fw.fwd = nn.lstm_forward(fwd, X, mask)
        fw.Hprev = np.zeros_like(fw.Hf)
        fw.Hprev[:, 1:] = fw.Hf[:, :-1]
        logits = fw.Hprev @ p["proj.W"] + p["proj.b"]
        if self.bidirectional:
            bwd = nn.LstmParameters.from_dict(p, "bwd.")
            fw.Hb, fw.bwd = nn.lstm_forward(bwd, X, mask, reverse=True)
            fw.Hnext = np.zeros_like(fw.Hb)
            fw.Hnext[:, :-1] = fw.Hb[:, 1:]
            logits += fw.Hnext @ p["proj.Wb"]
        logp = nn.log_softmax(logits)
        fw.probs = np.exp(logp)
        tok = -np.take_along_axis(logp, ids[..., None], axis=-1)[..., 0]
        fw.token_loss = np.where(mask, tok, 0.0)
        fw.line_loss = fw.token_loss.sum(axis=1) / lengths
        fw.summary = self._summary(fw)
        return fw

    def _summary(self, fw: LineForward) -> np.ndarray:
        B = fw.ids.shape[0]
        last = fw.lengths - 1
        denom = fw.lengths[:, None].astype(self.dtype)
        parts = [fw.Hf[np.arange(B), last]]
        if self.bidirectional:
            parts.append(fw.Hb[:, 0])
        parts.append(fw.Hf.sum(axis=1) / denom)
        if self.bidirectional:
            parts.append(fw.Hb.sum(axis=1) / denom)
        return np.concatenate(parts, axis=-1)

    def backward(self, fw: LineForward, d_line: np.ndarray, d_summary: np.ndarray | None = None,
                 grads: dict[str, np.ndarray] | None = None):
        """Backprop ``d_line`` (dL/d line_loss, shape (B,)) and optional dL/d summary.

        Returns (grads, dL/d context or None).
        """
        p = self.params
        grads = self.zero_grads() if grads is None else grads
        B, T = fw.ids.shape
        H = self.hidden_dim
        w = (fw.mask * (d_line / fw.lengths)[:, None]).astype(self.dtype)
        dlogits = fw.probs.copy()
        np.add.at(dlogits, (np.arange(B)[:, None], np.arange(T)[None, :], fw.ids), -1.0)
        dlogits *= w[..., None]
        flat = dlogits.reshape(-1, self.vocab_size)
        grads["proj.W"] += fw.Hprev.reshape(-1, H).T @ flat
        grads["proj.b"] += flat.sum(axis=0)
        dHf = np.zeros_like(fw.Hf)
        dHf[:, :-1] = (dlogits @ p["proj.W"].T)[:, 1:]
        dHb = None
        if self.bidirectional:
            grads["proj.Wb"] += fw.Hnext.reshape(-1, H).T @ flat
            dHb = np.zeros_like(fw.Hb)
            dHb[:, 1:] = (dlogits @ p["proj.Wb"].T)[:, :-1]
        if d_summary is not None:
            self._summary_backward(fw, d_summary, dHf, dHb)
        dX = nn.lstm_backward(nn.LstmParameters.from_dict(p, "fwd."), fw.fwd, dHf, grads, "fwd.")
        if self.bidirectional:
            dX += nn.lstm_backward(nn.LstmParameters.from_dict(p, "bwd."), fw.bwd, dHb, grads, "bwd.")
        E = self.embed_dim
        np.add.at(grads["embed"], fw.ids, dX[..., :E])
        d_context = dX[..., E:].sum(axis=1) if self.context_dim else None
        return grads, d_context

    def _summary_backward(self, fw, d_summary, dHf, dHb):
        B = fw.ids.shape[0]
        H = self.hidden_dim
        last = fw.lengths - 1
        m = (fw.mask / fw.lengths[:, None])[..., None].astype(self.dtype)
        chunks = np.split(d_summary, d_summary.shape[1] // H, axis=1)
        if self.bidirectional:
            d_last_f, d_first_b, d_mean_f, d_mean_b = chunks
            dHb[:, 0] += d_first_b
            dHb += d_mean_b[:, None, :] * m
        else:
            d_last_f, d_mean_f = chunks
        dHf[np.arange(B), last] += d_last_f
        dHf += d_mean_f[:, None, :] * m

    # -- batch-level API ----------------------------------------------------

    def loss_and_grads(self, seqs: Sequence[np.ndarray], weights: np.ndarray | None = None):
        """Weighted mean line loss over ``seqs`` and its gradient."""
        ids, lengths = pad_batch(seqs)
        fw = self.forward(ids, lengths)
        w = np.ones(len(seqs)) if weights is None else np.asarray(weights, float)
        total = w.sum()
        grads, _ = self.backward(fw, (w / total).astype(self.dtype))
        return float((fw.line_loss * w).sum() / total), grads

    def train_batch(self, seqs: Sequence[np.ndarray], weights: np.ndarray | None = None) -> float:
        loss, grads = self.loss_and_grads(seqs, weights)
        self.optimizer.step(self.params, grads)
        return loss

    def score_batch(self, seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
        if any(len(s) == 0 for s in seqs):
            raise ValueError("cannot score an empty sequence")
        ids, lengths = pad_batch(seqs)
        fw = self.forward(ids, lengths)
        per_token = [fw.token_loss[k, : lengths[k]].copy() for k in range(len(seqs))]
        return fw.line_loss.astype(np.float64), per_token

    def score(self, seq: np.ndarray) -> tuple[float, np.ndarray]:
        """(line_loss, per_token_losses) for one token sequence."""
        losses, per_token = self.score_batch([np.asarray(seq)])
        return float(losses[0]), per_token[0]

    # -- day-level API ------------------------------------------------------

    def score_day(self, seqs: Sequence[np.ndarray], users: Sequence[str] | None = None, batch_size: int = 512,
                  executor=None) -> tuple[np.ndarray, list[np.ndarray]]:
        chunks = [seqs[i : i + batch_size] for i in range(0, len(seqs), batch_size)]
        results = list(executor.map(self.score_batch, chunks)) if executor else [self.score_batch(c) for c in chunks]
        losses = np.concatenate([r[0] for r in results]) if results else np.zeros(0)
        return losses, [t for r in results for t in r[1]]

    def train_day(self, seqs: Sequence[np.ndarray], users: Sequence[str] | None, rng: np.random.Generator,
                  batch_size: int = 64, epochs: int = 1) -> float:
        losses = []
        for _ in range(epochs):
            order = rng.permutation(len(seqs))
            for i in range(0, len(order), batch_size):
                losses.append(self.train_batch([seqs[k] for k in order[i : i + batch_size]]))
        return float(np.mean(losses)) if losses else float("nan")


def em_score(model: EventModel, seq: np.ndarray) -> tuple[float, np.ndarray]:
    if model.bidirectional:
        raise ValueError("em_score needs a unidirectional model")
    return model.score(seq)


def bem_score(model: EventModel, seq: np.ndarray) -> tuple[float, np.ndarray]:
    if not model.bidirectional:
        raise ValueError("bem_score needs a bidirectional model")
    return model.score(seq)


class WindowForward:
    __slots__ = ("lines", "steps", "line_loss", "h", "c")


class TieredModel:
    """Two-tier model: a per-user upper LSTM feeds context to a lower event model.

    For each user line j the lower tier reads ``[embedding, context_{j-1}]``
    at every token. The upper tier consumes ``[final state(s), mean state]``
    of the lower tier and emits ``context_j``. Only lower-tier losses exist.
    """

    def __init__(self, vocab_size: int, embed_dim: int = 30, hidden_dim: int = 64, context_dim: int = 64,
                 bidirectional: bool = False, seed: int = 0, dtype=np.float64, lr: float = 1e-3,
                 clip: float | None = 5.0, unroll: int = 3, max_lines_per_user_day: int = 64, reset_daily: bool = True):
        self.lower = EventModel(vocab_size, embed_dim, hidden_dim, bidirectional, context_dim, seed, dtype, lr, clip)
        self.context_dim = context_dim
        self.dtype = self.lower.dtype
        self.unroll = unroll
        self.max_lines_per_user_day = max_lines_per_user_day
        self.reset_daily = reset_daily
        rng = np.random.default_rng([seed, 1])
        up = {}
        up["upper.Wx"], up["upper.Wh"], up["upper.b"] = nn.init_lstm(rng, self.lower.summary_dim, context_dim, self.dtype)
        self.params = {f"lower.{k}": v for k, v in self.lower.params.items()}
        self.params.update(up)
        self.optimizer = nn.Adam(lr=lr, clip=clip)
        self.states: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def bidirectional(self) -> bool:
        return self.lower.bidirectional

    @property
    def mode(self) -> str:
        return "T-" + self.lower.mode

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def user_state(self, user: str) -> tuple[np.ndarray, np.ndarray]:
        """(h, c) of the user's upper tier; h is also the latest context vector."""
        if user not in self.states:
            z = np.zeros(self.context_dim, self.dtype)
            self.states[user] = (z, z.copy())
        return self.states[user]

    def reset_states(self):
        self.states.clear()

    # -- window forward / backward -----------------------------------------

    def forward_window(self, lines: Sequence[Sequence[np.ndarray]], h0: np.ndarray, c0: np.ndarray) -> WindowForward:
        """``lines[j][u]`` is user u's j-th line in the window; all users share L."""
        upper = nn.LstmParameters.from_dict(self.params, "upper.")
        wf = WindowForward()
        wf.lines, wf.steps = [], []
        h, c = h0, c0
        losses = []
        for batch in lines:
            ids, lengths = pad_batch(batch)
            fw = self.lower.forward(ids, lengths, context=h)
            h, c, cache = nn.lstm_step_forward(upper, fw.summary, h, c)
            wf.lines.append(fw)
            wf.steps.append(cache)
            losses.append(fw.line_loss)
        wf.line_loss = np.stack(losses, axis=1)
        wf.h, wf.c = h, c
        return wf

    def backward_window(self, wf: WindowForward, d_line: np.ndarray) -> dict[str, np.ndarray]:
        """``d_line`` (U, L). The window's initial upper state is a constant."""
        upper = nn.LstmParameters.from_dict(self.params, "upper.")
        lower_grads = self.lower.zero_grads()
        grads = {"upper.Wx": np.zeros_like(upper.Wx), "upper.Wh": np.zeros_like(upper.Wh), "upper.b": np.zeros_like(upper.b)}
        dh = np.zeros_like(wf.h)
        dc = np.zeros_like(wf.c)
        for j in range(len(wf.lines) - 1, -1, -1):
            d_summary, dh_prev, dc_prev = nn.lstm_step_backward(upper, wf.steps[j], dh, dc, grads, "upper.")
            _, d_ctx = self.lower.backward(wf.lines[j], d_line[:, j], d_summary, lower_grads)
            dh = dh_prev + d_ctx
            dc = dc_prev
        grads.update({f"lower.{k}": v for k, v in lower_grads.items()})
        return grads

    def tiered_step(self, user: str, lines: Sequence[np.ndarray]) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
        """Score the user's next window of lines and advance the user's upper state."""
        h, c = self.user_state(user)
        wf = self.forward_window([[ln] for ln in lines], h[None], c[None])
        self.states[user] = (wf.h[0], wf.c[0])
        return wf.line_loss[0].astype(np.float64), self.states[user]

    # -- day-level API ------------------------------------------------------

    def _rounds(self, users: Sequence[str], limit: int | None = None):
        """Yield groups of (user, line indices) windows processed together.

        Round r holds every user's r-th window; within a round, windows are
        grouped by length so the upper tier runs without masking.
        """
        by_user: dict[str, list[int]] = {}
        for idx, u in enumerate(users):
            by_user.setdefault(u, []).append(idx)
        names = sorted(by_user)
        if limit is not None:
            by_user = {u: ix[:limit] for u, ix in by_user.items()}
        L = self.unroll
        r = 0
        while True:
            windows = [(u, by_user[u][r * L : (r + 1) * L]) for u in names]
            windows = [w for w in windows if w[1]]
            if not windows:
                return
            for length in sorted({len(w[1]) for w in windows}, reverse=True):
                yield [w for w in windows if len(w[1]) == length]
            r += 1

    def _run_group(self, group, seqs):
        h0 = np.stack([self.user_state(u)[0] for u, _ in group])
        c0 = np.stack([self.user_state(u)[1] for u, _ in group])
        L = len(group[0][1])
        lines = [[seqs[ix[j]] for _, ix in group] for j in range(L)]
        return self.forward_window(lines, h0, c0), h0, c0

    def _commit(self, group, wf):
        for k, (u, _) in enumerate(group):
            self.states[u] = (wf.h[k].copy(), wf.c[k].copy())

    def score_day(self, seqs: Sequence[np.ndarray], users: Sequence[str], batch_size: int = 512, executor=None):
        if self.reset_daily:
            self.reset_states()
        losses = np.zeros(len(seqs))
        per_token: list[np.ndarray | None] = [None] * len(seqs)
        for group in self._rounds(users):
            for i in range(0, len(group), batch_size):
                sub = group[i : i + batch_size]
                wf, _, _ = self._run_group(sub, seqs)
                for k, (_, ix) in enumerate(sub):
                    for j, line_idx in enumerate(ix):
                        fw = wf.lines[j]
                        losses[line_idx] = wf.line_loss[k, j]
                        per_token[line_idx] = fw.token_loss[k, : fw.lengths[k]].astype(np.float64)
                self._commit(sub, wf)
        return losses, per_token

    def train_group(self, group, seqs, weights=None) -> float:
        """One optimizer step on a group of user windows; advances their states."""
        wf, _, _ = self._run_group(group, seqs)
        w = np.ones_like(wf.line_loss) if weights is None else weights
        total = w.sum()
        if total > 0:
            grads = self.backward_window(wf, (w / total).astype(self.dtype))
            self.optimizer.step(self.params, grads)
        self._commit(group, wf)
        return float((wf.line_loss * w).sum() / total) if total > 0 else float("nan")

    def train_day(self, seqs: Sequence[np.ndarray], users: Sequence[str], rng: np.random.Generator | None = None,
                  batch_size: int = 64, epochs: int = 1) -> float:
        """Joint training of both tiers on at most ``max_lines_per_user_day`` lines per user."""
        losses = []
        cap = self.max_lines_per_user_day
        if cap == 0:
            return float("nan")
        for _ in range(epochs):
            self.reset_states()
            for group in self._rounds(users, limit=cap):
                for i in range(0, len(group), batch_size):
                    losses.append(self.train_group(group[i : i + batch_size], seqs))
        if self.reset_daily:
            self.reset_states()
        return float(np.nanmean(losses)) if losses else float("nan")


def build_model(cfg: ModelConfig, vocab_size: int):
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    bidirectional = cfg.variant.endswith("bem")
    if cfg.variant.startswith("t-"):
        return TieredModel(vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.context_dim, bidirectional, cfg.seed, dtype,
                           cfg.lr, cfg.clip, cfg.unroll, cfg.max_lines_per_user_day, cfg.reset_daily)
    return EventModel(vocab_size, cfg.embed_dim, cfg.hidden_dim, bidirectional, 0, cfg.seed, dtype, cfg.lr, cfg.clip)


def model_meta(model) -> dict:
    if isinstance(model, TieredModel):
        low = model.lower
        return {"variant": model.mode.lower(), "vocab_size": low.vocab_size, "embed_dim": low.embed_dim,
                "hidden_dim": low.hidden_dim, "context_dim": model.context_dim, "unroll": model.unroll,
                "max_lines_per_user_day": model.max_lines_per_user_day, "reset_daily": model.reset_daily}
    return {"variant": model.mode.lower(), "vocab_size": model.vocab_size, "embed_dim": model.embed_dim,
            "hidden_dim": model.hidden_dim}


def save_model(model, path, seed: int | None = None):
    meta = model_meta(model)
    meta["seed"] = seed
    extra = {}
    if isinstance(model, TieredModel):
        users = sorted(model.states)
        meta["state_users"] = users
        if users:
            extra["state_h"] = np.stack([model.states[u][0] for u in users])
            extra["state_c"] = np.stack([model.states[u][1] for u in users])
    nn.save_checkpoint(path, model.params, meta, model.optimizer, extra)


def load_model(path):
    params, meta, opt, extra = nn.load_checkpoint(path)
    dtype = next(iter(params.values())).dtype
    variant = meta["variant"]
    bi = variant.endswith("bem")
    if variant.startswith("t-"):
        model = TieredModel(meta["vocab_size"], meta["embed_dim"], meta["hidden_dim"], meta["context_dim"], bi,
                            dtype=dtype, unroll=meta["unroll"], max_lines_per_user_day=meta["max_lines_per_user_day"],
                            reset_daily=meta["reset_daily"])
        for k, u in enumerate(meta.get("state_users", [])):
            model.states[u] = (extra["state_h"][k].astype(dtype), extra["state_c"][k].astype(dtype))
    else:
        model = EventModel(meta["vocab_size"], meta["embed_dim"], meta["hidden_dim"], bi, dtype=dtype)
    for k, v in params.items():
        model.params[k][...] = v
    if opt is not None:
        model.optimizer = opt
    return model, meta
