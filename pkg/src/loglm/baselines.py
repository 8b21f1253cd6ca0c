"""Aggregate user-day features with PCA and isolation-forest detectors."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .ingest import TOKEN_FIELDS, EventRecord
from .pipeline import UserDayScore

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649
DETECTORS = ("pca", "iso")

DEFAULT_LOW_VALUES = {
    "auth_type": ("?", "Kerberos", "NTLM", "Negotiate", "MICROSOFT_AUTHENTICATION_PACKAGE_V1_0"),
    "logon_type": ("?", "Network", "Service", "Batch", "Interactive", "NetworkCleartext", "NewCredentials",
                   "RemoteInteractive", "Unlock", "CachedInteractive"),
    "auth_orientation": ("LogOn", "LogOff", "TGS", "TGT", "AuthMap", "ScreenLock", "ScreenUnlock"),
    "outcome": ("Success", "Fail"),
}
DEFAULT_HIGH_FIELDS = ("src_user", "src_domain", "dst_user", "dst_domain", "src_pc", "dst_pc")
COMMONALITY = ("user_common", "user_uncommon", "all_common", "all_uncommon")


class SchemaError(ValueError):
    pass


@dataclass
class FeatureSchema:
    """Which fields get per-value counts and which get commonality counts.

    Each low-cardinality field contributes one count per listed value plus
    an ``other`` bucket; each high-cardinality field contributes four
    commonality counts; a final column counts all events.
    """

    low_values: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_LOW_VALUES))
    high_fields: tuple[str, ...] = DEFAULT_HIGH_FIELDS
    user_threshold: float = 0.05

    def __post_init__(self):
        for name in list(self.low_values) + list(self.high_fields):
            if name not in TOKEN_FIELDS:
                raise SchemaError(f"unknown field {name!r} in feature schema")
        if not 0.0 < self.user_threshold < 1.0:
            raise SchemaError("user_threshold must be in (0, 1)")

    @property
    def dim(self) -> int:
        return sum(len(v) + 1 for v in self.low_values.values()) + 4 * len(self.high_fields) + 1

    def names(self) -> list[str]:
        out = []
        for f, values in self.low_values.items():
            out += [f"{f}={v}" for v in values] + [f"{f}=<other>"]
        for f in self.high_fields:
            out += [f"{f}:{c}" for c in COMMONALITY]
        return out + ["n_events"]


@dataclass
class UserDayVector:
    user: str
    day: int
    features: np.ndarray
    is_redteam_day: bool = False


class CommonalityTracker:
    """Streaming per-user and global value frequencies for high-cardinality fields.

    ``classify`` looks only at history strictly before the event; call
    ``update`` afterwards. With no history at all a value counts as common.
    """

    def __init__(self, fields: Sequence[str], user_threshold: float = 0.05):
        self.fields = tuple(fields)
        self.threshold = user_threshold
        self.user_counts: dict[str, dict[str, Counter]] = {f: defaultdict(Counter) for f in self.fields}
        self.user_totals: dict[str, Counter] = {f: Counter() for f in self.fields}
        self.global_counts: dict[str, Counter] = {f: Counter() for f in self.fields}
        self.global_totals: Counter = Counter()
        self.events = 0

    def classify(self, user: str, f: str, value: str) -> tuple[bool, bool]:
        total_u = self.user_totals[f][user]
        user_common = total_u == 0 or self.user_counts[f][user][value] >= self.threshold * total_u
        distinct = len(self.global_counts[f])
        # count >= total/distinct, kept in integers
        all_common = distinct == 0 or self.global_counts[f][value] * distinct >= self.global_totals[f]
        return user_common, all_common

    def update(self, user: str, f: str, value: str):
        self.user_counts[f][user][value] += 1
        self.user_totals[f][user] += 1
        self.global_counts[f][value] += 1
        self.global_totals[f] += 1


class FeatureBuilder:
    """Single-pass fold from a day-ordered event stream to user-day vectors."""

    def __init__(self, schema: FeatureSchema | None = None):
        self.schema = schema or FeatureSchema()
        self.tracker = CommonalityTracker(self.schema.high_fields, self.schema.user_threshold)
        self._offsets = {}
        pos = 0
        for f, values in self.schema.low_values.items():
            self._offsets[f] = (pos, {v: i for i, v in enumerate(values)}, len(values))
            pos += len(values) + 1
        self._high_start = pos

    def add_day(self, day: int, events: Iterable[EventRecord]) -> list[UserDayVector]:
        vecs: dict[str, np.ndarray] = {}
        red: dict[str, bool] = {}
        D = self.schema.dim
        for ev in events:
            user = ev.user_key
            v = vecs.get(user)
            if v is None:
                v = vecs[user] = np.zeros(D)
                red[user] = False
            red[user] = red[user] or ev.is_redteam
            for f, (start, index, n_values) in self._offsets.items():
                v[start + index.get(getattr(ev, f), n_values)] += 1
            for k, f in enumerate(self.schema.high_fields):
                value = getattr(ev, f)
                user_common, all_common = self.tracker.classify(user, f, value)
                base = self._high_start + 4 * k
                v[base + (0 if user_common else 1)] += 1
                v[base + (2 if all_common else 3)] += 1
                self.tracker.update(user, f, value)
            v[-1] += 1
            self.tracker.events += 1
        return [UserDayVector(u, day, vecs[u], red[u]) for u in sorted(vecs)]


def build_user_day_vectors(days: Iterable[tuple[int, list[EventRecord]]], schema: FeatureSchema | None = None) -> Iterator[UserDayVector]:
    builder = FeatureBuilder(schema)
    for day, events in days:
        yield from builder.add_day(day, events)


class PcaDetector:
    """Squared reconstruction error after projecting onto the top-k principal axes."""

    def __init__(self, k: int, standardize: bool = False):
        self.k = k
        self.standardize = standardize

    def fit(self, X: np.ndarray) -> "PcaDetector":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or len(X) == 0:
            raise ValueError("PCA needs a non-empty 2-D fit set")
        D = X.shape[1]
        if not 1 <= self.k <= D:
            raise ValueError(f"k must be in [1, {D}]")
        self.mean = X.mean(axis=0)
        if self.standardize:
            std = X.std(axis=0)
            self.scale = np.where(std > 0, std, 1.0)
        else:
            self.scale = np.ones(D)
        Z = (X - self.mean) / self.scale
        # full_matrices keeps a complete orthonormal basis when k exceeds the rank
        _, _, Vt = np.linalg.svd(Z, full_matrices=True)
        self.axes = Vt[: self.k]
        return self

    def score(self, X: np.ndarray) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.mean) / self.scale
        resid = Z - (Z @ self.axes.T) @ self.axes
        return np.einsum("ij,ij->i", resid, resid)


def harmonic(i):
    return np.log(i) + EULER_GAMMA


def average_path_length(n) -> np.ndarray:
    """c(n): mean unsuccessful-search path length in a BST of n points.

    c(n) = 2 H(n-1) - 2 (n-1) / n for n > 2, c(2) = 1, else 0.
    """
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n > 2
    out[big] = 2.0 * harmonic(n[big] - 1.0) - 2.0 * (n[big] - 1.0) / n[big]
    out[n == 2] = 1.0
    return out if out.ndim else float(out)


class IsolationTree:
    """Array-backed random split tree. Leaves have feature -1."""

    def __init__(self, X: np.ndarray, height_limit: int, rng: np.random.Generator):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.size: list[int] = []
        self.depth: list[int] = []
        self.height_limit = height_limit
        self._grow(X, 0, rng)
        self.feature = np.array(self.feature)
        self.threshold = np.array(self.threshold)
        self.left = np.array(self.left)
        self.right = np.array(self.right)
        self.size = np.array(self.size)
        self.depth = np.array(self.depth)

    def _new(self, depth, size):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.size.append(size)
        self.depth.append(depth)
        return len(self.feature) - 1

    def _grow(self, X, depth, rng) -> int:
        node = self._new(depth, len(X))
        if depth >= self.height_limit or len(X) <= 1:
            return node
        lo, hi = X.min(axis=0), X.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if len(candidates) == 0:
            return node
        q = int(candidates[rng.integers(len(candidates))])
        p = rng.uniform(lo[q], hi[q])
        go_left = X[:, q] < p
        if go_left.all() or not go_left.any():
            # uniform() can return exactly lo[q]; fall back to the midpoint
            p = 0.5 * (lo[q] + hi[q])
            go_left = X[:, q] < p
        self.feature[node] = q
        self.threshold[node] = p
        left = self._grow(X[go_left], depth + 1, rng)
        right = self._grow(X[~go_left], depth + 1, rng)
        self.left[node], self.right[node] = left, right
        return node

    def path_length(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, self.feature[n]] < self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return self.depth[node] + average_path_length(self.size[node])


class IsolationForest:
    def __init__(self, n_trees: int = 100, sample_size: int = 256, seed=0):
        if n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        self.n_trees = n_trees
        self.sample_size = sample_size
        self.seed = seed

    def fit(self, X: np.ndarray) -> "IsolationForest":
        X = np.asarray(X, dtype=np.float64)
        n = len(X)
        if not 1 <= self.sample_size <= n:
            raise ValueError(f"sample_size must be in [1, {n}]")
        psi = self.sample_size
        self.height_limit = int(math.ceil(math.log2(psi))) if psi > 1 else 0
        self.c_psi = average_path_length(psi)
        rng = np.random.default_rng(self.seed)
        self.trees = []
        for _ in range(self.n_trees):
            idx = rng.choice(n, size=psi, replace=False)
            self.trees.append(IsolationTree(X[idx], self.height_limit, rng))
        return self

    def expected_path_length(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.mean([t.path_length(X) for t in self.trees], axis=0)

    def score(self, X: np.ndarray) -> np.ndarray:
        """s(x) = 2 ** (-E[h(x)] / c(psi)); 0.5 everywhere when c(psi) is 0."""
        h = self.expected_path_length(X)
        if self.c_psi == 0:
            return np.full(len(h), 0.5)
        return 2.0 ** (-h / self.c_psi)


@dataclass
class BaselineConfig:
    detector: str = "iso"
    pca_k: int = 5
    pca_standardize: bool = True
    n_trees: int = 100
    sample_size: int = 256
    seed: int = 0

    def validate(self):
        if self.detector not in DETECTORS:
            raise ValueError(f"detector must be one of {DETECTORS}, got {self.detector!r}")


def _fit_detector(cfg: BaselineConfig, X: np.ndarray, day: int):
    if cfg.detector == "pca":
        return PcaDetector(min(cfg.pca_k, X.shape[1]), cfg.pca_standardize).fit(X)
    return IsolationForest(cfg.n_trees, min(cfg.sample_size, len(X)), seed=[cfg.seed, day]).fit(X)


def baseline_run(days: Iterable[tuple[int, list[EventRecord]]], cfg: BaselineConfig | None = None,
                 schema: FeatureSchema | None = None) -> Iterator[list[UserDayScore]]:
    """Online baseline: fit on every user-day vector from earlier days, score today.

    The first day has no history and is scored by a detector fit on itself.
    """
    cfg = cfg or BaselineConfig()
    cfg.validate()
    builder = FeatureBuilder(schema)
    logger.info("aggregate feature dimension: %d", builder.schema.dim)
    history: list[np.ndarray] = []
    for day, events in days:
        vecs = builder.add_day(day, events)
        if not vecs:
            continue
        X = np.stack([v.features for v in vecs])
        fit_X = np.stack(history) if history else X
        scores = _fit_detector(cfg, fit_X, day).score(X)
        history.extend(v.features for v in vecs)
        yield [UserDayScore(day, v.user, float(s), cfg.detector, v.is_redteam_day) for v, s in zip(vecs, scores)]
