"""Online day loop: score day k with the day k-1 model, then train on day k."""

from __future__ import annotations

import contextlib
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .ingest import DayOrderError, EventRecord
from .tokenizer import Vocabulary, tokenize

logger = logging.getLogger(__name__)

EVENT_HEADER = ("day", "user", "ordinal", "raw", "diff", "is_redteam")
USER_DAY_HEADER = ("day", "user", "score", "is_redteam_day")
AGG_MODES = ("max_raw", "max_diff")


@dataclass
class ScoredEvent:
    day: int
    user: str
    ordinal: int  # position of the event within its user-day
    raw: float
    diff: float = 0.0
    is_redteam: bool = False
    time: int = 0
    per_token: np.ndarray | None = None


@dataclass
class UserDayScore:
    day: int
    user: str
    score: float
    mode: str = "max_raw"
    is_redteam_day: bool = False


@dataclass
class DayResult:
    day: int
    events: list[ScoredEvent]
    user_days: dict[str, list[UserDayScore]]
    train_loss: float


@dataclass
class PipelineConfig:
    batch_size: int = 64
    score_batch_size: int = 512
    epochs: int = 1
    workers: int = 1
    seed: int = 0
    keep_per_token: bool = False
    checkpoint_dir: str | None = None


def diff_normalize(scored: Sequence[ScoredEvent]) -> Sequence[ScoredEvent]:
    """Set ``diff`` = raw minus the mean raw score of the same user-day."""
    groups: dict[tuple[int, str], list[ScoredEvent]] = {}
    for ev in scored:
        groups.setdefault((ev.day, ev.user), []).append(ev)
    for evs in groups.values():
        raw = np.array([e.raw for e in evs])
        diff = raw - raw.mean()
        for e, d in zip(evs, diff):
            e.diff = float(d)
    return scored


def aggregate_user_day(scored: Iterable[ScoredEvent], mode: str = "max_raw") -> list[UserDayScore]:
    if mode not in AGG_MODES:
        raise ValueError(f"mode must be one of {AGG_MODES}")
    attr = "raw" if mode == "max_raw" else "diff"
    best: dict[tuple[int, str], UserDayScore] = {}
    for ev in scored:
        key = (ev.day, ev.user)
        value = getattr(ev, attr)
        cur = best.get(key)
        if cur is None:
            best[key] = UserDayScore(ev.day, ev.user, value, mode, ev.is_redteam)
        else:
            cur.score = max(cur.score, value)
            cur.is_redteam_day = cur.is_redteam_day or ev.is_redteam
    return [best[k] for k in sorted(best)]


def rank_and_emit(scores, granularity: str = "event", top_n: int | None = None, key: str | None = None) -> list:
    """Sort descending by score, ties by (day, user, ordinal)."""
    if granularity not in ("event", "user_day"):
        raise ValueError("granularity must be 'event' or 'user_day'")
    key = key or ("raw" if granularity == "event" else "score")
    ranked = sorted(scores, key=lambda s: (-getattr(s, key), s.day, s.user, getattr(s, "ordinal", 0)))
    return ranked if top_n is None else ranked[:top_n]


@contextlib.contextmanager
def frozen(params: dict[str, np.ndarray]):
    """Make parameters read-only for the duration of a scoring pass."""
    for p in params.values():
        p.flags.writeable = False
    try:
        yield
    finally:
        for p in params.values():
            p.flags.writeable = True


def run_online(model, days: Iterable[tuple[int, list[EventRecord]]], vocab: Vocabulary, cfg: PipelineConfig | None = None,
               on_event: Callable[[ScoredEvent], None] | None = None) -> Iterator[DayResult]:
    """Yield one ``DayResult`` per day; ``model`` ends as M_k after day k.

    Raw scores are pushed to ``on_event`` as soon as a day is scored;
    diff scores and user-day aggregates need the whole day. Training sees
    token ids and user keys only.
    """
    cfg = cfg or PipelineConfig()
    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    last_day = None
    try:
        for day, events in days:
            if last_day is not None and day <= last_day:
                raise DayOrderError(f"day {day} received after day {last_day}")
            last_day = day
            if not events:
                continue
            seqs = [tokenize(e, vocab) for e in events]
            users = [e.user_key for e in events]
            with frozen(model.params):
                raw, per_token = model.score_day(seqs, users, batch_size=cfg.score_batch_size, executor=executor)
            ordinals: dict[str, int] = {}
            scored = []
            for e, r, pt in zip(events, raw, per_token):
                k = ordinals.get(e.user_key, 0)
                ordinals[e.user_key] = k + 1
                se = ScoredEvent(day, e.user_key, k, float(r), 0.0, e.is_redteam, e.time,
                                 pt if cfg.keep_per_token else None)
                scored.append(se)
                if on_event is not None:
                    on_event(se)
            diff_normalize(scored)
            user_days = {m: aggregate_user_day(scored, m) for m in AGG_MODES}
            rng = np.random.default_rng([cfg.seed, day])
            loss = model.train_day(seqs, users, rng, batch_size=cfg.batch_size, epochs=cfg.epochs) if cfg.epochs else float("nan")
            logger.info("day %d: %d events scored, train loss %.4f", day, len(events), loss)
            if cfg.checkpoint_dir:
                from .models import save_model

                save_model(model, Path(cfg.checkpoint_dir) / f"model_day{day:03d}.npz", seed=cfg.seed)
            yield DayResult(day, scored, user_days, loss)
    finally:
        if executor is not None:
            executor.shutdown()


def write_event_csv(path, results: Iterable[ScoredEvent]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for s in results:
            w.writerow([s.day, s.user, s.ordinal, repr(float(s.raw)), repr(float(s.diff)), int(s.is_redteam)])


def write_user_day_csv(path, scores: Iterable[UserDayScore]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(USER_DAY_HEADER)
        for s in scores:
            w.writerow([s.day, s.user, repr(float(s.score)), int(s.is_redteam_day)])


class ScoreWriter:
    """Streams pipeline output to the event and user-day CSVs, one day at a time."""

    def __init__(self, out_dir: str | Path):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self._files = {
            "event": open(out / "event_scores.csv", "w", newline=""),
            "max_raw": open(out / "user_day_raw.csv", "w", newline=""),
            "max_diff": open(out / "user_day_diff.csv", "w", newline=""),
        }
        self._writers = {k: csv.writer(f, lineterminator="\n") for k, f in self._files.items()}
        self._writers["event"].writerow(EVENT_HEADER)
        self._writers["max_raw"].writerow(USER_DAY_HEADER)
        self._writers["max_diff"].writerow(USER_DAY_HEADER)

    def write_day(self, result: DayResult):
        ew = self._writers["event"]
        for s in result.events:
            ew.writerow([s.day, s.user, s.ordinal, repr(float(s.raw)), repr(float(s.diff)), int(s.is_redteam)])
        for mode in AGG_MODES:
            w = self._writers[mode]
            for s in result.user_days[mode]:
                w.writerow([s.day, s.user, repr(float(s.score)), int(s.is_redteam_day)])

    def close(self):
        for f in self._files.values():
            f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_event_csv(path) -> list[ScoredEvent]:
    with open(path, newline="") as fh:
        return [
            ScoredEvent(int(r["day"]), r["user"], int(r["ordinal"]), float(r["raw"]), float(r["diff"]), r["is_redteam"] == "1")
            for r in csv.DictReader(fh)
        ]


def read_user_day_csv(path) -> list[UserDayScore]:
    with open(path, newline="") as fh:
        return [UserDayScore(int(r["day"]), r["user"], float(r["score"]), "", r["is_redteam_day"] == "1") for r in csv.DictReader(fh)]
