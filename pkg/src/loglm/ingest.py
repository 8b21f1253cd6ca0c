"""Authentication log ingestion: parsing, filtering, labels, day partitioning.

Lines follow the LANL authentication schema::

    time,src_user@src_domain,dst_user@dst_domain,src_pc,dst_pc,auth_type,logon_type,auth_orientation,outcome

Red-team label files carry four fields: ``time,user@domain,src_pc,dst_pc``.
"""

from __future__ import annotations

import dataclasses
import gzip
import io
import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
PLACEHOLDER = "?"
OUTCOMES = ("Success", "Fail")
MACHINE_ACCOUNT_PATTERN = r".*\$$"

# Token order used everywhere downstream; time is never tokenized.
TOKEN_FIELDS = (
    "src_user",
    "src_domain",
    "dst_user",
    "dst_domain",
    "src_pc",
    "dst_pc",
    "auth_type",
    "logon_type",
    "auth_orientation",
    "outcome",
)


class ParseError(ValueError):
    """A malformed log line. Carries the 1-based line number when known."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class EventRecord:
    time: int
    src_user: str
    src_domain: str
    dst_user: str
    dst_domain: str
    src_pc: str
    dst_pc: str
    auth_type: str
    logon_type: str
    auth_orientation: str
    outcome: str
    is_redteam: bool = False

    @property
    def day(self) -> int:
        return self.time // SECONDS_PER_DAY

    @property
    def user_key(self) -> str:
        return f"{self.src_user}@{self.src_domain}"

    def token_fields(self) -> list[str]:
        return [getattr(self, name) for name in TOKEN_FIELDS]

    def serialize(self) -> str:
        return ",".join(
            [
                str(self.time),
                f"{self.src_user}@{self.src_domain}",
                f"{self.dst_user}@{self.dst_domain}",
                self.src_pc,
                self.dst_pc,
                self.auth_type,
                self.logon_type,
                self.auth_orientation,
                self.outcome,
            ]
        )


@dataclass(frozen=True)
class RedTeamLabel:
    time: int
    user: str  # user@domain
    src_pc: str
    dst_pc: str

    def key(self) -> tuple[int, str, str, str]:
        return (self.time, self.user, self.src_pc, self.dst_pc)

    def serialize(self) -> str:
        return f"{self.time},{self.user},{self.src_pc},{self.dst_pc}"


@dataclass(frozen=True)
class DaySplit:
    """Inclusive dev/test day ranges plus days withheld entirely."""

    dev_days: tuple[int, int]
    test_days: tuple[int, int]
    skip_days: frozenset[int] = frozenset()

    def __post_init__(self):
        for lo, hi in (self.dev_days, self.test_days):
            if lo > hi:
                raise ValueError(f"empty day range ({lo}, {hi})")
        a, b = self.dev_days
        c, d = self.test_days
        if not (b < c or d < a):
            raise ValueError("dev and test day ranges overlap")

    def is_dev(self, day: int) -> bool:
        return self.dev_days[0] <= day <= self.dev_days[1] and day not in self.skip_days

    def is_test(self, day: int) -> bool:
        return self.test_days[0] <= day <= self.test_days[1] and day not in self.skip_days


def _split_account(text: str) -> tuple[str, str]:
    user, sep, domain = text.partition("@")
    if not sep:
        return user or PLACEHOLDER, PLACEHOLDER
    return user or PLACEHOLDER, domain or PLACEHOLDER


def parse_auth_line(line: str, lineno: int | None = None) -> EventRecord:
    fields = line.rstrip("\r\n").split(",")
    if len(fields) != 9:
        raise ParseError(f"expected 9 fields, got {len(fields)}", lineno)
    try:
        time = int(fields[0])
    except ValueError:
        raise ParseError(f"non-numeric time {fields[0]!r}", lineno) from None
    if time < 0:
        raise ParseError(f"negative time {time}", lineno)
    src_user, src_domain = _split_account(fields[1])
    dst_user, dst_domain = _split_account(fields[2])
    rest = [f if f else PLACEHOLDER for f in fields[3:]]
    outcome = rest[5]
    if outcome not in OUTCOMES:
        raise ParseError(f"unknown outcome {outcome!r}", lineno)
    return EventRecord(
        time, src_user, src_domain, dst_user, dst_domain, rest[0], rest[1], rest[2], rest[3], rest[4], outcome
    )


def open_text(path: str | Path) -> io.TextIOBase:
    """Open a UTF-8 text file, transparently gunzipping ``.gz`` inputs."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


class ParseStats:
    def __init__(self):
        self.lines = 0
        self.malformed = 0

    def __repr__(self):
        return f"ParseStats(lines={self.lines}, malformed={self.malformed})"


def read_events(lines: Iterable[str], stats: ParseStats | None = None) -> Iterator[EventRecord]:
    """Parse lines, skipping (and counting) malformed ones."""
    stats = stats if stats is not None else ParseStats()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        stats.lines += 1
        try:
            yield parse_auth_line(line, lineno)
        except ParseError as err:
            stats.malformed += 1
            logger.debug("skipping malformed input: %s", err)


def load_events(path: str | Path, stats: ParseStats | None = None) -> Iterator[EventRecord]:
    with open_text(path) as fh:
        yield from read_events(fh, stats)


def parse_label_line(line: str, lineno: int | None = None) -> RedTeamLabel:
    fields = line.strip().split(",")
    if len(fields) != 4:
        raise ParseError(f"expected 4 label fields, got {len(fields)}", lineno)
    try:
        time = int(fields[0])
    except ValueError:
        raise ParseError(f"non-numeric time {fields[0]!r}", lineno) from None
    return RedTeamLabel(time, fields[1], fields[2], fields[3])


def load_labels(path: str | Path) -> list[RedTeamLabel]:
    with open_text(path) as fh:
        return [parse_label_line(line, i) for i, line in enumerate(fh, 1) if line.strip()]


class UserFilter:
    """Keeps human-account events on non-skipped days."""

    def __init__(self, machine_pattern: str = MACHINE_ACCOUNT_PATTERN, skip_days: Iterable[int] = ()):
        self.machine_re = re.compile(machine_pattern)
        self.skip_days = frozenset(skip_days)
        self.dropped_machine = 0
        self.dropped_skip = 0

    def keep(self, event: EventRecord) -> bool:
        if self.machine_re.fullmatch(event.src_user):
            self.dropped_machine += 1
            return False
        if event.day in self.skip_days:
            self.dropped_skip += 1
            return False
        return True

    def __call__(self, events: Iterable[EventRecord]) -> Iterator[EventRecord]:
        return (e for e in events if self.keep(e))


def filter_user_events(
    events: Iterable[EventRecord],
    skip_days: Iterable[int] = (),
    machine_pattern: str = MACHINE_ACCOUNT_PATTERN,
) -> Iterator[EventRecord]:
    return UserFilter(machine_pattern, skip_days)(events)


class LabelIndex:
    """Red-team labels keyed by (time, user@domain, src_pc, dst_pc).

    Labels are consumed here and nowhere in training code; events carry
    only the resulting boolean.
    """

    def __init__(self, labels: Iterable[RedTeamLabel]):
        self._keys = {label.key() for label in labels}
        self._matched: set[tuple[int, str, str, str]] = set()

    def __len__(self):
        return len(self._keys)

    def apply(self, events: Iterable[EventRecord]) -> Iterator[EventRecord]:
        for event in events:
            key = (event.time, event.user_key, event.src_pc, event.dst_pc)
            if key in self._keys:
                self._matched.add(key)
                yield dataclasses.replace(event, is_redteam=True)
            else:
                yield event

    @property
    def unmatched(self) -> int:
        return len(self._keys) - len(self._matched)

    def report(self) -> str:
        return f"{self.unmatched} unmatched label" + ("" if self.unmatched == 1 else "s")


def apply_redteam_labels(events: Iterable[EventRecord], labels: Iterable[RedTeamLabel]) -> tuple[list[EventRecord], int]:
    """Eager form: returns the labelled events and the unmatched-label count."""
    index = LabelIndex(labels)
    out = list(index.apply(events))
    if index.unmatched:
        logger.warning("%s", index.report())
    return out, index.unmatched


class DayOrderError(RuntimeError):
    pass


def partition_days(events: Iterable[EventRecord]) -> Iterator[tuple[int, list[EventRecord]]]:
    """Group a time-ordered stream into (day, events) buckets.

    Within-day disorder is tolerated (events are stably sorted by time);
    a day that reappears after a later day raises ``DayOrderError``.
    """
    current = None
    bucket: list[EventRecord] = []
    seen: set[int] = set()
    for event in events:
        day = event.day
        if day != current:
            if current is not None:
                yield current, sorted(bucket, key=lambda e: e.time)
            if day in seen or (current is not None and day < current):
                raise DayOrderError(f"day {day} appears after day {current}")
            seen.add(day)
            current, bucket = day, []
        bucket.append(event)
    if current is not None:
        yield current, sorted(bucket, key=lambda e: e.time)


def group_by_user(events: Iterable[EventRecord]) -> dict[str, list[int]]:
    """Map user key -> indices of that user's events, in input order."""
    groups: dict[str, list[int]] = defaultdict(list)
    for i, event in enumerate(events):
        groups[event.user_key].append(i)
    return dict(groups)
