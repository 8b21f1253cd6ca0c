"""Desk-scale synthetic authentication logs with planted red-team events.

Each user gets a small set of habitual event templates (destination pc,
auth type, logon type, orientation). Normal events are drawn from those
templates; red-team events reuse a compromised user's name against a
destination pc outside that user's support, with an auth type the user
never uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import SECONDS_PER_DAY, EventRecord, RedTeamLabel

AUTH_TYPES = ("Kerberos", "Negotiate", "NTLM", "MICROSOFT_AUTHENTICATION_PACKAGE_V1_0", "?")
LOGON_TYPES = ("Network", "Interactive", "Batch", "Service", "Unlock", "RemoteInteractive", "?")
ORIENTATIONS = ("LogOn", "LogOff", "TGS", "TGT", "AuthMap")
COMMON_AUTH = ("Kerberos", "Negotiate", "NTLM")


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_users: int = 50
    n_pcs: int = 100
    n_days: int = 20
    events_per_user_day: float = 200.0
    redteam_events: int = 40
    redteam_start_day: int = 2
    compromised_users: int = 8
    n_servers: int = 20
    templates_per_user: tuple[int, int] = (5, 9)
    template_concentration: float = 1.5  # Dirichlet concentration of per-user template weights
    fail_rate: float = 0.02
    noise_rate: float = 0.05
    machine_event_fraction: float = 0.1
    domain: str = "DOM1"

    def validate(self):
        if self.n_users < 1 or self.n_days < 1:
            raise SynthConfigError("n_users and n_days must be >= 1")
        if self.n_pcs < self.n_users + self.n_servers + 2:
            raise SynthConfigError("n_pcs must cover one workstation per user plus the server pool")
        if self.redteam_events < 0:
            raise SynthConfigError("redteam_events must be >= 0")
        if self.redteam_events and not (0 <= self.redteam_start_day < self.n_days):
            raise SynthConfigError("redteam_start_day outside the generated days")
        if self.template_concentration <= 0:
            raise SynthConfigError("template_concentration must be > 0")
        if not 0 < self.compromised_users <= self.n_users:
            raise SynthConfigError("compromised_users must be in [1, n_users]")


@dataclass
class UserProfile:
    name: str
    home_pc: str
    auth_types: list[str]
    templates: list[tuple[str, str, str, str]]
    weights: np.ndarray
    rate: float

    @property
    def dst_pcs(self) -> set[str]:
        return {t[0] for t in self.templates}


@dataclass
class SynthCorpus:
    events: list[EventRecord]
    labels: list[RedTeamLabel]
    profiles: dict[str, UserProfile] = field(default_factory=dict)


def _make_profiles(cfg: SynthConfig, rng: np.random.Generator) -> tuple[list[UserProfile], list[str]]:
    ids = rng.choice(np.arange(1, 20 * cfg.n_pcs), size=cfg.n_pcs, replace=False)
    pcs = [f"C{i}" for i in ids]
    workstations = pcs[: cfg.n_users]
    servers = pcs[cfg.n_users : cfg.n_users + cfg.n_servers]
    user_ids = rng.choice(np.arange(1, 20 * cfg.n_users), size=cfg.n_users, replace=False)
    profiles = []
    for k in range(cfg.n_users):
        name = f"U{user_ids[k]}"
        home = workstations[k]
        n_auth = int(rng.integers(1, 3))
        auth = list(rng.choice(AUTH_TYPES[:2], size=n_auth, replace=False)) if rng.random() < 0.8 else ["NTLM"]
        lo, hi = cfg.templates_per_user
        n_tmpl = int(rng.integers(lo, hi + 1))
        n_srv = int(rng.integers(2, 5))
        my_servers = list(rng.choice(servers, size=n_srv, replace=False))
        templates = [
            (home, "?", "Interactive", "LogOn"),
            (home, "?", "?", "LogOff"),
        ]
        while len(templates) < n_tmpl:
            dst = my_servers[int(rng.integers(len(my_servers)))]
            t = (
                dst,
                auth[int(rng.integers(len(auth)))],
                LOGON_TYPES[int(rng.choice(3, p=[0.7, 0.1, 0.2]))],
                ORIENTATIONS[int(rng.choice([0, 2, 3], p=[0.6, 0.25, 0.15]))],
            )
            if t not in templates:
                templates.append(t)
        weights = rng.dirichlet(np.full(len(templates), cfg.template_concentration))
        rate = cfg.events_per_user_day * float(rng.lognormal(0.0, 0.25))
        profiles.append(UserProfile(name, home, sorted(set(auth)), templates, weights, rate))
    return profiles, pcs


def generate(cfg: SynthConfig, seed: int) -> SynthCorpus:
    cfg.validate()
    rng = np.random.default_rng(seed)
    profiles, pcs = _make_profiles(cfg, rng)
    servers = pcs[cfg.n_users : cfg.n_users + cfg.n_servers]
    dom = cfg.domain
    rows: list[tuple[int, int, EventRecord]] = []
    seq = 0

    for day in range(cfg.n_days):
        base = day * SECONDS_PER_DAY
        for prof in profiles:
            n = int(rng.poisson(prof.rate))
            times = np.sort(rng.integers(8 * 3600, 19 * 3600, size=n))
            picks = rng.choice(len(prof.templates), size=n, p=prof.weights)
            fails = rng.random(n) < cfg.fail_rate
            noisy = rng.random(n) < cfg.noise_rate
            for t, p, fail, noise in zip(times, picks, fails, noisy):
                dst, auth, logon, orient = prof.templates[p]
                if noise:
                    # One off-habit protocol field on a habitual destination.
                    which = int(rng.integers(3))
                    if which == 0:
                        auth = COMMON_AUTH[int(rng.integers(len(COMMON_AUTH)))]
                    elif which == 1:
                        logon = LOGON_TYPES[int(rng.integers(len(LOGON_TYPES)))]
                    else:
                        orient = ORIENTATIONS[int(rng.integers(len(ORIENTATIONS)))]
                ev = EventRecord(
                    int(base + t), prof.name, dom, prof.name, dom, prof.home_pc, dst,
                    auth, logon, orient, "Fail" if fail else "Success",
                )
                rows.append((ev.time, seq, ev))
                seq += 1
        n_machine = int(cfg.machine_event_fraction * cfg.events_per_user_day * cfg.n_users)
        for _ in range(n_machine):
            a, b = rng.choice(len(pcs), size=2, replace=False)
            t = int(base + rng.integers(0, SECONDS_PER_DAY))
            ev = EventRecord(t, f"{pcs[a]}$", dom, f"{pcs[a]}$", dom, pcs[a], pcs[b], "Kerberos", "Network", "LogOn", "Success")
            rows.append((ev.time, seq, ev))
            seq += 1

    labels: list[RedTeamLabel] = []
    if cfg.redteam_events:
        victims = [profiles[i] for i in rng.choice(cfg.n_users, size=cfg.compromised_users, replace=False)]
        used = {(r[2].time, r[2].user_key, r[2].src_pc, r[2].dst_pc) for r in rows}
        for _ in range(cfg.redteam_events):
            prof = victims[int(rng.integers(len(victims)))]
            foreign = [pc for pc in servers if pc not in prof.dst_pcs]
            auth_choices = [a for a in COMMON_AUTH if a not in prof.auth_types]
            while True:
                day = int(rng.integers(cfg.redteam_start_day, cfg.n_days))
                t = int(day * SECONDS_PER_DAY + rng.integers(0, SECONDS_PER_DAY))
                dst = foreign[int(rng.integers(len(foreign)))]
                key = (t, f"{prof.name}@{dom}", prof.home_pc, dst)
                if key not in used:
                    used.add(key)
                    break
            auth = auth_choices[int(rng.integers(len(auth_choices)))]
            ev = EventRecord(t, prof.name, dom, prof.name, dom, prof.home_pc, dst, auth, "Network", "LogOn", "Success")
            rows.append((ev.time, seq, ev))
            seq += 1
            labels.append(RedTeamLabel(t, key[1], key[2], key[3]))

    rows.sort(key=lambda r: (r[0], r[1]))
    labels.sort(key=lambda lab: lab.key())
    return SynthCorpus([r[2] for r in rows], labels, {p.name: p for p in profiles})


def write_corpus(corpus: SynthCorpus, events_path: str | Path, labels_path: str | Path):
    with open(events_path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in corpus.events:
            fh.write(ev.serialize() + "\n")
    with open(labels_path, "w", encoding="utf-8", newline="\n") as fh:
        for lab in corpus.labels:
            fh.write(lab.serialize() + "\n")


def generate_synthetic(cfg: SynthConfig, seed: int, events_path: str | Path, labels_path: str | Path) -> SynthCorpus:
    corpus = generate(cfg, seed)
    write_corpus(corpus, events_path, labels_path)
    return corpus
