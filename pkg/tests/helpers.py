"""Shared fixtures-by-hand for the test suite."""

from __future__ import annotations

import numpy as np

from loglm.ingest import EventRecord, apply_redteam_labels, filter_user_events, partition_days
from loglm.synth import SynthConfig, generate


def event(time=1, src="U1", dst_pc="C2", src_pc="C1", auth="Kerberos", logon="Network", orient="LogOn",
          outcome="Success", domain="DOM1", dst=None, red=False) -> EventRecord:
    return EventRecord(time, src, domain, dst or src, domain, src_pc, dst_pc, auth, logon, orient, outcome, red)


def small_synth(seed=3, **kw):
    base = dict(n_users=6, n_pcs=40, n_days=4, events_per_user_day=12, redteam_events=6, redteam_start_day=1,
                compromised_users=2, n_servers=8)
    base.update(kw)
    return generate(SynthConfig(**base), seed)


def labeled_days(corpus):
    events, _ = apply_redteam_labels(filter_user_events(corpus.events), corpus.labels)
    return list(partition_days(events))


def numeric_grad(f, params, name, eps=1e-6, max_entries=40, rng=None):
    """Central differences on up to ``max_entries`` random entries of ``params[name]``."""
    rng = rng or np.random.default_rng(0)
    arr = params[name]
    flat = arr.reshape(-1)
    idx = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        out[k] = (up - down) / (2 * eps)
    return idx, out


def assert_grads_match(f, params, grads, tol=1e-5, names=None, max_entries=40):
    """Per-tensor relative error ||num - ana|| / max(||num||, ||ana||, 1e-8) below ``tol``."""
    for name in names or params:
        idx, num = numeric_grad(f, params, name, max_entries=max_entries)
        ana = grads[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-8)
        err = np.linalg.norm(num - ana) / denom
        assert err < tol, f"{name}: relative error {err:.2e}"
