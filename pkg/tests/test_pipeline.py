import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loglm.ingest import DayOrderError
from loglm.models import ModelConfig, build_model
from loglm.pipeline import (
    EVENT_HEADER,
    USER_DAY_HEADER,
    PipelineConfig,
    ScoredEvent,
    ScoreWriter,
    aggregate_user_day,
    diff_normalize,
    frozen,
    rank_and_emit,
    read_event_csv,
    read_user_day_csv,
    run_online,
)
from loglm.tokenizer import build_word_vocab

from helpers import labeled_days, small_synth


def _se(raw, user="u", day=0, ordinal=0, red=False):
    return ScoredEvent(day, user, ordinal, raw, is_redteam=red)


def test_diff_normalize_examples():
    a, b = _se(2.0), _se(4.0, ordinal=1)
    diff_normalize([a, b])
    assert (a.diff, b.diff) == (-1.0, 1.0)
    lone = _se(3.3)
    diff_normalize([lone])
    assert lone.diff == 0.0


@settings(max_examples=50)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=1000))
def test_diff_mean_is_zero_per_user_day(raws):
    evs = [_se(r, ordinal=i) for i, r in enumerate(raws)]
    diff_normalize(evs)
    assert abs(np.mean([e.diff for e in evs])) < 1e-9


@given(st.lists(st.tuples(st.sampled_from("abc"), st.floats(0, 20)), min_size=1, max_size=60))
def test_user_day_max_dominates_events(items):
    evs = [_se(r, user=u, ordinal=i) for i, (u, r) in enumerate(items)]
    diff_normalize(evs)
    for mode, attr in (("max_raw", "raw"), ("max_diff", "diff")):
        agg = {s.user: s.score for s in aggregate_user_day(evs, mode)}
        for e in evs:
            assert agg[e.user] >= getattr(e, attr)


def test_aggregate_examples():
    evs = [_se(1.2), _se(3.4, ordinal=1, red=True), _se(0.5, ordinal=2), _se(7.0, user="v")]
    diff_normalize(evs)
    out = {s.user: s for s in aggregate_user_day(evs, "max_raw")}
    assert out["u"].score == 3.4 and out["u"].is_redteam_day
    assert out["v"].score == 7.0 and not out["v"].is_redteam_day
    diff = {s.user: s.score for s in aggregate_user_day(evs, "max_diff")}
    assert diff["u"] == pytest.approx(3.4 - (1.2 + 3.4 + 0.5) / 3)
    assert diff["v"] == 0.0
    with pytest.raises(ValueError):
        aggregate_user_day(evs, "mean")


def test_rank_and_emit_orders_descending_with_tie_breaks():
    evs = [_se(0.1, ordinal=0), _se(0.9, ordinal=1), _se(0.5, ordinal=2)]
    assert [e.ordinal for e in rank_and_emit(evs)] == [1, 2, 0]
    ties = [_se(1.0, user="b"), _se(1.0, user="a", day=1), _se(1.0, user="a")]
    assert [(e.day, e.user) for e in rank_and_emit(ties)] == [(0, "a"), (0, "b"), (1, "a")]
    assert len(rank_and_emit(evs, top_n=2)) == 2


# -- online loop --------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus_days():
    return labeled_days(small_synth())


@pytest.fixture(scope="module")
def vocab(corpus_days):
    return build_word_vocab([e for _, evs in corpus_days[:1] for e in evs], 1)


def _model(vocab, variant="em"):
    cfg = ModelConfig(variant=variant, embed_dim=6, hidden_dim=8, context_dim=4, dtype="float64", seed=3)
    return build_model(cfg, vocab.size)


def _run(vocab, days, variant="em", **kw):
    return list(run_online(_model(vocab, variant), days, vocab, PipelineConfig(batch_size=8, seed=1, **kw)))


@pytest.mark.parametrize("variant", ["em", "t-bem"])
def test_no_peek_prefix_runs_match(corpus_days, vocab, variant):
    full = _run(vocab, corpus_days, variant)
    prefix = _run(vocab, corpus_days[:2], variant)
    for a, b in zip(full[:2], prefix):
        assert [e.raw for e in a.events] == [e.raw for e in b.events]


def test_labels_never_reach_training(corpus_days, vocab):
    flipped = [(d, [dataclasses.replace(e, is_redteam=not e.is_redteam) for e in evs]) for d, evs in corpus_days]
    a = _run(vocab, corpus_days)
    b = _run(vocab, flipped)
    assert [e.raw for r in a for e in r.events] == [e.raw for r in b for e in r.events]


def test_runs_are_deterministic_and_thread_safe(corpus_days, vocab):
    a = _run(vocab, corpus_days, "bem")
    b = _run(vocab, corpus_days, "bem", workers=2, score_batch_size=7)
    assert [e.raw for r in a for e in r.events] == pytest.approx([e.raw for r in b for e in r.events], abs=1e-12)
    assert [r.train_loss for r in a] == pytest.approx([r.train_loss for r in b], abs=1e-12)


def test_single_day_run(corpus_days, vocab):
    (result,) = _run(vocab, corpus_days[:1])
    assert len(result.events) == len(corpus_days[0][1])
    assert np.isfinite(result.train_loss)


def test_out_of_order_days_raise(corpus_days, vocab):
    days = [corpus_days[1], corpus_days[0]]
    with pytest.raises(DayOrderError):
        _run(vocab, days)


def test_days_are_pulled_lazily(corpus_days, vocab):
    pulled = []

    def source():
        for d, evs in corpus_days:
            pulled.append(d)
            yield d, evs

    gen = run_online(_model(vocab), source(), vocab, PipelineConfig(batch_size=8))
    first = next(gen)
    assert first.day == corpus_days[0][0]
    assert pulled == [corpus_days[0][0]]


def test_scoring_runs_with_frozen_parameters(corpus_days, vocab):
    model = _model(vocab)
    params = model.params
    with frozen(params):
        with pytest.raises(ValueError):
            params["proj.b"][0] = 1.0
    params["proj.b"][0] = 1.0


def test_scores_stream_to_callback(corpus_days, vocab):
    seen = []
    results = list(run_online(_model(vocab), corpus_days[:2], vocab, PipelineConfig(batch_size=8), on_event=seen.append))
    assert len(seen) == sum(len(r.events) for r in results)


def test_score_writer_and_readers_roundtrip(tmp_path, corpus_days, vocab):
    results = _run(vocab, corpus_days[:2])
    with ScoreWriter(tmp_path) as w:
        for r in results:
            w.write_day(r)
    assert (tmp_path / "event_scores.csv").read_text().splitlines()[0] == ",".join(EVENT_HEADER)
    assert (tmp_path / "user_day_diff.csv").read_text().splitlines()[0] == ",".join(USER_DAY_HEADER)
    back = read_event_csv(tmp_path / "event_scores.csv")
    flat = [e for r in results for e in r.events]
    assert [(e.day, e.user, e.ordinal, e.raw, e.diff, e.is_redteam) for e in back] == \
        [(e.day, e.user, e.ordinal, e.raw, e.diff, e.is_redteam) for e in flat]
    ud = read_user_day_csv(tmp_path / "user_day_raw.csv")
    assert [u.score for u in ud] == [u.score for r in results for u in r.user_days["max_raw"]]
