import math

import numpy as np
import pytest

from loglm.baselines import (
    BaselineConfig,
    CommonalityTracker,
    FeatureBuilder,
    FeatureSchema,
    IsolationForest,
    PcaDetector,
    SchemaError,
    average_path_length,
    baseline_run,
    build_user_day_vectors,
)
from loglm.ingest import partition_days
from loglm.metrics import auc

from helpers import event, labeled_days, small_synth

D = 86400


def test_default_schema_dimension():
    schema = FeatureSchema()
    # 4 low-cardinality fields with (5, 10, 7, 2) values, each plus an "other" bucket,
    # 6 high-cardinality fields times 4 commonality counts, one event count
    assert schema.dim == (5 + 1) + (10 + 1) + (7 + 1) + (2 + 1) + 6 * 4 + 1 == 53
    assert len(schema.names()) == schema.dim


def test_schema_rejects_unknown_field():
    with pytest.raises(SchemaError):
        FeatureSchema(low_values={"colour": ("red",)})
    with pytest.raises(SchemaError):
        FeatureSchema(high_fields=("nope",))


def test_commonality_rules():
    t = CommonalityTracker(["dst_pc"])
    assert t.classify("u", "dst_pc", "A") == (True, True)
    for _ in range(9):
        t.update("v", "dst_pc", "A")
    t.update("v", "dst_pc", "B")
    user_common, all_common = t.classify("u", "dst_pc", "B")
    assert user_common and not all_common
    assert t.classify("u", "dst_pc", "A")[1]
    # 1 of 25 < 5% of the user's history
    for _ in range(24):
        t.update("w", "dst_pc", "A")
    t.update("w", "dst_pc", "B")
    assert t.classify("w", "dst_pc", "B")[0] is False
    assert t.classify("w", "dst_pc", "A")[0] is True


def test_micro_stream_against_hand_counts():
    schema = FeatureSchema(low_values={"outcome": ("Success", "Fail")}, high_fields=("dst_pc",))
    events = [
        event(time=1, src="u1", dst_pc="A"),
        event(time=2, src="u1", dst_pc="A"),
        event(time=3, src="u2", dst_pc="B", outcome="Fail"),
        event(time=D + 1, src="u1", dst_pc="B"),
        event(time=D + 2, src="u3", dst_pc="A", outcome="Fail"),
        event(time=D + 3, src="u2", dst_pc="B"),
    ]
    # columns: Success, Fail, other, user_common, user_uncommon, all_common, all_uncommon, n
    expected = {
        (0, "u1@DOM1"): [2, 0, 0, 2, 0, 2, 0, 2],
        (0, "u2@DOM1"): [0, 1, 0, 1, 0, 0, 1, 1],
        (1, "u1@DOM1"): [1, 0, 0, 0, 1, 0, 1, 1],
        (1, "u2@DOM1"): [1, 0, 0, 1, 0, 0, 1, 1],
        (1, "u3@DOM1"): [0, 1, 0, 1, 0, 1, 0, 1],
    }
    got = {(v.day, v.user): list(v.features) for v in build_user_day_vectors(partition_days(events), schema)}
    assert got == expected


def test_unlisted_values_land_in_other():
    schema = FeatureSchema(low_values={"logon_type": ("Network",)}, high_fields=())
    (vec,) = FeatureBuilder(schema).add_day(0, [event(logon="Weird"), event(logon="Network")])
    assert list(vec.features) == [1, 1, 2]


def test_features_are_causal():
    days = labeled_days(small_synth(seed=4))
    full = list(build_user_day_vectors(days))
    prefix = list(build_user_day_vectors(days[:2]))
    for a, b in zip(full, prefix):
        assert a.user == b.user and a.day == b.day
        assert np.array_equal(a.features, b.features)


# -- PCA ----------------------------------------------------------------------


def test_pca_on_a_line_reconstructs_exactly():
    t = np.linspace(-3, 3, 30)[:, None]
    X = np.array([1.0, 2.0, -1.0]) + t * np.array([0.6, 0.0, 0.8])
    det = PcaDetector(1).fit(X)
    assert np.max(det.score(X)) < 1e-20


def test_pca_full_rank_is_zero_error():
    X = np.random.default_rng(0).normal(size=(20, 5))
    assert np.max(PcaDetector(5).fit(X).score(X)) < 1e-20


def test_pca_matches_eigh_oracle():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20, 5)) @ rng.normal(size=(5, 5))
    det = PcaDetector(2).fit(X)
    Z = X - X.mean(axis=0)
    w, V = np.linalg.eigh(Z.T @ Z)
    top = V[:, np.argsort(w)[::-1][:2]]
    resid = Z - Z @ top @ top.T
    np.testing.assert_allclose(det.score(X), (resid**2).sum(axis=1), atol=1e-8)
    np.testing.assert_allclose(det.axes @ det.axes.T, np.eye(2), atol=1e-8)


def test_pca_axes_orthonormal_beyond_rank():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 6))
    det = PcaDetector(5).fit(X)
    np.testing.assert_allclose(det.axes @ det.axes.T, np.eye(5), atol=1e-8)


def test_pca_ignores_row_order():
    X = np.random.default_rng(3).normal(size=(15, 4))
    Y = np.random.default_rng(4).normal(size=(5, 4))
    a = PcaDetector(2, standardize=True).fit(X).score(Y)
    b = PcaDetector(2, standardize=True).fit(X[::-1]).score(Y)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_pca_bad_k():
    with pytest.raises(ValueError):
        PcaDetector(6).fit(np.zeros((4, 5)))


# -- isolation forest ---------------------------------------------------------


def test_average_path_length_small_cases():
    assert average_path_length(2) == 1.0
    assert average_path_length(1) == 0.0
    assert average_path_length(0) == 0.0


@pytest.mark.parametrize("n", [3, 10, 256, 5000])
def test_average_path_length_against_exact_harmonic(n):
    exact = 2 * sum(1.0 / i for i in range(1, n)) - 2 * (n - 1) / n
    # ln(n-1) + gamma underestimates H(n-1) by about 1 / (2 (n-1))
    assert abs(average_path_length(n) - exact) < 1.0 / (n - 1)


def test_score_is_half_at_average_depth():
    X = np.random.default_rng(5).normal(size=(64, 3))
    forest = IsolationForest(10, 64, seed=0).fit(X)
    forest.expected_path_length = lambda X: np.full(len(X), forest.c_psi)
    assert np.allclose(forest.score(X), 0.5)


def test_constant_data_scores_half():
    X = np.ones((50, 4))
    forest = IsolationForest(20, 32, seed=1).fit(X)
    assert np.allclose(forest.score(X), 0.5)


def test_depths_respect_height_limit():
    X = np.random.default_rng(6).normal(size=(300, 3))
    forest = IsolationForest(10, 256, seed=2).fit(X)
    assert forest.height_limit == 8
    assert all(t.depth.max() <= 8 for t in forest.trees)


def test_gaussian_outliers_are_isolated():
    rng = np.random.default_rng(7)
    inliers = rng.normal(size=(500, 2))
    angles = np.linspace(0, 2 * math.pi, 10, endpoint=False)
    outliers = 8 * np.c_[np.cos(angles), np.sin(angles)]
    X = np.vstack([inliers, outliers])
    y = np.r_[np.zeros(500, bool), np.ones(10, bool)]
    s = IsolationForest(100, 256, seed=3).fit(X).score(X)
    assert set(np.argsort(-s)[:10]) == set(range(500, 510))
    assert auc(s, y) >= 0.95


def test_forest_is_deterministic_per_seed():
    X = np.random.default_rng(8).normal(size=(100, 3))
    a = IsolationForest(20, 64, seed=5).fit(X).score(X)
    b = IsolationForest(20, 64, seed=5).fit(X).score(X)
    c = IsolationForest(20, 64, seed=6).fit(X).score(X)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


# -- online baseline ------------------------------------------------------------


def _repeat_days(n_days=4):
    day = [event(src=u, dst_pc="S1") for u in ("a", "b", "c")]
    return [(d, [e.__class__(**{**e.__dict__, "time": d * D + 5}) for e in day]) for d in range(n_days)]


@pytest.mark.parametrize("detector", ["pca", "iso"])
def test_identical_days_score_flat(detector):
    cfg = BaselineConfig(detector=detector, pca_k=2, n_trees=20)
    schema = FeatureSchema(high_fields=("src_pc", "dst_pc"))
    for scores in baseline_run(_repeat_days(), cfg, schema):
        vals = [s.score for s in scores]
        assert max(vals) - min(vals) < 1e-9


@pytest.mark.parametrize("detector", ["pca", "iso"])
def test_planted_burst_ranks_in_top_decile(detector):
    corpus = small_synth(seed=9, n_users=30, n_pcs=80, n_days=5, events_per_user_day=40, n_servers=10)
    days = labeled_days(corpus)
    last_day, evs = days[-1]
    victim = evs[0].user_key.split("@")[0]
    burst = [event(time=last_day * D + 100 + i, src=victim, src_pc="C9", dst_pc=f"Z{i}", auth="NTLM",
                   logon="Batch", outcome="Fail", domain=corpus.events[0].src_domain) for i in range(60)]
    days[-1] = (last_day, sorted(evs + burst, key=lambda e: e.time))
    cfg = BaselineConfig(detector=detector, n_trees=100, seed=1)
    final = list(baseline_run(days, cfg))[-1]
    ranked = sorted(final, key=lambda s: -s.score)
    top = ranked[: max(1, len(ranked) // 10)]
    assert any(s.user == evs[0].user_key for s in top)


def test_baseline_no_peek():
    days = labeled_days(small_synth(seed=10))
    cfg = BaselineConfig(detector="iso", n_trees=30, seed=4)
    full = list(baseline_run(days, cfg))
    prefix = list(baseline_run(days[:2], cfg))
    for a, b in zip(full, prefix):
        assert [s.score for s in a] == [s.score for s in b]


def test_baseline_rejects_unknown_detector():
    with pytest.raises(ValueError):
        list(baseline_run(_repeat_days(), BaselineConfig(detector="svm")))
