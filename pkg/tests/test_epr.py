import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from care_reid.epr import (
    CamRecord,
    CoswRecord,
    MarginParams,
    ScoreBook,
    ScoreHistory,
    accumulate_cam,
    accumulate_cosw,
    angular_distance,
    angular_distances,
    angular_separation,
    cosw_score,
    epoch_weights,
    hyperspherical_components,
    instant_cam,
    score_samples,
    topk_spread,
)
from care_reid.metrics import detection_auc

E = math.e
UNIT = MarginParams(alpha=1.0, beta=1.0, k=3)


def ref_weights(t, T):
    raw = [math.exp(1 + math.cos(math.pi * j / T)) for j in range(1, t + 1)]
    total = math.fsum(raw)
    return [r / total for r in raw]


def record(cls, scores):
    rec = cls(0)
    for j, s in enumerate(scores, start=1):
        rec.add(j, s)
    return rec


class TestCam:
    @pytest.mark.parametrize("z, expected", [([3, 1, 0], 2.0), ([5, 5, 0], 0.0), ([1, 3, 0], -2.0)])
    def test_angular_separation(self, z, expected):
        assert angular_separation(np.array(z, float), 0) == expected

    @pytest.mark.parametrize("z, k, expected", [
        ([0, 3, 2, 1], 3, 1.0),
        ([0, 2, 2, 2], 3, 0.0),
        ([0, 4, 0, 0], 2, 2.0),
    ])
    def test_topk_spread(self, z, k, expected):
        assert topk_spread(np.array(z, float), 0, k) == pytest.approx(expected, abs=1e-15)

    def test_topk_excludes_target(self):
        # the target is the largest logit but never enters the competitor set
        assert topk_spread(np.array([9.0, 3.0, 1.0, 1.0]), 0, 2) == pytest.approx(1.0)

    @pytest.mark.parametrize("k", [1, 4])
    def test_topk_range(self, k):
        with pytest.raises(ValueError):
            topk_spread(np.zeros(4), 0, k)

    @settings(max_examples=200)
    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=12), st.data())
    def test_spread_non_negative(self, z, data):
        z = np.array(z)
        y = data.draw(st.integers(0, z.size - 1))
        k = data.draw(st.integers(2, z.size - 1))
        s = topk_spread(z, y, k)
        assert s >= 0
        comp = np.sort(np.delete(z, y))[::-1][:k]
        assert (s == 0) == bool(np.all(comp == comp[0]))

    def test_instant_cam(self):
        z = np.array([0.0, 3.0, 2.0, 1.0])
        assert instant_cam(z, 0, MarginParams(k=3)) == pytest.approx(-400.0, abs=1e-12)
        assert instant_cam(np.array([4.0, 2.0, 1.0, 0.0]), 0, UNIT) == pytest.approx(2.0 - 1.0)
        assert instant_cam(np.array([1.0, 1.0, 1.0, 1.0]), 2, UNIT) == 0.0

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(20, 8))
        y = rng.integers(0, 8, size=20)
        batch = instant_cam(z, y, MarginParams())
        single = [instant_cam(z[i], y[i], MarginParams()) for i in range(20)]
        np.testing.assert_allclose(batch, single, rtol=0, atol=0)

    def test_k_is_clamped_for_few_classes(self):
        assert MarginParams(k=5).k_for(4) == 3
        assert instant_cam(np.array([0.0, 3.0, 2.0, 1.0]), 0, MarginParams(k=5)) == pytest.approx(-400.0)


class TestEpochWeights:
    def test_examples(self):
        np.testing.assert_allclose(epoch_weights(1, 7), [1.0], atol=0)
        np.testing.assert_allclose(epoch_weights(2, 2), [E / (E + 1), 1 / (E + 1)], atol=1e-15)

    def test_against_reference(self):
        for T in (1, 5, 60, 200):
            for t in {1, max(1, T // 2), T}:
                np.testing.assert_allclose(epoch_weights(t, T), ref_weights(t, T), rtol=1e-13)

    def test_sum_and_monotone(self):
        for T in range(1, 201):
            for t in range(1, T + 1):
                w = epoch_weights(t, T)
                assert abs(w.sum() - 1.0) <= 1e-12
                assert np.all(np.diff(w) < 0)

    @pytest.mark.parametrize("t, T", [(0, 5), (6, 5), (1, 0)])
    def test_invalid(self, t, T):
        with pytest.raises(ValueError):
            epoch_weights(t, T)

    def test_non_integer(self):
        with pytest.raises(TypeError):
            epoch_weights(1.5, 3)


class TestAccumulation:
    def test_cam_examples(self):
        assert accumulate_cam(record(CamRecord, [1.0, 0.0]), 2, 2) == pytest.approx(E / (E + 1), abs=1e-15)
        assert accumulate_cam(record(CamRecord, [5.0]), 1, 10) == 5.0

    @pytest.mark.parametrize("c", [-3.5, 0.0, 0.42, 1.0, 170.0])
    def test_constant_sequence(self, c):
        for t in (1, 7, 60):
            assert accumulate_cam(record(CamRecord, [c] * t), t, 60) == pytest.approx(c, abs=1e-12)
        if 0 <= c <= 1:
            assert accumulate_cosw(record(CoswRecord, [c] * 60), 60, 60) == pytest.approx(c, abs=1e-12)

    def test_cosw_examples(self):
        assert accumulate_cosw(record(CoswRecord, [1.0] * 5), 5, 9) == pytest.approx(1.0, abs=1e-15)
        assert accumulate_cosw(record(CoswRecord, [0.0] * 5), 5, 9) == 0.0
        assert accumulate_cosw(record(CoswRecord, [1.0, 0.0]), 2, 2) == pytest.approx(0.7310585786, abs=1e-10)

    def test_cosw_stays_in_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            acc = accumulate_cosw(record(CoswRecord, rng.uniform(0, 1, size=30)), 30, 60)
            assert 0.0 <= acc <= 1.0

    def test_missing_epoch(self):
        rec = CamRecord(3)
        rec.add(1, 0.5)
        rec.add(3, 0.5)
        with pytest.raises(ValueError, match="missing"):
            accumulate_cam(rec, 3, 5)

    def test_record_ordering_and_bounds(self):
        rec = CamRecord(0)
        rec.add(2, 1.0)
        with pytest.raises(ValueError):
            rec.add(2, 1.0)
        with pytest.raises(ValueError):
            CoswRecord(0).add(1, 1.5)


class TestScoreHistory:
    def test_matches_records(self):
        rng = np.random.default_rng(2)
        h = ScoreHistory(4, 10)
        for epoch in range(1, 7):
            h.record(epoch, rng.normal(size=4))
        for i in range(4):
            assert h.accumulated()[i] == pytest.approx(accumulate_cam(h.record_for(i), 6, 10), abs=1e-12)
        np.testing.assert_allclose(h.accumulated(3), epoch_weights(3, 10) @ h.scores[:3])

    def test_sequential_epochs(self):
        h = ScoreHistory(2, 5)
        with pytest.raises(ValueError):
            h.record(2, [0.0, 0.0])
        h.record(1, [0.0, 0.0])
        with pytest.raises(ValueError):
            h.accumulated(2)
        with pytest.raises(ValueError):
            h.record(2, [0.0])

    def test_copy_is_independent(self):
        h = ScoreHistory(2, 5)
        h.record(1, [1.0, 2.0])
        c = h.copy()
        c.record(2, [3.0, 4.0])
        assert h.epochs_filled == 1 and c.epochs_filled == 2


class TestAngularDistance:
    def test_examples(self):
        v = np.array([0.3, -1.2, 2.0])
        assert angular_distance(v, v) == pytest.approx(0.0, abs=1e-15)
        assert angular_distance(v, -v) == pytest.approx(1.0, abs=1e-15)
        assert angular_distance([1.0, 0.0], [0.0, 1.0]) == 0.5

    def test_scale_invariant(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=5), rng.normal(size=5)
        assert angular_distance(3.0 * a, 0.2 * b) == pytest.approx(angular_distance(a, b), abs=1e-15)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            angular_distance([0.0, 0.0], [1.0, 0.0])

    def test_batch(self):
        rng = np.random.default_rng(4)
        e, p = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
        d = angular_distances(e, p)
        for i in range(6):
            for j in range(3):
                assert d[i, j] == pytest.approx(angular_distance(e[i], p[j]), abs=1e-14)
        assert np.all(angular_distances(np.zeros((1, 4)), p) == 0.5)


class TestHyperspherical:
    def test_example(self):
        dh, lh = hyperspherical_components(np.array([0.1, 0.4, 0.5]), 0, 2)
        assert dh == pytest.approx(-0.3, abs=1e-15)
        assert lh == pytest.approx(-0.05, abs=1e-15)

    def test_uniform_competitors_and_tie(self):
        dh, lh = hyperspherical_components(np.array([0.2, 0.2, 0.2, 0.2]), 1, 3)
        assert dh == 0.0 and lh == 0.0

    @settings(max_examples=200)
    @given(st.lists(st.floats(0, 1), min_size=3, max_size=12), st.data())
    def test_lambda_non_positive(self, d, data):
        d = np.array(d)
        y = data.draw(st.integers(0, d.size - 1))
        k = data.draw(st.integers(2, d.size - 1))
        _, lh = hyperspherical_components(d, y, k)
        assert lh <= 0.0


class TestCosw:
    def test_examples(self):
        p = MarginParams()
        assert cosw_score(0.0, 0.0, p) == 0.75
        assert cosw_score(-0.5, 0.0, p) == pytest.approx(1.0, abs=1e-12)
        assert cosw_score(0.5, -0.5, p) == pytest.approx(0.0, abs=1e-12)

    def test_grid_bounds(self):
        dh, lh = np.meshgrid(np.linspace(-1, 1, 101), np.linspace(-1, 0, 101))
        s = cosw_score(dh, lh, MarginParams())
        assert np.all((s >= 0) & (s <= 1))

    def test_monotone(self):
        p = MarginParams(alpha=10, beta=10)
        dh = np.linspace(-1, 1, 50)
        assert np.all(np.diff(cosw_score(dh, -0.1, p)) < 0)
        lh = np.linspace(-1, 0, 50)
        assert np.all(np.diff(cosw_score(0.0, lh, p)) > 0)

    def test_rejects_positive_lambda(self):
        with pytest.raises(ValueError):
            cosw_score(0.0, 0.1, MarginParams())

    def test_constructed_oracle_separation(self):
        # hard positives: confined ambiguity; mislabelled: dispersed competitors
        rng = np.random.default_rng(5)
        hard = cosw_score(rng.uniform(-0.1, 0.05, 500), rng.uniform(-0.02, 0.0, 500), MarginParams())
        noisy = cosw_score(rng.uniform(-0.05, 0.2, 500), rng.uniform(-0.5, -0.1, 500), MarginParams())
        auc = detection_auc(np.concatenate([hard, noisy]), np.r_[np.ones(500, bool), np.zeros(500, bool)])
        assert auc >= 0.95


class TestScoreSamples:
    def test_fields_consistent(self):
        rng = np.random.default_rng(6)
        emb = rng.normal(size=(10, 4))
        protos = rng.normal(size=(7, 4))
        logits = emb @ protos.T
        y = rng.integers(0, 7, size=10)
        params = MarginParams()
        s = score_samples(emb, logits, protos, y, params)
        np.testing.assert_allclose(s["instant_cam"], instant_cam(logits, y, params))
        dh, lh = hyperspherical_components(angular_distances(emb, protos), y, 5)
        np.testing.assert_allclose(s["cosw"], cosw_score(dh, lh, params))

    def test_book(self):
        rng = np.random.default_rng(7)
        book = ScoreBook(5, 4)
        for epoch in (1, 2):
            emb = rng.normal(size=(5, 3))
            protos = rng.normal(size=(4, 3))
            book.record(epoch, score_samples(emb, emb @ protos.T, protos, np.arange(5) % 4, MarginParams()))
        assert book.epochs_filled == 2
        c = book.certainty()
        assert c.shape == (5,) and np.all((c >= 0) & (c <= 1))
        np.testing.assert_allclose(c, epoch_weights(2, 4) @ book.cosw.scores[:2])
