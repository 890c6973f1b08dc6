import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adprep.boxes import Box3D, contains, from_local
from adprep.crossview import (
    PROMOTED,
    UNKNOWN,
    AugmentationSpec,
    EmptyMatchWarning,
    MatchConfig,
    MatchSet,
    Proposal,
    apply_augmentation,
    consistency_loss,
    inverse_transform_boxes,
    inverse_transform_points,
    match_cross_view,
    promote_unknowns,
    select_top_m,
)

from oracles import brute_force_matches

IDENTITY = AugmentationSpec()


def angle_diff(a, b):
    return abs(math.remainder(a - b, 2 * math.pi))


def prop(x=0.0, y=0.0, z=0.0, score=0.5, feature=(0.0, 0.0), label=UNKNOWN):
    return Proposal(Box3D(x, y, z, 4, 2, 1.5, 0.0), np.array(feature, dtype=float), score, label)


def random_spec(rng):
    return AugmentationSpec.sample(rng)


def random_views(rng, n1, n2, spread=6.0, feat=8):
    """Two augmented views of a shared scene with jittered, partially overlapping proposals."""
    base = rng.uniform(-spread, spread, (max(n1, n2), 3))
    s1, s2 = random_spec(rng), random_spec(rng)
    views = []
    for n, spec in ((n1, s1), (n2, s2)):
        idx = rng.permutation(len(base))[:n]
        boxes = [Box3D(*(base[i] + rng.normal(0, 0.12, 3)), 4, 2, 1.5, rng.uniform(-3, 3)) for i in idx]
        _, aug = apply_augmentation(np.zeros((0, 3)), boxes, spec)
        views.append([Proposal(b, rng.normal(size=feat), float(rng.random())) for b in aug])
    return views[0], views[1], s1, s2


class TestAugmentation:
    def test_identity(self, rng):
        pts = rng.normal(size=(20, 4))
        boxes = [Box3D(1, 2, 3, 4, 2, 1, 0.5)]
        out, out_boxes = apply_augmentation(pts, boxes, IDENTITY)
        np.testing.assert_array_equal(out, pts)
        assert out_boxes == boxes

    def test_quarter_turn(self):
        out, _ = apply_augmentation(np.array([[1.0, 0, 0]]), [], AugmentationSpec(rotation=math.pi / 2))
        np.testing.assert_allclose(out, [[0, 1, 0]], atol=1e-15)

    def test_flip_x_heading(self):
        spec = AugmentationSpec(flip_x=True)
        _, (b,) = apply_augmentation(np.zeros((0, 3)), [Box3D(1, 2, 0, 4, 2, 1, 0.3)], spec)
        assert b.heading == pytest.approx(-0.3)
        assert (b.cx, b.cy) == (1, -2)
        _, (b2,) = apply_augmentation(np.zeros((0, 3)), [b], spec)
        assert b2.heading == pytest.approx(0.3) and (b2.cx, b2.cy) == (1, 2)

    def test_flip_y_heading(self):
        _, (b,) = apply_augmentation(np.zeros((0, 3)), [Box3D(1, 2, 0, 4, 2, 1, 0.3)], AugmentationSpec(flip_y=True))
        assert b.heading == pytest.approx(math.pi - 0.3)
        assert (b.cx, b.cy) == (-1, 2)

    def test_scale_sizes(self):
        _, (b,) = apply_augmentation(np.zeros((0, 3)), [Box3D(1, 2, 3, 4, 2, 1, 0)], AugmentationSpec(scale=1.2))
        np.testing.assert_allclose(b.to_list()[:6], [1.2, 2.4, 3.6, 4.8, 2.4, 1.2])

    def test_box_stays_on_its_points(self, rng):
        box = Box3D(3, -2, 0.5, 4, 2, 1.5, 0.7)
        local = np.concatenate([rng.uniform(-1, 1, (50, 3)) * [2, 1, 0.75], np.zeros((50, 1))], axis=1)
        pts = from_local(local, box)
        for _ in range(20):
            spec = random_spec(rng)
            out, (b,) = apply_augmentation(pts, [box], spec)
            assert contains(b, out[:, :3]).all()

    def test_inverse_scale(self):
        (b,) = inverse_transform_boxes([Box3D(2, 4, 6, 2, 2, 2)], AugmentationSpec(scale=2.0))
        assert (b.cx, b.cy, b.cz) == (1, 2, 3)
        assert b.size.tolist() == [1, 1, 1]

    def test_inverse_identity(self):
        boxes = [Box3D(1, 2, 3, 4, 2, 1, 0.4)]
        assert inverse_transform_boxes(boxes, IDENTITY) == boxes

    def test_round_trip_random(self, rng):
        for _ in range(200):
            spec = random_spec(rng)
            boxes = [Box3D(*rng.uniform(-50, 50, 3), *rng.uniform(0.5, 5, 3), rng.uniform(-3, 3)) for _ in range(5)]
            _, aug = apply_augmentation(np.zeros((0, 3)), boxes, spec)
            back = inverse_transform_boxes(aug, spec)
            for a, b in zip(boxes, back):
                np.testing.assert_allclose(b.to_list()[:6], a.to_list()[:6], atol=1e-9)
                assert angle_diff(a.heading, b.heading) < 1e-9

    def test_points_round_trip(self, rng):
        pts = rng.normal(size=(100, 4)) * 30
        spec = random_spec(rng)
        out, _ = apply_augmentation(pts, [], spec)
        np.testing.assert_allclose(inverse_transform_points(out, spec), pts, atol=1e-9)

    def test_default_sampler_ranges(self, rng):
        specs = [AugmentationSpec.sample(rng) for _ in range(2000)]
        assert all(0.7 <= s.scale <= 1.2 for s in specs)
        assert all(-math.pi <= s.rotation <= math.pi for s in specs)
        assert 800 < sum(s.flip_x for s in specs) < 1200


class TestTopM:
    def test_m_exceeds_n(self):
        assert select_top_m([prop(score=s) for s in (0.1, 0.2, 0.3)], 256) == [2, 1, 0]

    def test_top_two(self):
        assert set(select_top_m([prop(score=s) for s in (0.9, 0.1, 0.5)], 2)) == {0, 2}

    def test_tie(self):
        assert select_top_m([prop(score=0.5), prop(score=0.5)], 1) == [0]

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            select_top_m([prop()], 0)


class TestMatching:
    def test_identical_views(self, rng):
        view = [prop(*rng.uniform(-20, 20, 3), score=float(rng.random())) for _ in range(40)]
        m = match_cross_view(view, view, IDENTITY, IDENTITY)
        assert m.K == 40
        assert all(i == j and d == 0.0 for i, j, d in m.pairs)

    def test_top_m_limits_k(self, rng):
        view = [prop(*rng.uniform(-20, 20, 3), score=float(rng.random())) for _ in range(40)]
        assert match_cross_view(view, view, IDENTITY, IDENTITY, MatchConfig(top_m=10)).K == 10

    def test_beyond_tau(self):
        m = match_cross_view([prop(0, 0, 0)], [prop(0.5, 0, 0)], IDENTITY, IDENTITY, MatchConfig(tau=0.3))
        assert m.K == 0

    def test_strict_tau(self):
        m = match_cross_view([prop(0, 0, 0)], [prop(0.25, 0, 0)], IDENTITY, IDENTITY, MatchConfig(tau=0.25))
        assert m.K == 0

    def test_common_frame(self):
        spec = AugmentationSpec(rotation=1.0, scale=1.1, flip_x=True)
        _, (aug,) = apply_augmentation(np.zeros((0, 3)), [Box3D(5, 5, 0, 4, 2, 1.5)], spec)
        v1 = [prop(5, 5, 0)]
        v2 = [Proposal(aug, np.zeros(2), 0.5)]
        assert match_cross_view(v1, v2, IDENTITY, spec).K == 1
        # compared in the augmented frame the centers are meters apart
        assert match_cross_view(v1, v2, IDENTITY, IDENTITY).K == 0

    def test_greedy_by_distance(self):
        v1 = [prop(0, 0, 0), prop(0.2, 0, 0)]
        v2 = [prop(0.15, 0, 0)]
        m = match_cross_view(v1, v2, IDENTITY, IDENTITY)
        assert m.index_pairs() == {(1, 0)}

    def test_feature_width_mismatch(self):
        with pytest.raises(ValueError):
            match_cross_view([prop(feature=(1, 2))], [prop(feature=(1, 2, 3))], IDENTITY, IDENTITY)

    def test_empty_views(self):
        assert match_cross_view([], [prop()], IDENTITY, IDENTITY).K == 0

    def test_against_brute_force(self, rng):
        for _ in range(40):
            v1, v2, s1, s2 = random_views(rng, rng.integers(0, 80), rng.integers(0, 80))
            cfg = MatchConfig(top_m=int(rng.integers(1, 90)), tau=0.3)
            got = match_cross_view(v1, v2, s1, s2, cfg)
            expect = brute_force_matches(
                [p.box.center.tolist() for p in v1], [p.objectness for p in v1],
                [p.box.center.tolist() for p in v2], [p.objectness for p in v2],
                s1.to_dict(), s2.to_dict(), cfg.top_m, cfg.tau,
            )
            assert got.index_pairs() == expect

    def test_symmetry_and_invariants(self, rng):
        for _ in range(40):
            v1, v2, s1, s2 = random_views(rng, 60, 50)
            m = match_cross_view(v1, v2, s1, s2)
            assert match_cross_view(v2, v1, s2, s1).index_pairs() == m.transposed().index_pairs()
            left = [i for i, _, _ in m.pairs]
            right = [j for _, j, _ in m.pairs]
            assert len(set(left)) == len(left) and len(set(right)) == len(right)
            assert all(d < 0.3 for _, _, d in m.pairs)

    def test_tau_monotone(self, rng):
        v1, v2, s1, s2 = random_views(rng, 100, 100)
        ks = [match_cross_view(v1, v2, s1, s2, MatchConfig(tau=t)).K for t in (0.05, 0.1, 0.2, 0.3, 0.5)]
        assert ks == sorted(ks)


class TestConsistencyLoss:
    def test_identical_features(self, rng):
        view = [prop(*rng.uniform(-9, 9, 3), feature=rng.normal(size=4)) for _ in range(10)]
        m = match_cross_view(view, view, IDENTITY, IDENTITY)
        assert consistency_loss(m, view, view) == 0.0

    def test_worked_example(self):
        v1, v2 = [prop(feature=(1, 3))], [prop(feature=(2, 5))]
        m = MatchSet(((0, 0, 0.0),))
        # elementwise: ((1-2)^2 + (3-5)^2) / 2 / (B * K)
        expect = ((1 - 2) ** 2 + (3 - 5) ** 2) / 2 / (1 * 1)
        assert expect == 2.5
        assert consistency_loss(m, v1, v2, batch_size=1) == 2.5
        assert consistency_loss(m, v1, v2, batch_size=1, reduction="sum") == 5.0

    def test_batch_scaling(self):
        v1, v2 = [prop(feature=(1, 3))], [prop(feature=(2, 5))]
        m = MatchSet(((0, 0, 0.0),))
        assert [consistency_loss(m, v1, v2, b) for b in (1, 2, 4, 8)] == [2.5, 1.25, 0.625, 0.3125]

    def test_empty_matches_warn(self):
        with pytest.warns(EmptyMatchWarning):
            assert consistency_loss(MatchSet(), [], []) == 0.0

    @settings(max_examples=50)
    @given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_non_negative_and_permutation_invariant(self, k, c, seed):
        rng = np.random.default_rng(seed)
        v1 = [prop(feature=rng.normal(size=c)) for _ in range(k)]
        v2 = [prop(feature=rng.normal(size=c)) for _ in range(k)]
        pairs = [(i, j, 0.0) for i, j in zip(range(k), rng.permutation(k))]
        loss = consistency_loss(MatchSet(tuple(pairs)), v1, v2, 3)
        shuffled = [pairs[i] for i in rng.permutation(k)]
        assert loss >= 0
        assert loss == pytest.approx(consistency_loss(MatchSet(tuple(shuffled)), v1, v2, 3), rel=1e-12)

    def test_zero_only_when_equal(self):
        v1, v2 = [prop(feature=(1, 2))], [prop(feature=(1, 2.0001))]
        assert consistency_loss(MatchSet(((0, 0, 0.0),)), v1, v2) > 0


class TestPromotion:
    def test_no_matches(self):
        v1, v2 = [prop()], [prop()]
        assert promote_unknowns(v1, v2, MatchSet()) == (v1, v2)

    def test_both_unknown(self):
        p1, p2 = promote_unknowns([prop()], [prop()], MatchSet(((0, 0, 0.0),)))
        assert p1[0].label == PROMOTED and p2[0].label == PROMOTED

    def test_labeled_kept(self):
        p1, p2 = promote_unknowns([prop(label="Vehicle")], [prop()], MatchSet(((0, 0, 0.0),)))
        assert p1[0].label == "Vehicle" and p2[0].label == PROMOTED

    def test_never_demotes(self, rng):
        labels = ["Vehicle", "Pedestrian", "Cyclist", UNKNOWN]
        v1, v2, s1, s2 = random_views(rng, 50, 50)
        v1 = [Proposal(p.box, p.feature, p.objectness, labels[k % 4]) for k, p in enumerate(v1)]
        v2 = [Proposal(p.box, p.feature, p.objectness, labels[(k + 1) % 4]) for k, p in enumerate(v2)]
        m = match_cross_view(v1, v2, s1, s2)
        p1, p2 = promote_unknowns(v1, v2, m)
        for before, after in zip(v1 + v2, p1 + p2):
            if before.label != UNKNOWN:
                assert after.label == before.label
        matched1 = {i for i, _, _ in m.pairs}
        for k, (before, after) in enumerate(zip(v1, p1)):
            if k not in matched1:
                assert after.label == before.label
