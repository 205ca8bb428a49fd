"""Geometry oracles for the track module.

Projection is checked against brute-force dense sampling of the
centerline; circle tracks give closed-form length and curvature; wrapped
arclength arithmetic is property-tested.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racelab.track import Track, gen_track, load_track, save_track


def dense_centerline(track, spacing=0.02):
    n = int(track.length / spacing)
    s = np.arange(n) * (track.length / n)
    pos, _, _ = track.frames(s)
    return s, pos


class TestCircleGeometry:
    def test_length_matches_inscribed_polygon(self):
        radius = 150.0
        track = gen_track("circle", radius=radius)
        n = len(track.points)
        expected = 2.0 * n * radius * np.sin(np.pi / n)
        assert abs(track.length - expected) < 1e-9 * expected

    def test_vertex_curvature_is_one_over_radius(self):
        radius = 150.0
        track = gen_track("circle", radius=radius)
        # Menger curvature of three points on a circle is exact.
        assert np.allclose(track.curvatures, 1.0 / radius, rtol=1e-9)

    def test_headings_are_tangent(self):
        track = gen_track("circle", radius=100.0)
        ang = np.arctan2(track.points[:, 1], track.points[:, 0])
        expected = np.mod(ang + np.pi / 2 + np.pi, 2 * np.pi) - np.pi
        diff = np.mod(track.headings - expected + np.pi, 2 * np.pi) - np.pi
        assert np.abs(diff).max() < 1e-9


class TestProjection:
    def test_matches_brute_force_on_random_track(self):
        track = gen_track("random", seed=7)
        rng = np.random.default_rng(0)
        s_dense, pos_dense = dense_centerline(track)
        for _ in range(40):
            s0 = rng.uniform(0, track.length)
            e0 = rng.uniform(-track.half_width, track.half_width)
            frame_pos, h, _ = track.frames(np.asarray([s0]))
            normal = np.asarray([-np.sin(h[0]), np.cos(h[0])])
            point = frame_pos[0] + e0 * normal
            s, e, _ = track.project(point)
            d_impl = np.linalg.norm(point - track.frames(np.asarray([s]))[0][0])
            brute = np.linalg.norm(pos_dense - point, axis=1)
            # Exact segment projection can only beat the sampled oracle.
            assert abs(e) <= brute.min() + 1e-9
            s_brute = s_dense[brute.argmin()]
            wrap = track.progress_delta(s, s_brute)
            assert abs(wrap) < 0.05
            assert d_impl <= brute.min() + 0.05

    def test_roundtrip_recovers_offset(self):
        track = gen_track("random", seed=3)
        rng = np.random.default_rng(1)
        for _ in range(30):
            s0 = rng.uniform(0, track.length)
            e0 = rng.uniform(-track.half_width * 0.9, track.half_width * 0.9)
            pos, h, _ = track.frames(np.asarray([s0]))
            normal = np.asarray([-np.sin(h[0]), np.cos(h[0])])
            s, e, _ = track.project(pos[0] + e0 * normal)
            # Frames interpolate vertex headings, so the offset point is
            # not exactly along a polyline normal; allow a small shift.
            assert abs(track.progress_delta(s, s0)) < 0.25
            assert abs(e - e0) < 0.05

    def test_sign_convention_left_is_positive(self):
        track = gen_track("circle", radius=100.0)
        # Counterclockwise circle: the center is to the left of travel.
        inner = np.asarray([97.0, 0.0])
        outer = np.asarray([103.0, 0.0])
        _, e_inner, _ = track.project(inner)
        _, e_outer, _ = track.project(outer)
        assert e_inner > 0
        assert e_outer < 0

    def test_far_point_rejected(self):
        track = gen_track("circle", radius=100.0)
        with pytest.raises(ValueError, match="farther"):
            track.project(np.asarray([500.0, 500.0]))

    def test_batch_matches_scalar(self):
        track = gen_track("random", seed=11)
        rng = np.random.default_rng(2)
        pts = track.points[rng.choice(len(track.points), 10)] + rng.normal(0, 2.0, (10, 2))
        s_b, e_b, h_b = track.project_many(pts)
        for i, p in enumerate(pts):
            s, e, h = track.project(p)
            assert s == s_b[i] and e == e_b[i] and h == h_b[i]


class TestFeatureSamples:
    def test_curvature_preview_collapses_at_zero_speed(self):
        track = gen_track("random", seed=5)
        c = track.curvature_samples(123.4, 0.0, horizon=5.0, count=10)
        assert c.shape == (10,)
        assert np.allclose(c, c[0])

    def test_curvature_preview_spacing(self):
        track = gen_track("circle", radius=120.0)
        c = track.curvature_samples(0.0, 30.0, horizon=5.0, count=10)
        assert np.allclose(c, 1.0 / 120.0, rtol=1e-6)

    def test_lookahead_identity_frame(self):
        track = gen_track("circle", radius=100.0)
        s0 = 0.0
        pos, h, _ = track.frames(np.asarray([s0]))
        pts = track.lookahead_points(s0, pos[0], float(h[0]), 20.0, 5.0, 5)
        assert pts.shape == (3, 5, 2)
        # Walls sit half_width left/right of center in the body frame.
        left, right, center = pts
        gaps_l = np.linalg.norm(left - center, axis=1)
        gaps_r = np.linalg.norm(right - center, axis=1)
        assert np.allclose(gaps_l, track.half_width, atol=1e-9)
        assert np.allclose(gaps_r, track.half_width, atol=1e-9)
        # All preview points are ahead of the car.
        assert (center[:, 0] > 0).all()

    def test_lookahead_at_zero_speed_stays_at_s(self):
        track = gen_track("random", seed=9)
        pos, h, _ = track.frames(np.asarray([50.0]))
        pts = track.lookahead_points(50.0, pos[0], float(h[0]), 0.0, 5.0, 5)
        assert np.allclose(pts[2], 0.0, atol=1e-9)


class TestProgressDelta:
    @settings(max_examples=200, deadline=None)
    @given(
        st.floats(0.0, 1.0, allow_nan=False, width=64),
        st.floats(0.0, 1.0, allow_nan=False, width=64),
    )
    def test_bounded_and_antisymmetric(self, u1, u2):
        track = gen_track("circle", radius=100.0)
        a = u1 * track.length
        b = u2 * track.length
        d = track.progress_delta(a, b)
        assert -track.length / 2 - 1e-9 <= d < track.length / 2 + 1e-9
        if abs(abs(d) - track.length / 2) > 1e-9:
            assert abs(track.progress_delta(b, a) + d) < 1e-9

    def test_wraps_across_start_line(self):
        track = gen_track("circle", radius=100.0)
        near_end = track.length - 1.0
        assert abs(track.progress_delta(1.0, near_end) - 2.0) < 1e-9
        assert abs(track.progress_delta(near_end, 1.0) + 2.0) < 1e-9


class TestValidation:
    def test_too_few_points_rejected(self):
        ang = np.linspace(0, 2 * np.pi, 16, endpoint=False)
        pts = 10.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        with pytest.raises(ValueError, match="points"):
            Track(pts, 3.0)

    def test_narrow_half_width_rejected(self):
        ang = np.linspace(0, 2 * np.pi, 256, endpoint=False)
        pts = 100.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        with pytest.raises(ValueError, match="half_width"):
            Track(pts, 1.0)

    def test_tight_curvature_rejected(self):
        # Radius 5 circle with half width 6 violates curvature * width < 1.
        ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        pts = 5.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        with pytest.raises(ValueError):
            Track(pts, 6.0)

    def test_spacing_bounds_rejected(self):
        ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        pts = 2000.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        with pytest.raises(ValueError, match="spacing"):
            Track(pts, 6.0)


class TestGenerationAndPersistence:
    def test_random_same_seed_is_identical(self):
        t1 = gen_track("random", seed=42)
        t2 = gen_track("random", seed=42)
        assert np.array_equal(t1.points, t2.points)

    def test_random_different_seeds_differ(self):
        t1 = gen_track("random", seed=1)
        t2 = gen_track("random", seed=2)
        assert not np.array_equal(t1.points, t2.points)

    def test_generated_tracks_satisfy_invariants(self):
        for seed in range(6):
            track = gen_track("random", seed=seed)
            assert len(track.points) >= 64
            assert np.abs(track.curvatures).max() * track.half_width < 1.0

    def test_oval_has_straight_and_curved_sections(self):
        track = gen_track("oval", radius=80.0, straight=200.0)
        curv = np.abs(track.curvatures)
        assert curv.min() < 1e-4
        assert abs(curv.max() - 1.0 / 80.0) < 2e-3

    def test_save_load_roundtrip(self, tmp_path):
        track = gen_track("random", seed=13)
        path = tmp_path / "track.json"
        save_track(track, path)
        loaded = load_track(path)
        assert np.array_equal(loaded.points, track.points)
        assert loaded.half_width == track.half_width
        assert loaded.meta == track.meta

    def test_save_is_byte_deterministic(self, tmp_path):
        track = gen_track("random", seed=13)
        p1 = tmp_path / "a.json"
        p2 = tmp_path / "b.json"
        save_track(track, p1)
        save_track(gen_track("random", seed=13), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError, match="preset"):
            gen_track("figure8")

    def test_unknown_parameter_rejected(self):
        with pytest.raises(ValueError, match="unknown track parameters"):
            gen_track("circle", radius=100.0, bogus=3)
