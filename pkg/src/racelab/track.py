"""Closed-track centerline geometry.

A track is a closed polyline with uniform-ish vertex spacing, a constant
half width, and derived per-vertex arclengths, tangent headings, and
signed curvatures. All arclength arithmetic is modulo the lap length.
Positive lateral offset is to the left of the direction of travel.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .seeding import stream

__all__ = [
    "Track",
    "TrackFrame",
    "gen_track",
    "save_track",
    "load_track",
]

TRACK_FORMAT = "racelab-track-v1"

MIN_POINTS = 64
MIN_SPACING = 0.5
MAX_SPACING = 10.0
MIN_HALF_WIDTH = 3.0


@dataclasses.dataclass(frozen=True)
class TrackFrame:
    """Centerline sample at a given arclength.

    Attributes
    ----------
    s : float
        Arclength of the sample, wrapped into [0, length).
    position : ndarray, shape (2,)
        World coordinates of the centerline point.
    heading : float
        Tangent direction in radians, in (-pi, pi].
    curvature : float
        Signed curvature; positive bends left.
    """

    s: float
    position: np.ndarray
    heading: float
    curvature: float


@dataclasses.dataclass(frozen=True)
class Track:
    """Closed centerline polyline with constant half width.

    Parameters
    ----------
    points : ndarray, shape (P, 2)
        Vertices in order of travel; the segment from the last vertex back
        to the first closes the circuit.
    half_width : float
        Lateral distance from centerline to either wall, >= 3.
    meta : dict
        Generation record (preset name, parameters, seed).

    Derived arrays (vertex arclengths, headings, curvatures) are computed
    once at construction. Construction validates vertex count, spacing,
    half width, and that ``|curvature| * half_width < 1`` everywhere so
    wall offsets never self-intersect.
    """

    points: np.ndarray
    half_width: float
    meta: dict = dataclasses.field(default_factory=dict)
    s_points: np.ndarray = dataclasses.field(init=False, repr=False)
    headings: np.ndarray = dataclasses.field(init=False, repr=False)
    curvatures: np.ndarray = dataclasses.field(init=False, repr=False)
    length: float = dataclasses.field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("points must have shape (P, 2)")
        if pts.shape[0] < MIN_POINTS:
            raise ValueError(f"track needs at least {MIN_POINTS} points, got {pts.shape[0]}")
        if self.half_width < MIN_HALF_WIDTH:
            raise ValueError(f"half_width must be >= {MIN_HALF_WIDTH}")
        seg = np.roll(pts, -1, axis=0) - pts
        seg_len = np.linalg.norm(seg, axis=1)
        if seg_len.min() < MIN_SPACING or seg_len.max() > MAX_SPACING:
            raise ValueError(
                f"vertex spacing must lie in [{MIN_SPACING}, {MAX_SPACING}], "
                f"got [{seg_len.min():.3g}, {seg_len.max():.3g}]"
            )
        s = np.concatenate(([0.0], np.cumsum(seg_len)))
        # Vertex tangent from the central difference on the closed loop.
        fwd = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
        headings = np.arctan2(fwd[:, 1], fwd[:, 0])
        curv = _menger_curvature(pts)
        if np.max(np.abs(curv)) * self.half_width >= 1.0:
            raise ValueError("curvature * half_width must stay below 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "s_points", s)
        object.__setattr__(self, "headings", headings)
        object.__setattr__(self, "curvatures", curv)
        object.__setattr__(self, "length", float(s[-1]))

    # -- arclength parameterization ------------------------------------

    def wrap(self, s):
        """Wrap arclength(s) into [0, length)."""
        return np.mod(s, self.length)

    def frame(self, s):
        """TrackFrame at a single arclength (scalar convenience)."""
        pos, heading, curv = self.frames(np.asarray([s], dtype=np.float64))
        return TrackFrame(float(self.wrap(s)), pos[0], float(heading[0]), float(curv[0]))

    def frames(self, s):
        """Vectorized centerline samples.

        Parameters
        ----------
        s : ndarray, shape (B,)
            Arclengths, any real values; wrapped internally.

        Returns
        -------
        positions : ndarray, shape (B, 2)
        headings : ndarray, shape (B,)
        curvatures : ndarray, shape (B,)
        """
        s = self.wrap(np.asarray(s, dtype=np.float64))
        idx = np.searchsorted(self.s_points, s, side="right") - 1
        idx = np.clip(idx, 0, len(self.points) - 1)
        nxt = (idx + 1) % len(self.points)
        s0 = self.s_points[idx]
        seg = self.s_points[idx + 1] - s0
        u = (s - s0) / seg
        p = self.points[idx] + u[:, None] * (self.points[nxt] - self.points[idx])
        h = _slerp_angle(self.headings[idx], self.headings[nxt], u)
        c = self.curvatures[idx] + u * (self.curvatures[nxt] - self.curvatures[idx])
        return p, h, c

    def curvature_at(self, s):
        """Signed curvature, linearly interpolated between vertices."""
        _, _, c = self.frames(np.atleast_1d(s))
        return c if np.ndim(s) else float(c[0])

    # -- projection ----------------------------------------------------

    def project(self, point):
        """Project one world point onto the centerline.

        Returns
        -------
        s : float
            Arclength of the closest centerline point.
        e : float
            Signed lateral offset, positive to the left of travel.
        heading : float
            Interpolated centerline heading at s.

        Raises
        ------
        ValueError
            If the point is farther than 10 * half_width from every
            vertex (projection would be meaningless).
        """
        s, e, h = self.project_many(np.asarray(point, dtype=np.float64)[None, :])
        return float(s[0]), float(e[0]), float(h[0])

    def project_many(self, pts):
        """Vectorized exact projection of (B, 2) points.

        Finds the nearest vertex per point, then solves the exact
        point-to-segment projection on the segments adjacent to it.
        """
        pts = np.asarray(pts, dtype=np.float64)
        n = len(self.points)
        d2 = ((pts[:, None, :] - self.points[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.argmin(axis=1)
        if np.sqrt(d2[np.arange(len(pts)), nearest]).max() > 10.0 * self.half_width:
            worst = int(np.argmax(d2[np.arange(len(pts)), nearest]))
            raise ValueError(
                f"point {pts[worst]} is farther than 10 * half_width from the track"
            )
        best_s = np.zeros(len(pts))
        best_d2 = np.full(len(pts), np.inf)
        best_q = np.zeros_like(pts)
        # Check the two segments touching the nearest vertex, plus one
        # more on each side to be safe near short segments.
        for off in (-2, -1, 0, 1):
            i = (nearest + off) % n
            a = self.points[i]
            b = self.points[(i + 1) % n]
            ab = b - a
            denom = (ab * ab).sum(axis=1)
            t = np.clip(((pts - a) * ab).sum(axis=1) / denom, 0.0, 1.0)
            q = a + t[:, None] * ab
            dd = ((pts - q) ** 2).sum(axis=1)
            better = dd < best_d2
            best_d2 = np.where(better, dd, best_d2)
            seg_s = self.s_points[i] + t * np.sqrt(denom)
            best_s = np.where(better, seg_s, best_s)
            best_q = np.where(better[:, None], q, best_q)
        s = self.wrap(best_s)
        _, h, _ = self.frames(s)
        tangent = np.stack([np.cos(h), np.sin(h)], axis=1)
        d = pts - best_q
        e = tangent[:, 0] * d[:, 1] - tangent[:, 1] * d[:, 0]
        return s, e, h

    # -- features ------------------------------------------------------

    def curvature_samples(self, s, v, horizon, count):
        """Curvature preview ahead of s over a speed-scaled window.

        Samples at arclengths ``s + i * (v * horizon) / count`` for
        i = 1..count. At v = 0 every sample sits at s itself.
        """
        offs = (np.arange(1, count + 1) / count) * max(float(v), 0.0) * horizon
        _, _, c = self.frames(s + offs)
        return c

    def lookahead_points(self, s, position, heading, v, horizon, count):
        """Body-frame preview of left wall, right wall, and centerline.

        Points sit at arclengths ``s + i * (v * horizon) / count`` for
        i = 1..count, offset laterally by +/- half_width for the walls,
        then rotated into the frame of (position, heading).

        Returns
        -------
        ndarray, shape (3, count, 2)
            Rows are left wall, right wall, centerline.
        """
        offs = (np.arange(1, count + 1) / count) * max(float(v), 0.0) * horizon
        centers, hs, _ = self.frames(s + offs)
        normal = np.stack([-np.sin(hs), np.cos(hs)], axis=1)
        left = centers + self.half_width * normal
        right = centers - self.half_width * normal
        world = np.stack([left, right, centers])
        rel = world - np.asarray(position, dtype=np.float64)
        cos_h, sin_h = np.cos(heading), np.sin(heading)
        body_x = rel[..., 0] * cos_h + rel[..., 1] * sin_h
        body_y = -rel[..., 0] * sin_h + rel[..., 1] * cos_h
        return np.stack([body_x, body_y], axis=-1)

    def progress_delta(self, s_now, s_prev):
        """Wrapped arclength advance from s_prev to s_now in [-L/2, L/2)."""
        d = np.mod(np.asarray(s_now) - np.asarray(s_prev) + 0.5 * self.length, self.length) - 0.5 * self.length
        return d if np.ndim(s_now) else float(d)


def _menger_curvature(pts):
    """Signed circumcircle curvature at each vertex of a closed polyline."""
    prev_pts = np.roll(pts, 1, axis=0)
    next_pts = np.roll(pts, -1, axis=0)
    a = pts - prev_pts
    b = next_pts - pts
    chord = next_pts - prev_pts
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) * np.linalg.norm(chord, axis=1)
    return np.where(denom > 0, 2.0 * cross / np.maximum(denom, 1e-12), 0.0)


def _slerp_angle(a, b, u):
    """Shortest-path interpolation between angles, wrapped to (-pi, pi]."""
    diff = np.mod(b - a + np.pi, 2.0 * np.pi) - np.pi
    out = a + u * diff
    return np.mod(out + np.pi, 2.0 * np.pi) - np.pi


# -- generation --------------------------------------------------------


def _resample_closed(dense, spacing_target):
    """Resample a dense closed curve at near-uniform arclength spacing."""
    seg = np.roll(dense, -1, axis=0) - dense
    seg_len = np.linalg.norm(seg, axis=1)
    s = np.concatenate(([0.0], np.cumsum(seg_len)))
    total = s[-1]
    count = max(MIN_POINTS, int(round(total / spacing_target)))
    targets = np.arange(count) * (total / count)
    idx = np.searchsorted(s, targets, side="right") - 1
    idx = np.clip(idx, 0, len(dense) - 1)
    u = (targets - s[idx]) / np.maximum(seg_len[idx], 1e-12)
    return dense[idx] + u[:, None] * seg[idx]


def _catmull_rom_closed(control, samples_per_seg):
    """Dense sampling of a periodic Catmull-Rom spline through control."""
    n = len(control)
    u = np.linspace(0.0, 1.0, samples_per_seg, endpoint=False)
    out = []
    for i in range(n):
        p0 = control[(i - 1) % n]
        p1 = control[i]
        p2 = control[(i + 1) % n]
        p3 = control[(i + 2) % n]
        u2 = u * u
        u3 = u2 * u
        # Standard uniform Catmull-Rom basis.
        b0 = -0.5 * u3 + u2 - 0.5 * u
        b1 = 1.5 * u3 - 2.5 * u2 + 1.0
        b2 = -1.5 * u3 + 2.0 * u2 + 0.5 * u
        b3 = 0.5 * u3 - 0.5 * u2
        out.append(
            b0[:, None] * p0 + b1[:, None] * p1 + b2[:, None] * p2 + b3[:, None] * p3
        )
    return np.concatenate(out, axis=0)


def gen_track(preset, seed=0, half_width=6.0, **params):
    """Generate a track from a named preset.

    Parameters
    ----------
    preset : {"circle", "oval", "random"}
        circle(radius), oval(radius, straight), and
        random(n_control, roughness, radius) construction rules.
    seed : int
        Master seed; only the random preset draws from it.
    half_width : float
        Track half width in meters.

    Returns
    -------
    Track
    """
    spacing = float(params.pop("spacing", 2.5))
    if preset == "circle":
        radius = float(params.pop("radius", 180.0))
        _reject_unknown(params)
        count = max(MIN_POINTS, int(round(2.0 * np.pi * radius / spacing)))
        ang = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
        pts = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        meta = {"preset": "circle", "radius": radius, "seed": int(seed), "spacing": spacing}
        return Track(pts, half_width, meta)
    if preset == "oval":
        radius = float(params.pop("radius", 90.0))
        straight = float(params.pop("straight", 250.0))
        _reject_unknown(params)
        dense = _oval_dense(radius, straight)
        pts = _resample_closed(dense, spacing)
        meta = {
            "preset": "oval",
            "radius": radius,
            "straight": straight,
            "seed": int(seed),
            "spacing": spacing,
        }
        return Track(pts, half_width, meta)
    if preset == "random":
        n_control = int(params.pop("n_control", 12))
        roughness = float(params.pop("roughness", 0.25))
        radius = float(params.pop("radius", 180.0))
        _reject_unknown(params)
        rng = stream(seed, "track")
        # Damp the perturbation until the curvature bound is satisfied.
        for attempt in range(20):
            damp = 0.85**attempt
            rr = radius * (1.0 + roughness * damp * rng.uniform(-1.0, 1.0, n_control))
            ang = np.linspace(0.0, 2.0 * np.pi, n_control, endpoint=False)
            ang = ang + rng.uniform(-0.25, 0.25, n_control) * (2.0 * np.pi / n_control) * damp
            control = rr[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            dense = _catmull_rom_closed(control, 512)
            pts = _resample_closed(dense, spacing)
            try:
                meta = {
                    "preset": "random",
                    "n_control": n_control,
                    "roughness": roughness,
                    "radius": radius,
                    "seed": int(seed),
                    "spacing": spacing,
                }
                return Track(pts, half_width, meta)
            except ValueError:
                continue
        raise ValueError("could not generate a valid random track; lower roughness")
    raise ValueError(f"unknown track preset '{preset}'")


def _oval_dense(radius, straight):
    half = straight / 2.0
    n_arc = 720
    n_str = 720
    right_arc = np.stack(
        [
            half + radius * np.cos(np.linspace(-np.pi / 2, np.pi / 2, n_arc, endpoint=False)),
            radius * np.sin(np.linspace(-np.pi / 2, np.pi / 2, n_arc, endpoint=False)),
        ],
        axis=1,
    )
    top = np.stack(
        [np.linspace(half, -half, n_str, endpoint=False), np.full(n_str, radius)], axis=1
    )
    left_arc = np.stack(
        [
            -half + radius * np.cos(np.linspace(np.pi / 2, 3 * np.pi / 2, n_arc, endpoint=False)),
            radius * np.sin(np.linspace(np.pi / 2, 3 * np.pi / 2, n_arc, endpoint=False)),
        ],
        axis=1,
    )
    bottom = np.stack(
        [np.linspace(-half, half, n_str, endpoint=False), np.full(n_str, -radius)], axis=1
    )
    return np.concatenate([right_arc, top, left_arc, bottom], axis=0)


def _reject_unknown(params):
    if params:
        raise ValueError(f"unknown track parameters: {sorted(params)}")


# -- persistence -------------------------------------------------------


def save_track(track, path):
    """Write a track as deterministic JSON (sorted keys, full precision)."""
    doc = {
        "format": TRACK_FORMAT,
        "half_width": track.half_width,
        "meta": track.meta,
        "points": [[float(x), float(y)] for x, y in track.points],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_track(path):
    """Read a track written by save_track."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != TRACK_FORMAT:
        raise ValueError(f"unrecognized track format in {path}")
    return Track(np.asarray(doc["points"], dtype=np.float64), float(doc["half_width"]), doc.get("meta", {}))
