"""Batched racing environment: dynamics, observations, rewards, logging.

Observation layout, with N curvature samples and n lookahead points
(defaults N=10, n=5 give dimension 50):

    [0:3)      body velocity (v_x, v_y, 0)
    [3:6)      body acceleration, backward difference over dt (third 0)
    [6]        world yaw, wrapped to (-pi, pi]
    [7]        yaw rate, backward difference over dt
    [8:8+N)    signed curvature preview over a speed-scaled horizon
    [8+N:10+N) cos and sin of heading error against the local track
    [10+N:...) lookahead points in the body frame: n left-wall points,
               then n right-wall points, then n centerline points, each
               as (x, y)

The backward differences use a zeroed previous velocity at episode start
(so the first acceleration reads v/dt) and a copied previous yaw (so the
first yaw rate reads 0).

State and actions are quantized to the float32 grid at every step
boundary; all trajectory logs store float32, which makes open-loop replay
of a logged episode bit-exact. Internal dynamics math runs in float64.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import vehicle as veh
from .nets import load_params, save_params

__all__ = [
    "EpisodeConfig",
    "Normalizer",
    "RaceEnv",
    "RolloutError",
    "obs_dim",
    "rl_reward",
    "rollout",
    "save_trajectory_log",
    "load_trajectory_log",
]

TRAJ_FORMAT = "racelab-traj-v1"


class RolloutError(RuntimeError):
    """Raised when a policy emits unusable actions during a rollout."""


@dataclasses.dataclass(frozen=True)
class EpisodeConfig:
    """Stepping and feature extraction settings.

    dt is the control period; train_steps and eval_steps are episode
    lengths in steps; progress_weight is the off-course speed penalty
    coefficient in the environment reward.
    """

    dt: float = 0.1
    train_steps: int = 500
    eval_steps: int = 5000
    n_cars: int = 20
    curvature_count: int = 10
    lookahead_count: int = 5
    preview_horizon: float = 5.0
    progress_weight: float = 0.01

    @staticmethod
    def from_dict(d):
        return EpisodeConfig(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


def obs_dim(cfg):
    """Observation dimensionality implied by the feature counts."""
    return 10 + cfg.curvature_count + 6 * cfg.lookahead_count


def _quant(x):
    """Snap values to the float32 grid, keeping float64 storage."""
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclasses.dataclass
class Normalizer:
    """Per-dimension affine whitening fitted on demonstration data."""

    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def fit(data, floor=1e-6):
        data = np.asarray(data, dtype=np.float64)
        mean = data.mean(axis=0)
        std = np.maximum(data.std(axis=0), floor)
        return Normalizer(mean.astype(np.float32), std.astype(np.float32))

    @staticmethod
    def identity(dim):
        return Normalizer(np.zeros(dim, dtype=np.float32), np.ones(dim, dtype=np.float32))

    def transform(self, x):
        return ((np.asarray(x, dtype=np.float32) - self.mean) / self.std).astype(np.float32)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_dict(d):
        return Normalizer(
            np.asarray(d["mean"], dtype=np.float32), np.asarray(d["std"], dtype=np.float32)
        )


OBS_CLIP = 10.0


def clip_obs(z):
    """Saturate whitened observations before any network consumes them.

    Off-distribution states (stalls, wall scrapes) can push individual
    features hundreds of standard deviations out; bounded inputs keep
    every network in a sane regime there.
    """
    return np.clip(z, -OBS_CLIP, OBS_CLIP)


def rl_reward(progress, offcourse_speed_sq, progress_weight):
    """Course progress minus the weighted off-course speed penalty."""
    return progress - progress_weight * offcourse_speed_sq


class RaceEnv:
    """Synchronous batch of cars on one track.

    reset() or reset_eval() must be called before step(). All public
    outputs (observations, progress, penalties) are float32-exact; the
    held state is float32-quantized after every transition.
    """

    def __init__(self, track, params, cfg):
        self.track = track
        self.params = params
        self.cfg = cfg
        self.state = None
        self.s = None
        self.prev_vel = None
        self.prev_yaw = None
        self.cum_progress = None
        self.step_idx = 0

    @property
    def n_cars(self):
        return 0 if self.state is None else len(self.state.yaw)

    def reset(self, positions, yaws, speeds, v_y=None, yaw_rate=None):
        """Place cars explicitly, in steady motion.

        v_y and yaw_rate describe the motion the cars are already in
        (defaults: straight-line cruise). The first observation reports
        zero acceleration and the given yaw rate, exactly as if the cars
        had been driving that way.
        """
        state = veh.initial_state(_quant(positions), _quant(yaws), _quant(speeds))
        if v_y is not None:
            state.v_y = _quant(np.asarray(v_y, dtype=np.float64))
        s, e, _ = self.track.project_many(state.position)
        self.state = state
        self.s = s
        self.prev_vel = np.stack([state.v_x, state.v_y], axis=1)
        self.prev_yaw = state.yaw.copy()
        if yaw_rate is not None:
            self.prev_yaw = self.prev_yaw - np.asarray(yaw_rate, dtype=np.float64) * self.cfg.dt
        self.cum_progress = np.zeros(len(s), dtype=np.float64)
        self.step_idx = 0
        return self._observe()

    def reset_eval(self, n_cars, offset_rng, speed_lookup):
        """Evenly spaced flying start along the lap.

        Cars are placed on the centerline at arclengths offset + k * L / n
        for a seeded uniform offset, at the speed the demonstrations used
        near that arclength, in the steady cornering state the local
        curvature implies (matching attitude, lateral speed, yaw rate).
        """
        offset = float(offset_rng.uniform(0.0, self.track.length))
        s0 = np.mod(offset + np.arange(n_cars) * self.track.length / n_cars, self.track.length)
        pos, heading, curv = self.track.frames(s0)
        speeds = speed_lookup(s0)
        p = self.params
        delta = np.arctan(p.wheelbase * curv)
        beta = np.arctan(p.lr_ratio * np.tan(delta))
        yaw_rate = speeds / p.wheelbase * np.tan(delta) * np.cos(beta)
        return self.reset(pos, heading - beta, speeds,
                          v_y=speeds * np.tan(beta), yaw_rate=yaw_rate)

    def step(self, actions):
        """Advance one control period.

        Returns (obs, progress, offcourse_speed_sq, wall_flags), each a
        float32-exact array over cars. progress is the wrapped arclength
        advance in meters; offcourse_speed_sq is squared speed for cars
        in wall contact, 0 otherwise.
        """
        act = _quant(np.clip(actions, -1.0, 1.0))
        prev_vel = np.stack([self.state.v_x, self.state.v_y], axis=1)
        prev_yaw = self.state.yaw.copy()
        state = veh.step(self.state, act, self.params, self.cfg.dt)
        state.position = _quant(state.position)
        state.yaw = _quant(state.yaw)
        state.v_x = _quant(state.v_x)
        state.v_y = _quant(state.v_y)
        s, e, h = self.track.project_many(state.position)
        state = veh.enforce_track_limits(state, self.track, self.params, s, e, h)
        clamped = state.wall_contact > 0
        if clamped.any():
            state.position = _quant(state.position)
            state.v_x = _quant(state.v_x)
        progress = self.track.progress_delta(s, self.s)
        speed_sq = state.v_x**2 + state.v_y**2
        pen = np.where(clamped, speed_sq, 0.0)
        self.prev_vel = prev_vel
        self.prev_yaw = prev_yaw
        self.state = state
        self.s = s
        self.cum_progress += progress
        self.step_idx += 1
        obs = self._observe()
        return obs, progress.astype(np.float32), pen.astype(np.float32), state.wall_contact.astype(np.float32)

    def _observe(self):
        cfg = self.cfg
        state = self.state
        b = len(state.yaw)
        n_curv = cfg.curvature_count
        n_look = cfg.lookahead_count
        out = np.zeros((b, obs_dim(cfg)), dtype=np.float64)
        vel = np.stack([state.v_x, state.v_y], axis=1)
        out[:, 0:2] = vel
        out[:, 3:5] = (vel - self.prev_vel) / cfg.dt
        out[:, 6] = state.yaw
        dyaw = np.mod(state.yaw - self.prev_yaw + np.pi, 2 * np.pi) - np.pi
        out[:, 7] = dyaw / cfg.dt
        # Speed-scaled preview arclengths, one row per car.
        span = np.maximum(state.v_x, 0.0) * cfg.preview_horizon
        s_curv = self.s[:, None] + (np.arange(1, n_curv + 1) / n_curv)[None, :] * span[:, None]
        _, _, curv = self.track.frames(s_curv.reshape(-1))
        out[:, 8 : 8 + n_curv] = curv.reshape(b, n_curv)
        _, h_here, _ = self.track.frames(self.s)
        psi = np.mod(state.yaw - h_here + np.pi, 2 * np.pi) - np.pi
        out[:, 8 + n_curv] = np.cos(psi)
        out[:, 9 + n_curv] = np.sin(psi)
        s_look = self.s[:, None] + (np.arange(1, n_look + 1) / n_look)[None, :] * span[:, None]
        centers, hs, _ = self.track.frames(s_look.reshape(-1))
        centers = centers.reshape(b, n_look, 2)
        hs = hs.reshape(b, n_look)
        normal = np.stack([-np.sin(hs), np.cos(hs)], axis=2)
        hw = self.track.half_width
        base = 10 + n_curv
        cos_y = np.cos(state.yaw)[:, None]
        sin_y = np.sin(state.yaw)[:, None]
        for block, world in enumerate((centers + hw * normal, centers - hw * normal, centers)):
            rel = world - state.position[:, None, :]
            bx = rel[..., 0] * cos_y + rel[..., 1] * sin_y
            by = -rel[..., 0] * sin_y + rel[..., 1] * cos_y
            cols = base + block * 2 * n_look
            out[:, cols : cols + 2 * n_look : 2] = bx
            out[:, cols + 1 : cols + 2 * n_look : 2] = by
        return out.astype(np.float32)


def rollout(env, policy, steps, log_states=False):
    """Drive the batch for a fixed number of steps.

    policy(obs) maps the latest float32 observations (B, D) to
    (actions (B, 2) float32, extras dict of per-car arrays); extras are
    stacked over time in the returned log. Raises RolloutError naming the
    car and step if the policy emits non-finite actions.

    The returned dict holds obs (B, T+1, D), actions (B, T, 2), progress,
    pen, wall (each (B, T)), stacked extras, and optionally the state
    trail for replay checks.
    """
    obs = env._observe()
    b = len(obs)
    obs_seq = [obs]
    act_seq, prog_seq, pen_seq, wall_seq = [], [], [], []
    extras_seq = {}
    states = {"position": [env.state.position.copy()], "yaw": [env.state.yaw.copy()],
              "v_x": [env.state.v_x.copy()], "v_y": [env.state.v_y.copy()]} if log_states else None
    for t in range(steps):
        actions, extras = policy(obs)
        actions = np.asarray(actions, dtype=np.float32)
        if not np.all(np.isfinite(actions)):
            bad = int(np.argwhere(~np.isfinite(actions).all(axis=1))[0][0])
            raise RolloutError(f"non-finite action from policy at step {t} for car {bad}")
        obs, progress, pen, wall = env.step(actions)
        obs_seq.append(obs)
        act_seq.append(actions)
        prog_seq.append(progress)
        pen_seq.append(pen)
        wall_seq.append(wall)
        for key, val in extras.items():
            extras_seq.setdefault(key, []).append(np.asarray(val))
        if log_states:
            states["position"].append(env.state.position.copy())
            states["yaw"].append(env.state.yaw.copy())
            states["v_x"].append(env.state.v_x.copy())
            states["v_y"].append(env.state.v_y.copy())
    out = {
        "obs": np.stack(obs_seq, axis=1),
        "actions": np.stack(act_seq, axis=1) if act_seq else np.zeros((b, 0, 2), np.float32),
        "progress": np.stack(prog_seq, axis=1) if prog_seq else np.zeros((b, 0), np.float32),
        "pen": np.stack(pen_seq, axis=1) if pen_seq else np.zeros((b, 0), np.float32),
        "wall": np.stack(wall_seq, axis=1) if wall_seq else np.zeros((b, 0), np.float32),
    }
    for key, vals in extras_seq.items():
        out[key] = np.stack(vals, axis=1)
    if log_states:
        for key, vals in states.items():
            arr = np.stack(vals, axis=1)
            out[f"state_{key}"] = arr.astype(np.float32)
    return out


def save_trajectory_log(path, log, meta):
    """Persist a rollout log; float32 arrays plus a JSON metadata header."""
    arrays = {k: np.asarray(v, dtype=np.float32) for k, v in log.items()}
    save_params(path, arrays, {"format": TRAJ_FORMAT, **meta})


def load_trajectory_log(path):
    meta, arrays = load_params(path)
    if meta.get("format") != TRAJ_FORMAT:
        raise ValueError(f"not a trajectory log: {path}")
    return meta, dict(arrays)
