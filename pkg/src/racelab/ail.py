"""Adversarial fine-tuning of the correction head over a frozen base.

The training loop alternates strictly: collect one fixed-length
multi-car rollout with the sampling stack, append it to the replay ring,
take a block of discriminator steps (expert pairs vs replayed agent
pairs), then a block of actor-critic steps. Replayed transitions carry
reward *ingredients* only — the discriminator inputs and the progress /
off-course terms — and every sampled batch recomputes its rewards from
the current discriminator (or the progress formula), so no stale reward
is ever trusted.

Checkpoint bundles are directories of tensor checkpoints plus a JSON
manifest; together with the pure per-iteration seed streams they make a
resumed run bit-identical to an uninterrupted one.
"""

import dataclasses
import json
import logging
import os

import numpy as np

from . import autodiff as ad
from . import bet as bet_mod
from . import nets
from .env import RaceEnv, clip_obs, rl_reward, rollout
from .optim import Adam, AdamConfig
from .policies import GaussianPolicy, scale_residual
from .seeding import stream

log = logging.getLogger("racelab.train")

BUNDLE_FORMAT = "racelab-bundle-v1"
REWARD_EPS = 1e-6
DISC_HIDDEN = (32, 32)


def _f32(x):
    return np.asarray(x, dtype=np.float32)


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


# ---------------------------------------------------------------------------
# Discriminator

def make_discriminator(obs_dim, act_dim, rng):
    """Pair classifier (normalized obs, env action) -> logit."""
    dims = [obs_dim + act_dim] + list(DISC_HIDDEN) + [1]
    acts = ["tanh"] * len(DISC_HIDDEN) + ["identity"]
    return nets.MLP(dims, acts, rng, name="disc")


def disc_input(obs_n, a_env):
    return np.concatenate([_f32(obs_n), _f32(a_env)], axis=1)


def ail_reward(disc, obs_n, a_env):
    """Proxy reward -log(1 - D) with D clamped to [eps, 1-eps]; >= 0."""
    logit = disc.predict(disc_input(obs_n, a_env))[:, 0]
    d = np.clip(_sigmoid_np(logit), REWARD_EPS, 1.0 - REWARD_EPS)
    return (-np.log1p(-d)).astype(np.float32)


def disc_update(disc, opt, expert_x, agent_x, rng, gp_scale=10.0, gp_target=1.0,
                entropy_scale=0.001):
    """One classifier step: two-sided cross-entropy, input-gradient norm
    penalty on per-row interpolates, and an output-entropy bonus.

    expert_x / agent_x are (N, obs+act) float32 pair batches. Returns the
    loss terms and mean classifier outputs for both sides.
    """
    if len(expert_x) == 0 or len(agent_x) == 0:
        raise ValueError("empty discriminator batch")
    params = disc.params()
    ad.zero_grads(params.values())
    l_e = disc(ad.tensor(_f32(expert_x)))
    l_a = disc(ad.tensor(_f32(agent_x)))
    bce = ad.add(
        ad.bce_with_logits(l_e, ad.tensor(np.ones_like(l_e.data))),
        ad.bce_with_logits(l_a, ad.tensor(np.zeros_like(l_a.data))),
    )
    loss = bce
    ent_val = 0.0
    if entropy_scale:
        both = ad.concat([l_e, l_a], axis=0)
        d = ad.sigmoid(both)
        # H(D) = D*softplus(-l) + (1-D)*softplus(l); the bonus maximizes it.
        h = ad.add(
            ad.mul(d, ad.softplus(ad.neg(both))),
            ad.mul(ad.shift(ad.neg(d), 1.0), ad.softplus(both)),
        )
        h_mean = ad.mean_all(h)
        ent_val = float(h_mean.data)
        loss = ad.add(loss, ad.scale(h_mean, -entropy_scale))
    gp_val = 0.0
    if gp_scale:
        m = min(len(expert_x), len(agent_x))
        u = rng.random((m, 1), dtype=np.float32)
        x_hat = u * _f32(expert_x[:m]) + (1.0 - u) * _f32(agent_x[:m])
        gp = nets.gradient_penalty(disc, x_hat, gp_target)
        gp_val = float(gp.data)
        loss = ad.add(loss, ad.scale(gp, gp_scale))
    ad.backward(loss)
    opt.step()
    return {
        "loss": float(loss.data),
        "bce": float(bce.data),
        "gp": gp_val,
        "entropy": ent_val,
        "d_expert": float(np.mean(_sigmoid_np(l_e.data))),
        "d_agent": float(np.mean(_sigmoid_np(l_a.data))),
    }


# ---------------------------------------------------------------------------
# Replay

class ReplayBuffer:
    """FIFO transition ring holding reward ingredients, never rewards.

    Columns per row: augmented input, scaled correction, successor
    augmented input, bootstrap mask, normalized obs, env action, progress
    gain, off-course speed-squared penalty.
    """

    def __init__(self, capacity, aug_dim, obs_dim, act_dim=2):
        self.capacity = int(capacity)
        self.aug_dim = int(aug_dim)
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        edges = np.cumsum([0, aug_dim, act_dim, aug_dim, 1, obs_dim, act_dim, 1, 1])
        names = ["aug", "res", "aug_next", "done", "obs_n", "a_env", "progress", "pen"]
        self._cols = {n: slice(int(a), int(b)) for n, a, b in zip(names, edges[:-1], edges[1:])}
        self._data = np.zeros((self.capacity, int(edges[-1])), dtype=np.float32)
        self._n = 0
        self._head = 0  # next write position == oldest row when full

    def __len__(self):
        return self._n

    def push(self, trans):
        """Append a batch of transitions (dict of (N, width) float32)."""
        n = len(trans["aug"])
        rows = np.empty((n, self._data.shape[1]), dtype=np.float32)
        for name, sl in self._cols.items():
            col = _f32(trans[name])
            rows[:, sl] = col if col.ndim == 2 else col[:, None]
        idx = (self._head + np.arange(n)) % self.capacity
        self._data[idx] = rows
        self._head = int((self._head + n) % self.capacity)
        self._n = int(min(self._n + n, self.capacity))

    def sample(self, batch, rng):
        """Uniform sample without rewards; dict of copied columns."""
        if self._n == 0:
            raise ValueError("empty replay buffer")
        idx = rng.integers(0, self._n, size=batch)
        rows = self._data[idx]
        out = {}
        for name, sl in self._cols.items():
            col = rows[:, sl]
            out[name] = col[:, 0] if col.shape[1] == 1 else col
        return out

    def state_arrays(self):
        return {"data": self._data[: self._n].copy()}

    def state_meta(self):
        return {"head": self._head, "n": self._n, "capacity": self.capacity}

    def load_state(self, arrays, meta):
        n = int(meta["n"])
        if int(meta["capacity"]) != self.capacity:
            raise ValueError("replay capacity mismatch")
        self._data[:n] = arrays["data"]
        self._n = n
        self._head = int(meta["head"])


def replay_sample_recompute(replay, disc, batch, rng):
    """Sample uniformly and attach freshly recomputed proxy rewards."""
    rows = replay.sample(batch, rng)
    rows["reward"] = ail_reward(disc, rows["obs_n"], rows["a_env"])
    return rows


def replay_sample_env_reward(replay, batch, rng, progress_weight):
    """Sample uniformly and attach progress-penalty rewards."""
    rows = replay.sample(batch, rng)
    rows["reward"] = rl_reward(rows["progress"], rows["pen"], progress_weight).astype(np.float32)
    return rows


# ---------------------------------------------------------------------------
# Actor-critic

@dataclasses.dataclass
class SACConfig:
    hidden: tuple = (256, 256)
    lr: float = 3e-4
    batch: int = 1024
    gradient_steps: int = 250
    tau: float = 0.002
    gamma: float = 0.99
    entropy_temp: float = 0.01
    auto_entropy: bool = False
    entropy_lr: float = 3e-4

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return SACConfig(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _make_q(in_dim, hidden, rng, name):
    dims = [in_dim] + list(hidden) + [1]
    acts = ["relu"] * len(hidden) + ["identity"]
    return nets.MLP(dims, acts, rng, name=name)


def _copy_net(src, name):
    dst = _make_q(src.dims[0], src.dims[1:-1], np.random.default_rng(0), name)
    for (_, p_dst), (_, p_src) in zip(dst.params().items(), src.params().items()):
        p_dst.data[...] = p_src.data
    return dst


def polyak_update(target_params, online_params, tau):
    """theta_t <- (1 - tau) theta_t + tau theta; matched by position."""
    for p_t, p_o in zip(target_params.values(), online_params.values()):
        p_t.data *= 1.0 - tau
        p_t.data += tau * p_o.data


class SACTrainer:
    """Twin-critic soft actor-critic over the correction head.

    Targets are computed without the tape; critic and actor updates run
    on it. The entropy temperature is fixed by default, with optional
    gradient tuning toward a target entropy of minus the action size.
    """

    def __init__(self, policy: GaussianPolicy, aug_dim, cfg: SACConfig, rng):
        self.policy = policy
        self.cfg = cfg
        in_dim = aug_dim + policy.act_dim
        self.q1 = _make_q(in_dim, cfg.hidden, rng, "q1")
        self.q2 = _make_q(in_dim, cfg.hidden, rng, "q2")
        self.q1_t = _copy_net(self.q1, "q1_t")
        self.q2_t = _copy_net(self.q2, "q2_t")
        self.opt_q1 = Adam(self.q1.params(), AdamConfig(lr=cfg.lr))
        self.opt_q2 = Adam(self.q2.params(), AdamConfig(lr=cfg.lr))
        self.opt_pi = Adam(policy.params(), AdamConfig(lr=cfg.lr))
        self.log_temp = float(np.log(cfg.entropy_temp))
        self.target_entropy = -float(policy.act_dim)
        self._temp_m = 0.0
        self._temp_v = 0.0
        self._temp_t = 0

    @property
    def temperature(self):
        return float(np.exp(self.log_temp))

    def update(self, batch, rng):
        """One gradient step on critics, actor, and (optionally) temperature."""
        cfg = self.cfg
        temp = self.temperature
        s, a, s2 = batch["aug"], batch["res"], batch["aug_next"]
        r, done = batch["reward"], batch["done"]

        raw2, _, logp2 = self.policy.sample_np(s2, rng)
        a2 = scale_residual(raw2, self.policy.alpha)
        x2 = np.concatenate([s2, a2], axis=1)
        q_next = np.minimum(self.q1_t.predict(x2)[:, 0], self.q2_t.predict(x2)[:, 0])
        y = (r + cfg.gamma * (1.0 - done) * (q_next - temp * logp2)).astype(np.float32)[:, None]

        x = np.concatenate([s, a], axis=1)
        q_losses = []
        for q, opt in ((self.q1, self.opt_q1), (self.q2, self.opt_q2)):
            ad.zero_grads(q.params().values())
            loss = ad.mse(q(ad.tensor(x)), ad.tensor(y))
            ad.backward(loss)
            opt.step()
            q_losses.append(float(loss.data))

        eps = rng.standard_normal((len(s), self.policy.act_dim), dtype=np.float32)
        ad.zero_grads(self.policy.params().values())
        s_t = ad.tensor(s)
        a_t, logp_t = self.policy.sample_taped(s_t, eps)
        x_t = ad.concat([s_t, a_t], axis=-1)
        min_q = ad.minimum(self.q1(x_t), self.q2(x_t))
        actor_loss = ad.mean_all(ad.sub(ad.scale(logp_t, temp), min_q))
        ad.backward(actor_loss)
        self.opt_pi.step()

        mean_logp = float(np.mean(logp_t.data))
        if cfg.auto_entropy:
            self._temp_step(-(mean_logp + self.target_entropy))

        polyak_update(self.q1_t.params(), self.q1.params(), cfg.tau)
        polyak_update(self.q2_t.params(), self.q2.params(), cfg.tau)
        return {
            "q1_loss": q_losses[0],
            "q2_loss": q_losses[1],
            "actor_loss": float(actor_loss.data),
            "mean_logp": mean_logp,
            "mean_reward": float(np.mean(r)),
            "temperature": self.temperature,
        }

    def _temp_step(self, grad):
        c = self.cfg
        self._temp_t += 1
        self._temp_m = 0.9 * self._temp_m + 0.1 * grad
        self._temp_v = 0.999 * self._temp_v + 0.001 * grad * grad
        m_hat = self._temp_m / (1.0 - 0.9**self._temp_t)
        v_hat = self._temp_v / (1.0 - 0.999**self._temp_t)
        self.log_temp -= c.entropy_lr * m_hat / (np.sqrt(v_hat) + 1e-8)

    def temp_state(self):
        return {
            "log_temp": self.log_temp,
            "m": self._temp_m,
            "v": self._temp_v,
            "t": self._temp_t,
        }

    def load_temp_state(self, state):
        self.log_temp = float(state["log_temp"])
        self._temp_m = float(state["m"])
        self._temp_v = float(state["v"])
        self._temp_t = int(state["t"])


# ---------------------------------------------------------------------------
# Training loop

@dataclasses.dataclass
class TrainConfig:
    """Knobs for one fine-tuning run (mode, budgets, regularizer scales)."""

    mode: str = "betail"
    alpha: float = None
    n_cars: int = 20
    rollout_steps: int = 500
    iterations: int = 20
    replay_capacity: int = 200_000
    disc_updates: int = 32
    disc_lr: float = 0.005
    demo_batch: int = 500
    gp_scale: float = 10.0
    gp_target: float = 1.0
    entropy_scale: float = 0.001
    progress_weight: float = 0.01
    policy_hidden: tuple = (256, 256)
    sac: SACConfig = dataclasses.field(default_factory=SACConfig)
    eval_every: int = 5
    eval_cars: int = 20
    eval_max_steps: int = 5000

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["sac"] = SACConfig.from_dict(d.get("sac", {}))
        if "policy_hidden" in d:
            d["policy_hidden"] = tuple(d["policy_hidden"])
        if d.get("alpha") is not None:
            d["alpha"] = float(d["alpha"])
        return TrainConfig(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["sac"] = self.sac.to_dict()
        d["policy_hidden"] = list(self.policy_hidden)
        return d


class Trainer:
    """Owns the stack, environment, replay, classifier, and critics.

    All randomness is drawn from pure per-(phase, iteration) streams, so
    the object's complete state is its parameter arrays, optimizer
    moments, replay contents, and step counters — which is exactly what
    the checkpoint bundle stores.
    """

    def __init__(self, stack, track, vparams, ecfg, demos, cfg: TrainConfig, seed):
        from .policies import MODE_SPECS

        spec = MODE_SPECS[stack.mode]
        if not spec["online"]:
            raise ValueError(f"mode '{stack.mode}' has no online training loop")
        self.stack = stack
        self.track = track
        self.demos = demos
        self.cfg = cfg
        self.seed = int(seed)
        self.env = RaceEnv(track, vparams, ecfg)
        self.speed_lookup = demos.speed_lookup(track.length)
        obs_dim = demos.obs_dim
        self.replay = ReplayBuffer(cfg.replay_capacity, stack.aug_dim, obs_dim)
        self.reward_kind = spec["reward"]
        if self.reward_kind == "disc":
            obs, act = demos.transitions()
            self._demo_x = disc_input(clip_obs(demos.normalizer.transform(obs)), act)
            self.disc = make_discriminator(obs_dim, 2, stream(self.seed, "init", 2))
            self.opt_disc = Adam(self.disc.params(), AdamConfig(lr=cfg.disc_lr))
        else:
            self._demo_x = None
            self.disc = None
            self.opt_disc = None
        self.sac = SACTrainer(stack.residual, stack.aug_dim, cfg.sac, stream(self.seed, "init", 1))
        self.env_steps = 0
        self.iteration_count = 0
        self.curve = []
        self.last_eval = None

    def _transitions(self, roll):
        b, t = roll["actions"].shape[:2]
        obs_dim = self.demos.obs_dim
        aug_last = self.stack.final_augmented(roll["obs"][:, -1])
        aug_full = np.concatenate([roll["aug"], aug_last[:, None]], axis=1)
        return {
            "aug": aug_full[:, :-1].reshape(b * t, -1),
            "res": roll["res"].reshape(b * t, -1),
            "aug_next": aug_full[:, 1:].reshape(b * t, -1),
            "done": np.zeros(b * t, dtype=np.float32),
            "obs_n": aug_full[:, :-1, :obs_dim].reshape(b * t, -1),
            "a_env": roll["actions"].reshape(b * t, -1),
            "progress": roll["progress"].reshape(b * t),
            "pen": roll["pen"].reshape(b * t),
        }

    def sample_batch(self, batch, rng):
        if self.reward_kind == "disc":
            return replay_sample_recompute(self.replay, self.disc, batch, rng)
        return replay_sample_env_reward(self.replay, batch, rng, self.cfg.progress_weight)

    def iteration(self, it):
        """Collect -> classifier block -> actor-critic block; returns metrics."""
        cfg = self.cfg
        self.env.reset_eval(cfg.n_cars, stream(self.seed, "rollout", it), self.speed_lookup)
        self.stack.reset()
        roll = rollout(self.env, self.stack.train_policy(stream(self.seed, "policy", it)),
                       cfg.rollout_steps)
        self.replay.push(self._transitions(roll))
        self.env_steps += cfg.n_cars * cfg.rollout_steps
        metrics = {
            "iteration": it,
            "env_steps": self.env_steps,
            "rollout_progress": float(roll["progress"].sum(axis=1).mean()),
            "wall_fraction": float((roll["wall"] > 0).mean()),
        }
        if self.disc is not None:
            dstats = []
            for j in range(cfg.disc_updates):
                rng_d = stream(self.seed, "disc", it, j)
                e_idx = rng_d.integers(0, len(self._demo_x), size=cfg.demo_batch)
                agent = self.replay.sample(cfg.demo_batch, rng_d)
                agent_x = disc_input(agent["obs_n"], agent["a_env"])
                dstats.append(disc_update(self.disc, self.opt_disc, self._demo_x[e_idx],
                                          agent_x, rng_d, cfg.gp_scale, cfg.gp_target,
                                          cfg.entropy_scale))
            metrics["disc"] = {k: float(np.mean([s[k] for s in dstats])) for k in dstats[0]}
        sstats = []
        for g in range(cfg.sac.gradient_steps):
            if len(self.replay) < cfg.sac.batch:
                log.info("replay %d below batch %d; skipping actor-critic block",
                         len(self.replay), cfg.sac.batch)
                break
            rng_s = stream(self.seed, "sac", it, g)
            sstats.append(self.sac.update(self.sample_batch(cfg.sac.batch, rng_s), rng_s))
        if sstats:
            metrics["sac"] = {k: float(np.mean([s[k] for s in sstats])) for k in sstats[0]}
        self.iteration_count = it + 1
        return metrics

    def evaluate_now(self):
        from . import evaluate as eval_mod

        return eval_mod.evaluate(
            self.stack, self.track, self.env.params, self.env.cfg, self.speed_lookup,
            n_cars=self.cfg.eval_cars, max_steps=self.cfg.eval_max_steps,
            seed=self.seed, tag=self.iteration_count,
        )

    def run(self, out_dir=None, on_metrics=None, extra_manifest=None):
        """Train to the configured iteration budget with periodic checks.

        Evaluates (and, when out_dir is set, writes a resumable bundle)
        every eval_every iterations and at the end. Returns the summary:
        counters, the training curve, and the final evaluation.
        """
        cfg = self.cfg
        report = None
        while self.iteration_count < cfg.iterations:
            it = self.iteration_count
            metrics = self.iteration(it)
            due = (cfg.eval_every and (it + 1) % cfg.eval_every == 0) or it + 1 == cfg.iterations
            if due:
                report = self.evaluate_now()
                self.last_eval = report.to_dict()
                self.curve.append({
                    "iteration": it + 1,
                    "env_steps": self.env_steps,
                    "success_rate": report.success_rate,
                    "lap_time_mean": report.lap_time_mean,
                    "steering_change_mean": report.steering_change_mean,
                })
                metrics["eval_success_rate"] = report.success_rate
                if out_dir is not None:
                    save_bundle(os.path.join(out_dir, "bundle"), self, extra_manifest)
            if on_metrics is not None:
                on_metrics(metrics)
        if report is None:
            report = self.evaluate_now()
        return {
            "mode": self.stack.mode,
            "alpha": self.stack.alpha if self.stack.residual is not None else None,
            "seed": self.seed,
            "iterations": self.iteration_count,
            "env_steps": self.env_steps,
            "curve": self.curve,
            "final_eval": report.to_dict(),
        }


def betail_train_iteration(trainer, it=None):
    """One alternation of collection, classifier, and actor-critic blocks."""
    return trainer.iteration(trainer.iteration_count if it is None else it)


# ---------------------------------------------------------------------------
# Checkpoint bundles

def _optim_arrays(trainer):
    out = {}
    groups = {"pi": trainer.sac.opt_pi, "q1": trainer.sac.opt_q1, "q2": trainer.sac.opt_q2}
    if trainer.opt_disc is not None:
        groups["disc"] = trainer.opt_disc
    steps = {}
    for gname, opt in groups.items():
        state = opt.state_dict()
        steps[gname] = state["step_count"]
        for pname, arr in state["m"].items():
            out[f"{gname}.m.{pname}"] = arr
        for pname, arr in state["v"].items():
            out[f"{gname}.v.{pname}"] = arr
    return out, steps


def _load_optim(trainer, arrays, steps):
    groups = {"pi": trainer.sac.opt_pi, "q1": trainer.sac.opt_q1, "q2": trainer.sac.opt_q2}
    if trainer.opt_disc is not None:
        groups["disc"] = trainer.opt_disc
    for gname, opt in groups.items():
        state = {
            "step_count": steps[gname],
            "m": {p: arrays[f"{gname}.m.{p}"] for p in opt.m},
            "v": {p: arrays[f"{gname}.v.{p}"] for p in opt.v},
        }
        opt.load_state_dict(state)


def save_bundle(path, trainer, extra_manifest=None):
    """Write a resumable checkpoint bundle directory.

    Contains every parameter set (frozen base included, so the policy is
    reconstructible from the bundle alone), optimizer moments, the
    replay ring, counters, and the training curve. The manifest is
    written last so a complete manifest implies a complete bundle.
    """
    os.makedirs(path, exist_ok=True)
    stack = trainer.stack
    nets.save_params(os.path.join(path, "residual.ckpt"), stack.residual.params(),
                     {"kind": "residual", "alpha": stack.residual.alpha})
    for fname, net in (("q1.ckpt", trainer.sac.q1), ("q2.ckpt", trainer.sac.q2),
                       ("q1_target.ckpt", trainer.sac.q1_t),
                       ("q2_target.ckpt", trainer.sac.q2_t)):
        nets.save_params(os.path.join(path, fname), net.params(), {"kind": "critic"})
    if trainer.disc is not None:
        nets.save_params(os.path.join(path, "disc.ckpt"), trainer.disc.params(),
                         {"kind": "disc"})
    if stack.bet is not None:
        bet_mod.save_bet(os.path.join(path, "bet.ckpt"), stack.bet, stack.bet_normalizer)
    if stack.bc is not None:
        nets.save_params(os.path.join(path, "bc.ckpt"), stack.bc.params(),
                         {"kind": "bc", "dims": stack.bc.dims})
    optim_arrays, optim_steps = _optim_arrays(trainer)
    nets.save_params(os.path.join(path, "optim.ckpt"), optim_arrays,
                     {"kind": "optim", "steps": optim_steps})
    nets.save_params(os.path.join(path, "replay.ckpt"), trainer.replay.state_arrays(),
                     {"kind": "replay", **trainer.replay.state_meta()})
    manifest = {
        "format": BUNDLE_FORMAT,
        "mode": stack.mode,
        "alpha": stack.residual.alpha,
        "seed": trainer.seed,
        "iteration": trainer.iteration_count,
        "env_steps": trainer.env_steps,
        "config": trainer.cfg.to_dict(),
        "vehicle": dataclasses.asdict(trainer.env.params),
        "episode": dataclasses.asdict(trainer.env.cfg),
        "normalizer": stack.normalizer.to_dict(),
        "curve": trainer.curve,
        "last_eval": trainer.last_eval,
        "temp_state": trainer.sac.temp_state(),
        **(extra_manifest or {}),
    }
    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, os.path.join(path, "manifest.json"))


def load_bundle(path, track, vparams, ecfg, demos, cfg=None):
    """Rebuild a Trainer exactly as save_bundle left it.

    cfg, when given, replaces the stored training config — the sizes must
    match, but stopping-rule knobs (iteration budget, evaluation cadence)
    may differ, which is how a finished run is extended.
    """
    from .env import Normalizer
    from .policies import GaussianPolicy, PolicyStack, make_bc_net

    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"not a checkpoint bundle: {path}")
    if cfg is None:
        cfg = TrainConfig.from_dict(manifest["config"])
    normalizer = Normalizer.from_dict(manifest["normalizer"])
    mode = manifest["mode"]

    bet = bc = None
    bet_normalizer = None
    if os.path.exists(os.path.join(path, "bet.ckpt")):
        bet, bet_normalizer, _ = bet_mod.load_bet(os.path.join(path, "bet.ckpt"))
    if os.path.exists(os.path.join(path, "bc.ckpt")):
        meta, arrays = nets.load_params(os.path.join(path, "bc.ckpt"))
        dims = meta["dims"]
        bc = make_bc_net(dims[0], dims[-1], dims[1:-1], np.random.default_rng(0))
        nets.assign_params(bc.params(), arrays)

    res_meta, res_arrays = nets.load_params(os.path.join(path, "residual.ckpt"))
    obs_dim = len(normalizer.mean)
    in_dim = obs_dim + (2 if (bet is not None or bc is not None) else 0)
    residual = GaussianPolicy(in_dim, 2, cfg.policy_hidden, res_meta["alpha"],
                              np.random.default_rng(0))
    nets.assign_params(residual.params(), res_arrays)

    stack = PolicyStack(mode, normalizer, bet=bet, bc=bc, residual=residual,
                        bet_normalizer=bet_normalizer)
    trainer = Trainer(stack, track, vparams, ecfg, demos, cfg, manifest["seed"])
    for fname, net in (("q1.ckpt", trainer.sac.q1), ("q2.ckpt", trainer.sac.q2),
                       ("q1_target.ckpt", trainer.sac.q1_t),
                       ("q2_target.ckpt", trainer.sac.q2_t)):
        _, arrays = nets.load_params(os.path.join(path, fname))
        nets.assign_params(net.params(), arrays)
    if trainer.disc is not None:
        _, arrays = nets.load_params(os.path.join(path, "disc.ckpt"))
        nets.assign_params(trainer.disc.params(), arrays)
    optim_meta, optim_arrays = nets.load_params(os.path.join(path, "optim.ckpt"))
    _load_optim(trainer, optim_arrays, optim_meta["steps"])
    replay_meta, replay_arrays = nets.load_params(os.path.join(path, "replay.ckpt"))
    trainer.replay.load_state(replay_arrays, replay_meta)
    trainer.sac.load_temp_state(manifest["temp_state"])
    trainer.env_steps = int(manifest["env_steps"])
    trainer.iteration_count = int(manifest["iteration"])
    trainer.curve = list(manifest["curve"])
    trainer.last_eval = manifest.get("last_eval")
    return trainer, manifest
