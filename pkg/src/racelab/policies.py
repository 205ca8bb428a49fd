"""Gaussian control heads and the base+residual policy stacks.

A stack composes an optional frozen base policy (sequence model or
behavior-cloned net) with a small stochastic correction head. The
correction is a tanh-squashed diagonal Gaussian whose output is scaled
to [-alpha, alpha] and added to the base action; the environment sees
the clipped sum. Stacks without a base treat the correction head as the
whole policy (alpha = 1) and feed it the observation alone.

Conventions
-----------
* The correction head consumes the augmented input [normalized obs,
  base action] when a base is present, else the normalized obs.
* Sampled log-densities include both the tanh change of variables and
  the alpha scaling, so they are densities of the emitted action.
* All boundary values (actions, observations, log-probs) are float32.
"""

from collections import OrderedDict, deque

import numpy as np

from . import autodiff as ad
from . import nets
from .env import clip_obs

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * float(np.log(2.0 * np.pi))

# What each stack mode is made of and which reward trains it.
#   base: "bet" | "bc" | None; residual: correction head present;
#   reward: "disc" (adversarial proxy) | "env" (progress-penalty) | None;
#   online: trained by the rollout/update loop (False = supervised only).
MODE_SPECS = {
    "betail": {"base": "bet", "residual": True, "reward": "disc", "online": True},
    "ail": {"base": None, "residual": True, "reward": "disc", "online": True},
    "bc": {"base": "bc", "residual": False, "reward": None, "online": False},
    "bcail": {"base": "bc", "residual": True, "reward": "disc", "online": True},
    "sac": {"base": None, "residual": True, "reward": "env", "online": True},
    "betsac": {"base": "bet", "residual": True, "reward": "env", "online": True},
    # Frozen sequence-model base acting alone; evaluation only.
    "bet": {"base": "bet", "residual": False, "reward": None, "online": False},
}

TRAIN_MODES = ("betail", "ail", "bc", "bcail", "sac", "betsac")


def _f32(x):
    return np.asarray(x, dtype=np.float32)


def scale_residual(residual_raw, alpha):
    """Map a squashed correction in (-1,1) to its [-alpha, alpha] range."""
    return np.float32(alpha) * _f32(residual_raw)


def compose_action(base, residual_raw, alpha):
    """Environment action: clip(base + alpha * residual_raw, -1, 1)."""
    return np.clip(_f32(base) + scale_residual(residual_raw, alpha), -1.0, 1.0)


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class GaussianPolicy:
    """Tanh-squashed diagonal Gaussian head with output scale alpha.

    The net maps the input to (mean, log-std) of a pre-squash variable z;
    the emitted action is alpha * tanh(z). The final layer starts at zero
    so the initial mean action is exactly zero (the base action passes
    through unchanged) with unit pre-squash spread.
    """

    def __init__(self, in_dim, act_dim, hidden, alpha, rng, name="res"):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        dims = [in_dim] + list(hidden) + [2 * act_dim]
        acts = ["relu"] * len(hidden) + ["identity"]
        self.net = nets.MLP(dims, acts, rng, name=name, final_zero=True)
        self.in_dim = in_dim
        self.act_dim = act_dim
        self.alpha = float(alpha)

    def params(self):
        return self.net.params()

    def _split_np(self, x):
        out = self.net.predict(_f32(x))
        mean = out[..., : self.act_dim]
        log_std = np.clip(out[..., self.act_dim :], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def mean_np(self, x):
        """Deterministic squashed mean action in [-alpha, alpha]."""
        return scale_residual(self.mean_raw_np(x), self.alpha)

    def mean_raw_np(self, x):
        """Deterministic squashed mean before alpha scaling."""
        mean, _ = self._split_np(x)
        return np.tanh(mean).astype(np.float32)

    def sample_np(self, x, rng):
        """Draw (raw, z, logp): raw = tanh(z) in (-1,1), logp of alpha*raw."""
        mean, log_std = self._split_np(x)
        eps = rng.standard_normal(mean.shape, dtype=np.float32)
        z = mean + np.exp(log_std) * eps
        raw = np.tanh(z)
        logp = self._logp_terms(eps, log_std, z).sum(axis=-1)
        return raw.astype(np.float32), z.astype(np.float32), logp.astype(np.float32)

    def _logp_terms(self, eps, log_std, z):
        # log N(z) - log|d(alpha tanh z)/dz|, elementwise:
        #   -eps^2/2 - log_std - log(2 pi)/2 - 2(log 2 - z - softplus(-2z)) - log alpha
        return (
            -0.5 * eps**2
            - log_std
            - _HALF_LOG_2PI
            - 2.0 * (np.log(2.0) - z - _softplus_np(-2.0 * z))
            - np.log(self.alpha)
        )

    def entropy_proxy_np(self, x):
        """Mean pre-squash differential entropy (spread diagnostic)."""
        _, log_std = self._split_np(x)
        return float(np.mean(np.sum(log_std + _HALF_LOG_2PI + 0.5, axis=-1)))

    def sample_taped(self, x, eps):
        """Reparameterized taped sample: (scaled action, logp) tensors.

        x is a Tensor (B, in_dim); eps a fixed float32 array (B, act_dim).
        The returned action is alpha * tanh(z), shape (B, act_dim); logp
        has shape (B, 1) and matches sample_np's density convention.
        """
        out = self.net(x)
        mean = ad.narrow(out, 0, self.act_dim)
        log_std = ad.clip(ad.narrow(out, self.act_dim, self.act_dim), LOG_STD_MIN, LOG_STD_MAX)
        z = ad.add(mean, ad.mul(ad.exp(log_std), ad.tensor(_f32(eps))))
        action = ad.scale(ad.tanh(z), self.alpha)
        const = _f32(-0.5 * eps**2 - _HALF_LOG_2PI - 2.0 * np.log(2.0) - np.log(self.alpha))
        terms = ad.add(ad.neg(log_std), ad.scale(z, 2.0))
        terms = ad.add(terms, ad.scale(ad.softplus(ad.scale(z, -2.0)), 2.0))
        terms = ad.add(terms, ad.tensor(const))
        return action, ad.sum_last(terms, keepdims=True)


def make_bc_net(obs_dim, act_dim, hidden, rng, name="bc"):
    """Deterministic behavior-cloning net: normalized obs -> bounded action."""
    dims = [obs_dim] + list(hidden) + [act_dim]
    acts = ["relu"] * len(hidden) + ["tanh"]
    return nets.MLP(dims, acts, rng, name=name)


def train_bc(demoset, hidden, updates, batch, lr, seed, stream_fn, progress=None):
    """Fit a behavior-cloning net to the demonstrations by action regression.

    stream_fn(seed, phase, *counters) supplies the per-update generators.
    Returns (net, loss history). Batches larger than the demo set fall
    back to full-batch updates, which makes tiny-set runs deterministic.
    """
    from .optim import Adam, AdamConfig

    obs, act = demoset.transitions()
    obs_n = clip_obs(demoset.normalizer.transform(obs))
    net = make_bc_net(obs_n.shape[1], act.shape[1], hidden, stream_fn(seed, "bc", 0))
    opt = Adam(net.params(), AdamConfig(lr=lr))
    history = []
    m = len(obs_n)
    for update in range(updates):
        if batch < m:
            rng = stream_fn(seed, "bc", update + 1)
            idx = rng.integers(0, m, size=batch)
            xb, yb = obs_n[idx], act[idx]
        else:
            xb, yb = obs_n, act
        ad.zero_grads(net.params().values())
        loss = ad.mse(net(ad.tensor(xb)), ad.tensor(yb))
        ad.backward(loss)
        opt.step()
        history.append(float(loss.data))
        if progress is not None and (update + 1) % 200 == 0:
            progress(update + 1, history[-1])
    return net, history


class PolicyStack:
    """Runtime composition of an optional frozen base with a correction head.

    The stack owns the observation whitener and, for sequence-model
    bases, the short context ring of recent normalized observations.
    reset() must be called whenever the environment batch resets.
    """

    def __init__(self, mode, normalizer, bet=None, bc=None, residual=None,
                 bet_normalizer=None):
        if mode not in MODE_SPECS:
            raise ValueError(f"unknown mode '{mode}'")
        spec = MODE_SPECS[mode]
        if spec["base"] == "bet" and bet is None:
            raise ValueError(f"mode '{mode}' needs a sequence-model base")
        if spec["base"] == "bc" and bc is None:
            raise ValueError(f"mode '{mode}' needs a behavior-cloned base")
        if spec["residual"] and residual is None:
            raise ValueError(f"mode '{mode}' needs a correction head")
        if not spec["residual"] and residual is not None:
            raise ValueError(f"mode '{mode}' takes no correction head")
        if spec["base"] is None and residual is not None and residual.alpha != 1.0:
            raise ValueError(f"mode '{mode}' requires alpha = 1")
        self.mode = mode
        self.spec = spec
        self.normalizer = normalizer
        # The sequence base keeps the whitening it was trained with; on a
        # new course that differs from the fine-tuning whitening.
        self.bet_normalizer = bet_normalizer if bet_normalizer is not None else normalizer
        self.bet = bet if spec["base"] == "bet" else None
        self.bc = bc if spec["base"] == "bc" else None
        self.residual = residual
        self._history = None

    @property
    def has_base(self):
        return self.spec["base"] is not None

    @property
    def alpha(self):
        return self.residual.alpha if self.residual is not None else 0.0

    @property
    def aug_dim(self):
        """Width of the correction head's input."""
        dim = len(self.normalizer.mean)
        return dim + (2 if self.has_base else 0)

    def reset(self):
        if self.bet is not None:
            self._history = deque(maxlen=self.bet.cfg.eval_context)

    def base_action(self, obs):
        """Base proposal in [-1,1]^2 from raw obs; zeros without a base."""
        if self.bet is not None:
            if self._history is None:
                raise RuntimeError("stack.reset() must be called before acting")
            self._history.append(self.bet_normalizer.transform(obs))
            window = np.stack(list(self._history), axis=1)
            return self.bet.predict_last(window).astype(np.float32)
        if self.bc is not None:
            return self.bc.predict(clip_obs(self.normalizer.transform(obs))).astype(np.float32)
        return np.zeros((len(obs), 2), dtype=np.float32)

    def augment(self, obs_n, base):
        """Correction-head input; the base channel exists only with a base."""
        obs_n = clip_obs(obs_n)
        if self.has_base:
            return np.concatenate([obs_n, base], axis=1)
        return obs_n

    def train_policy(self, rng):
        """Sampling policy callable for rollout collection.

        Extras per step: base (B,2), res (B,2) scaled correction, logp
        (B,), aug (B, aug_dim). The emitted action is the exact
        composition clip(base + res, -1, 1).
        """

        def policy(obs):
            base = self.base_action(obs)
            if self.residual is None:
                return base.copy(), {"base": base}
            aug = self.augment(self.normalizer.transform(obs), base)
            raw, _, logp = self.residual.sample_np(aug, rng)
            act = compose_action(base, raw, self.residual.alpha)
            res = scale_residual(raw, self.residual.alpha)
            return act, {"base": base, "res": res, "logp": logp, "aug": aug}

        return policy

    def eval_policy(self, env=None):
        """Deterministic policy callable (squashed-mean correction)."""

        def policy(obs):
            base = self.base_action(obs)
            if self.residual is None:
                return base.copy(), {}
            aug = self.augment(self.normalizer.transform(obs), base)
            raw = self.residual.mean_raw_np(aug)
            return compose_action(base, raw, self.residual.alpha), {}

        return policy

    def final_augmented(self, obs):
        """Augmented input for a rollout's closing observation.

        Advances the context ring exactly as acting would, so the result
        is the successor input a stored transition bootstraps from.
        """
        base = self.base_action(obs)
        return self.augment(self.normalizer.transform(obs), base)

    def trainable_params(self):
        return self.residual.params() if self.residual is not None else OrderedDict()


def build_policy_stack(mode, normalizer, obs_dim, rng, alpha=None, bet=None,
                       bc=None, hidden=(256, 256), bet_normalizer=None):
    """Construct the stack for a mode, creating the correction head.

    alpha is required for modes with a base and a correction head; modes
    whose correction head is the whole policy ignore it (forced to 1).
    """
    if mode not in MODE_SPECS:
        raise ValueError(f"unknown mode '{mode}'")
    spec = MODE_SPECS[mode]
    residual = None
    if spec["residual"]:
        if spec["base"] is None:
            eff_alpha = 1.0
        else:
            if alpha is None:
                raise ValueError(f"mode '{mode}' requires alpha")
            eff_alpha = float(alpha)
        in_dim = obs_dim + (2 if spec["base"] is not None else 0)
        residual = GaussianPolicy(in_dim, 2, hidden, eff_alpha, rng)
    return PolicyStack(mode, normalizer, bet=bet, bc=bc, residual=residual,
                       bet_normalizer=bet_normalizer)
