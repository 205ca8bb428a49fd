"""Experiment configuration: strict schema, profiles, and challenge presets.

A run is fully determined by one JSON document. Loading resolves it in
three layers — profile defaults, then an optional challenge preset, then
the user's overrides — and rejects any key the schema does not know,
naming the offending path. The resolved document is canonicalized and
hashed so every output artifact can be traced to its exact inputs.

Profiles: ``desk`` (default; minutes-scale budgets), ``paper`` (the
full-scale hyperparameters), ``smoke`` (seconds-scale end-to-end check).

Challenge presets name the three training layouts: ``maggiore-like``
(pretrain and fine-tune on the same course, alpha 0.05),
``dragontail-like`` (pretrain on one course, fine-tune on another,
alpha 0.10), ``panorama-like`` (pretrain on several courses, fine-tune
on an unseen one, alpha 0.2).
"""

import copy
import dataclasses
import hashlib
import json

from .ail import TrainConfig
from .bet import BeTConfig
from .env import EpisodeConfig
from .expert import ExpertParams
from .policies import MODE_SPECS, TRAIN_MODES
from .vehicle import VehicleParams

CONTENT_VERSION = 1
PROFILES = ("desk", "paper", "smoke")


class ConfigError(ValueError):
    """Invalid configuration; maps to CLI exit code 1."""


def _train_defaults():
    d = TrainConfig().to_dict()
    # mode and alpha live at the config root, not under train.
    d.pop("mode")
    d.pop("alpha")
    return d


def _base_defaults():
    return {
        "mode": None,
        "profile": "desk",
        "seed": 0,
        "challenge": None,
        "alpha": None,
        "out": None,
        "track": None,
        "pretrain_tracks": None,
        "demos": {"laps": 8, "laps_pretrain": None, "seed": 0},
        "vehicle": VehicleParams().to_dict(),
        "episode": EpisodeConfig().to_dict(),
        "expert": ExpertParams().to_dict(),
        "bet": BeTConfig().to_dict(),
        "bc": {"hidden": [256, 256], "updates": 2000, "batch": 256, "lr": 1e-3},
        "train": _train_defaults(),
    }


_PROFILE_OVERRIDES = {
    "desk": {},
    "paper": {
        "bet": {"embed_dim": 512, "n_layers": 4, "n_heads": 8, "batch_size": 256,
                "updates": 500_000, "stop_loss": 0.0},
        "train": {
            "replay_capacity": 1_000_000,
            "demo_batch": 2000,
            "iterations": 800,
            "sac": {"batch": 4096, "gradient_steps": 2500},
        },
    },
    "smoke": {
        "demos": {"laps": 2},
        "bet": {"embed_dim": 32, "n_layers": 2, "n_heads": 2, "context": 8,
                "eval_context": 4, "batch_size": 16, "updates": 150, "stop_loss": 0.0},
        "bc": {"hidden": [32, 32], "updates": 200, "batch": 128},
        "train": {
            "n_cars": 4,
            "rollout_steps": 100,
            "iterations": 5,
            "replay_capacity": 20_000,
            "disc_updates": 8,
            "demo_batch": 128,
            "policy_hidden": [64, 64],
            "eval_every": 2,
            "eval_cars": 4,
            "eval_max_steps": 800,
            "sac": {"hidden": [64, 64], "batch": 256, "gradient_steps": 20},
        },
    },
}

# The three training layouts: base-policy course(s), fine-tune course,
# correction scale. Course seeds are desk-tuned, not meaningful.
CHALLENGES = {
    # Fine-tune on the pretraining course itself: small corrections only.
    "maggiore-like": {
        "alpha": 0.05,
        "track": {"preset": "random", "seed": 7},
        "pretrain_tracks": [{"preset": "random", "seed": 7}],
    },
    # Transfer to a much twistier course the base has never seen.
    "dragontail-like": {
        "alpha": 0.10,
        "track": {"preset": "random", "seed": 21, "roughness": 0.5, "radius": 120},
        "pretrain_tracks": [{"preset": "random", "seed": 7}],
    },
    # Multi-course pretraining, then transfer with a large correction.
    "panorama-like": {
        "alpha": 0.2,
        "track": {"preset": "random", "seed": 29, "roughness": 0.5, "radius": 110},
        "pretrain_tracks": [
            {"preset": "random", "seed": 7},
            {"preset": "random", "seed": 11},
            {"preset": "random", "seed": 13},
        ],
    },
}

# Subtrees whose keys the schema does not enumerate: course generation
# parameters vary by preset and are validated by the generator itself.
_FREE_SUBTREES = ("track", "pretrain_tracks")


def _merge(base, override, path=()):
    """Deep-merge override into base, rejecting keys absent from base."""
    for key, value in override.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if key in _FREE_SUBTREES and not path:
            base[key] = copy.deepcopy(value)
        elif isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, path + (key,))
        elif isinstance(base[key], dict) and value is not None:
            raise ConfigError(f"config key '{where}' must be a table")
        else:
            base[key] = copy.deepcopy(value)
    return base


def config_hash(resolved):
    """Content hash of a resolved config; the output location is excluded
    so the same experiment hashes identically wherever it is written."""
    content = {k: v for k, v in resolved.items() if k != "out"}
    canon = json.dumps(content, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclasses.dataclass
class ExperimentConfig:
    """Fully resolved, typed view of one run's configuration."""

    resolved: dict
    mode: str
    profile: str
    seed: int
    challenge: str
    alpha: float
    out: str
    track_spec: dict
    pretrain_track_specs: list
    demo_laps: int
    demo_laps_pretrain: int
    demo_seed: int
    vehicle: VehicleParams
    episode: EpisodeConfig
    expert: ExpertParams
    bet: BeTConfig
    bc: dict
    train: TrainConfig

    @property
    def hash(self):
        return config_hash(self.resolved)

    def needs_bet(self):
        return MODE_SPECS[self.mode]["base"] == "bet"

    def needs_bc(self):
        return MODE_SPECS[self.mode]["base"] == "bc"


def _typed(cls, d, where):
    try:
        return cls.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"invalid '{where}' config: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"invalid '{where}' config: {exc}") from None


def build_config(user):
    """Resolve a raw config dict into an ExperimentConfig.

    Raises ConfigError on unknown keys, bad profile or challenge names,
    missing mode/track, or a residual mode without alpha.
    """
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    profile = user.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile '{profile}' (choose from {'/'.join(PROFILES)})")
    resolved = _merge(_base_defaults(), _PROFILE_OVERRIDES[profile])
    resolved["profile"] = profile
    challenge = user.get("challenge")
    if challenge is not None:
        if challenge not in CHALLENGES:
            raise ConfigError(
                f"unknown challenge '{challenge}' (choose from {'/'.join(sorted(CHALLENGES))})"
            )
        resolved = _merge(resolved, CHALLENGES[challenge])
        resolved["challenge"] = challenge
    resolved = _merge(resolved, user)

    mode = resolved["mode"]
    if mode is None:
        raise ConfigError("config field 'mode' is required")
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown mode '{mode}' (choose from {'/'.join(TRAIN_MODES)})")
    if resolved["track"] is None:
        raise ConfigError("config field 'track' is required (or pick a challenge)")
    spec = MODE_SPECS[mode]
    alpha = resolved["alpha"]
    if spec["residual"] and spec["base"] is not None and alpha is None:
        raise ConfigError(f"mode '{mode}' requires 'alpha'")
    if resolved["pretrain_tracks"] is None:
        resolved["pretrain_tracks"] = [copy.deepcopy(resolved["track"])]
    demos = resolved["demos"]
    if demos["laps_pretrain"] is None:
        demos["laps_pretrain"] = demos["laps"]

    train_d = copy.deepcopy(resolved["train"])
    train_d["mode"] = mode
    train_d["alpha"] = alpha
    return ExperimentConfig(
        resolved=resolved,
        mode=mode,
        profile=profile,
        seed=int(resolved["seed"]),
        challenge=challenge,
        alpha=alpha,
        out=resolved["out"],
        track_spec=resolved["track"],
        pretrain_track_specs=resolved["pretrain_tracks"],
        demo_laps=int(demos["laps"]),
        demo_laps_pretrain=int(demos["laps_pretrain"]),
        demo_seed=int(demos["seed"]),
        vehicle=_typed(VehicleParams, resolved["vehicle"], "vehicle"),
        episode=_typed(EpisodeConfig, resolved["episode"], "episode"),
        expert=_typed(ExpertParams, resolved["expert"], "expert"),
        bet=_typed(BeTConfig, resolved["bet"], "bet"),
        bc=copy.deepcopy(resolved["bc"]),
        train=_typed(TrainConfig, train_d, "train"),
    )


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return build_config(doc)
