"""Causal-transformer base policy trained by behavior cloning.

A pre-norm transformer over windows of normalized observations predicts
the demonstrator's action at every causal position; training minimizes
the mean squared error over all positions of each window. The attention
mask is exact (future columns carry probability exactly zero), so the
prediction at position t is bit-identical whether or not later
observations are appended to the window. Training uses long windows;
control uses a short sliding window that grows from length 1 after a
reset.

The model is trained once and then frozen: downstream trainers hold it
without any optimizer, and a parameter checksum guards against drift.
"""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from . import autodiff as ad
from . import nets
from .env import OBS_CLIP, Normalizer
from .optim import Lamb, LambConfig
from .seeding import stream

__all__ = [
    "BeTConfig",
    "BeT",
    "pretrain",
    "save_bet",
    "load_bet",
    "param_checksum",
]


@dataclasses.dataclass(frozen=True)
class BeTConfig:
    """Architecture and pretraining settings.

    context is the training window length; eval_context the sliding
    window used for control. loss_positions records that the regression
    covers every causal position (not only the last).
    """

    obs_dim: int = 50
    act_dim: int = 2
    embed_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    context: int = 20
    eval_context: int = 5
    dropout: float = 0.1
    mlp_ratio: int = 4
    w_std: float = 0.02
    nonlinearity: str = "relu"
    batch_size: int = 64
    updates: int = 4000
    stop_loss: float = 1e-3
    lr: float = 1e-4
    weight_decay: float = 5e-4
    loss_positions: str = "all"

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must divide evenly into heads")
        if self.eval_context > self.context:
            raise ValueError("eval_context cannot exceed the training context")
        if self.nonlinearity != "relu":
            raise ValueError("only relu blocks are supported")
        if self.loss_positions != "all":
            raise ValueError("loss is defined over all causal positions")

    @staticmethod
    def from_dict(d):
        return BeTConfig(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


def _softmax_causal_np(scores):
    """Numpy twin of the causal softmax op; identical arithmetic."""
    t = scores.shape[-1]
    allowed = np.tril(np.ones((t, t), dtype=bool))
    masked = np.where(allowed, scores, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    weights = np.where(allowed, np.exp(np.where(allowed, shifted, 0.0)), 0.0)
    totals = np.cumsum(weights, axis=-1)[..., -1:]
    return weights / totals


def _layer_norm_np(x, gain, bias, eps=1e-5):
    m = x.mean(axis=-1, keepdims=True)
    c = x - m
    var = (c * c).mean(axis=-1, keepdims=True)
    return (c / np.sqrt(var + eps)) * gain + bias


class _Block:
    def __init__(self, cfg, rng):
        d = cfg.embed_dim
        dtype = ad.default_dtype()
        self.ln1_gain = ad.Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.ln1_bias = ad.Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.wq = nets.Affine(d, d, rng, w_std=cfg.w_std)
        self.wk = nets.Affine(d, d, rng, w_std=cfg.w_std)
        self.wv = nets.Affine(d, d, rng, w_std=cfg.w_std)
        self.wo = nets.Affine(d, d, rng, w_std=cfg.w_std)
        self.ln2_gain = ad.Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.ln2_bias = ad.Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.w1 = nets.Affine(d, cfg.mlp_ratio * d, rng, w_std=cfg.w_std)
        self.w2 = nets.Affine(cfg.mlp_ratio * d, d, rng, w_std=cfg.w_std)

    def params(self, prefix):
        return {
            f"{prefix}.ln1.gain": self.ln1_gain,
            f"{prefix}.ln1.bias": self.ln1_bias,
            f"{prefix}.q.W": self.wq.W,
            f"{prefix}.q.b": self.wq.b,
            f"{prefix}.k.W": self.wk.W,
            f"{prefix}.k.b": self.wk.b,
            f"{prefix}.v.W": self.wv.W,
            f"{prefix}.v.b": self.wv.b,
            f"{prefix}.o.W": self.wo.W,
            f"{prefix}.o.b": self.wo.b,
            f"{prefix}.ln2.gain": self.ln2_gain,
            f"{prefix}.ln2.bias": self.ln2_bias,
            f"{prefix}.m1.W": self.w1.W,
            f"{prefix}.m1.b": self.w1.b,
            f"{prefix}.m2.W": self.w2.W,
            f"{prefix}.m2.b": self.w2.b,
        }


class BeT:
    """The transformer policy; normalized observations in, actions out."""

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = ad.default_dtype()
        self.in_proj = nets.Affine(cfg.obs_dim, cfg.embed_dim, rng, w_std=cfg.w_std)
        self.pos_emb = ad.Tensor(
            nets.trunc_normal((cfg.context, cfg.embed_dim), cfg.w_std, rng), requires_grad=True
        )
        self.blocks = [_Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.lnf_gain = ad.Tensor(np.ones(cfg.embed_dim, dtype=dtype), requires_grad=True)
        self.lnf_bias = ad.Tensor(np.zeros(cfg.embed_dim, dtype=dtype), requires_grad=True)
        self.head = nets.Affine(cfg.embed_dim, cfg.act_dim, rng, w_std=cfg.w_std)

    def params(self):
        out = {"in.W": self.in_proj.W, "in.b": self.in_proj.b, "pos.emb": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"blk{i}"))
        out.update(
            {
                "lnf.gain": self.lnf_gain,
                "lnf.bias": self.lnf_bias,
                "head.W": self.head.W,
                "head.b": self.head.b,
            }
        )
        return out

    def forward(self, x, train=False, rng=None):
        """Taped forward over a window batch: (B, T, obs) -> (B, T, act)."""
        cfg = self.cfg
        t = x.shape[1]
        if t > cfg.context:
            raise ValueError(f"window length {t} exceeds context {cfg.context}")
        x = ad.clip(x, -OBS_CLIP, OBS_CLIP)
        h = ad.add(self.in_proj(x), ad.narrow(self.pos_emb, 0, t, axis=0))
        h = ad.dropout(h, cfg.dropout, rng, train)
        hd = cfg.embed_dim // cfg.n_heads
        inv = 1.0 / np.sqrt(hd)
        for blk in self.blocks:
            a = ad.layer_norm(h, blk.ln1_gain, blk.ln1_bias)
            q = blk.wq(a)
            k = blk.wk(a)
            v = blk.wv(a)
            heads = []
            for i in range(cfg.n_heads):
                qh = ad.narrow(q, i * hd, hd, axis=-1)
                kh = ad.narrow(k, i * hd, hd, axis=-1)
                vh = ad.narrow(v, i * hd, hd, axis=-1)
                scores = ad.scale(ad.matmul(qh, ad.transpose_last2(kh)), inv)
                w = ad.causal_softmax_last(scores)
                w = ad.dropout(w, cfg.dropout, rng, train)
                heads.append(ad.matmul(w, vh))
            att = ad.dropout(blk.wo(ad.concat(heads, axis=-1)), cfg.dropout, rng, train)
            h = ad.add(h, att)
            m = ad.layer_norm(h, blk.ln2_gain, blk.ln2_bias)
            m = blk.w2(ad.relu(blk.w1(m)))
            m = ad.dropout(m, cfg.dropout, rng, train)
            h = ad.add(h, m)
        h = ad.layer_norm(h, self.lnf_gain, self.lnf_bias)
        return ad.tanh(self.head(h))

    def predict(self, windows):
        """Gradient-free numpy twin of forward(train=False).

        windows is (B, T, obs) float32 normalized observations; returns
        (B, T, act) float32. Bit-identical to the taped path.
        """
        cfg = self.cfg
        x = np.asarray(windows, dtype=np.float32)
        t = x.shape[1]
        if t > cfg.context:
            raise ValueError(f"window length {t} exceeds context {cfg.context}")
        x = np.clip(x, -OBS_CLIP, OBS_CLIP)
        h = self.in_proj.predict(x) + self.pos_emb.data[:t]
        hd = cfg.embed_dim // cfg.n_heads
        inv = np.float32(1.0 / np.sqrt(hd))
        for blk in self.blocks:
            a = _layer_norm_np(h, blk.ln1_gain.data, blk.ln1_bias.data)
            q = blk.wq.predict(a)
            k = blk.wk.predict(a)
            v = blk.wv.predict(a)
            heads = []
            for i in range(cfg.n_heads):
                qh = q[..., i * hd : (i + 1) * hd]
                kh = k[..., i * hd : (i + 1) * hd]
                vh = v[..., i * hd : (i + 1) * hd]
                scores = (qh @ np.swapaxes(kh, -1, -2)) * inv
                w = _softmax_causal_np(scores)
                heads.append(w @ vh)
            h = h + blk.wo.predict(np.concatenate(heads, axis=-1))
            m = _layer_norm_np(h, blk.ln2_gain.data, blk.ln2_bias.data)
            m = blk.w2.predict(np.maximum(blk.w1.predict(m), 0.0))
            h = h + m
        h = _layer_norm_np(h, self.lnf_gain.data, self.lnf_bias.data)
        return np.tanh(self.head.predict(h))

    def predict_last(self, windows):
        """Action at the latest position only: (B, T, obs) -> (B, act)."""
        return self.predict(windows)[:, -1, :]


def train_step(model, obs_windows, act_windows, opt, rng):
    """One regression update; returns the scalar batch loss."""
    params = model.params()
    ad.zero_grads(params.values())
    pred = model.forward(ad.Tensor(obs_windows), train=True, rng=rng)
    loss = ad.mse(pred, ad.Tensor(act_windows))
    ad.backward(loss)
    opt.step()
    return float(loss.data)


def pretrain(model, demoset, seed, progress=None):
    """Behavior-clone the demonstrations into the model.

    Samples uniform sub-trajectory windows, optimizes with the layer-wise
    adaptive optimizer, and stops early once the smoothed loss reaches
    cfg.stop_loss. Returns the loss history (one entry per update).
    """
    cfg = model.cfg
    norm = demoset.normalizer
    pairs = demoset.window_index(cfg.context)
    if not pairs:
        raise ValueError("demonstrations are shorter than the training context")
    opt = Lamb(model.params(), LambConfig(lr=cfg.lr, weight_decay=cfg.weight_decay))
    history = []
    ema = None
    for update in range(cfg.updates):
        rng = stream(seed, "bet", update)
        obs, act = demoset.sample_windows(pairs, rng, cfg.batch_size, cfg.context)
        loss = train_step(model, norm.transform(obs), act, opt, rng)
        history.append(loss)
        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        if progress is not None and (update + 1) % 200 == 0:
            progress(update + 1, loss, ema)
        if cfg.stop_loss and ema is not None and ema <= cfg.stop_loss:
            break
    return history


def param_checksum(model):
    """SHA-256 over all parameter bytes in name order."""
    digest = hashlib.sha256()
    for name in sorted(model.params()):
        digest.update(model.params()[name].data.tobytes())
    return digest.hexdigest()


def save_bet(path, model, normalizer, extra=None):
    meta = {
        "kind": "bet",
        "config": model.cfg.to_dict(),
        "normalizer": normalizer.to_dict(),
        **(extra or {}),
    }
    nets.save_params(path, model.params(), meta)


def load_bet(path):
    """Returns (model, normalizer, meta) from a checkpoint."""
    meta, arrays = nets.load_params(path)
    if meta.get("kind") != "bet":
        raise ValueError(f"not a base-policy checkpoint: {path}")
    cfg = BeTConfig.from_dict(meta["config"])
    model = BeT(cfg, np.random.default_rng(0))
    nets.assign_params(model.params(), arrays)
    return model, Normalizer.from_dict(meta["normalizer"]), meta
