"""Network building blocks on top of the autodiff core.

Every net exposes two forward paths: ``__call__`` takes tape tensors and
participates in backward(), while ``predict`` runs the same arithmetic on
raw numpy arrays for gradient-free uses (rollouts, bootstrap targets,
reward computation). The two paths share the same parameter buffers, so a
value computed on either path is bit-identical for the same input dtype.

Also here: the taped input-gradient construction used by the gradient
penalty. It writes the backward pass of a small MLP as ordinary tape ops,
so differentiating the resulting gradient norm again yields exact
second-order parameter gradients without a dedicated double-backward
engine.
"""

from __future__ import annotations

import json
from collections import OrderedDict

import numpy as np

from . import autodiff as ad

__all__ = [
    "trunc_normal",
    "Affine",
    "MLP",
    "mlp_input_gradient",
    "gradient_penalty",
    "save_params",
    "load_params",
]

CHECKPOINT_FORMAT = "racelab-tensors-v1"


def trunc_normal(shape, std, rng):
    """Normal(0, std) redrawn until within two standard deviations."""
    out = rng.standard_normal(shape)
    for _ in range(8):
        bad = np.abs(out) > 2.0
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum()))
    return (np.clip(out, -2.0, 2.0) * std).astype(ad.default_dtype())


class Affine:
    """x @ W + b with W of shape (fan_in, fan_out)."""

    def __init__(self, fan_in, fan_out, rng, w_std=None, zero=False):
        if zero:
            w = np.zeros((fan_in, fan_out), dtype=ad.default_dtype())
        else:
            std = w_std if w_std is not None else 1.0 / np.sqrt(fan_in)
            w = trunc_normal((fan_in, fan_out), std, rng)
        self.W = ad.Tensor(w, requires_grad=True)
        self.b = ad.Tensor(np.zeros(fan_out, dtype=ad.default_dtype()), requires_grad=True)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.W), self.b)

    def predict(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            lead = x.shape[:2]
            flat = x.reshape(-1, x.shape[-1]) @ self.W.data + self.b.data
            return flat.reshape(lead + (self.W.data.shape[-1],))
        return x @ self.W.data + self.b.data


_ACT_TAPED = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "identity": lambda t: t,
}

_ACT_NP = {
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0))),
    "identity": lambda x: x,
}


class MLP:
    """Fully connected stack with one activation name per layer."""

    def __init__(self, dims, acts, rng, name="mlp", final_zero=False, w_std=None):
        if len(acts) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        self.dims = list(dims)
        self.acts = list(acts)
        self.name = name
        self.layers = []
        for i in range(len(dims) - 1):
            zero = final_zero and i == len(dims) - 2
            self.layers.append(Affine(dims[i], dims[i + 1], rng, w_std=w_std, zero=zero))

    def params(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            out[f"{self.name}.{i}.W"] = layer.W
            out[f"{self.name}.{i}.b"] = layer.b
        return out

    def __call__(self, x):
        h = x
        for layer, act in zip(self.layers, self.acts):
            h = _ACT_TAPED[act](layer(h))
        return h

    def predict(self, x):
        h = np.asarray(x)
        for layer, act in zip(self.layers, self.acts):
            h = _ACT_NP[act](layer.predict(h))
        return h


def mlp_input_gradient(mlp, x):
    """Tape-resident gradient of a scalar-output MLP wrt its input.

    Returns (output, input_grad) as tensors of shapes (B, 1) and (B, in).
    The backward pass is spelled out with primitive ops, so backward()
    through input_grad produces exact second-order parameter gradients.
    Supported activations: tanh, sigmoid, identity; anything else (relu
    has no usable second derivative) raises naming the op.
    """
    if mlp.dims[-1] != 1:
        raise ad.AutodiffError("input gradient requires a scalar-output net")
    for act in mlp.acts:
        if act not in ("tanh", "sigmoid", "identity"):
            raise ad.AutodiffError(f"input gradient does not support op '{act}'")
    h = x
    post = []
    for layer, act in zip(mlp.layers, mlp.acts):
        h = _ACT_TAPED[act](layer(h))
        post.append(h)
    out = post[-1]
    batch = x.data.shape[0]
    g = ad.tensor(np.ones((batch, 1)))
    for i in reversed(range(len(mlp.layers))):
        act = mlp.acts[i]
        hi = post[i]
        if act == "tanh":
            g = ad.mul(g, ad.shift(ad.neg(ad.square(hi)), 1.0))
        elif act == "sigmoid":
            g = ad.mul(g, ad.mul(hi, ad.shift(ad.neg(hi), 1.0)))
        g = ad.matmul(g, ad.transpose_last2(mlp.layers[i].W))
    return out, g


def gradient_penalty(mlp, x_hat, target, eps=1e-12):
    """Mean squared deviation of the input-gradient norm from target.

    x_hat is a constant batch (B, in). Returns the scalar penalty tensor;
    backward() through it updates the net toward unit input gradients.
    """
    _, grad = mlp_input_gradient(mlp, ad.tensor(x_hat))
    norm = ad.sqrt(ad.shift(ad.sum_last(ad.square(grad)), eps))
    want = ad.tensor(np.full((x_hat.shape[0], 1), float(target)))
    return ad.mse(norm, want)


def save_params(path, named_arrays, meta):
    """Write named arrays as a JSON header line plus raw buffers.

    Buffers follow in sorted name order, little-endian, dtype per entry
    recorded in the header. The byte stream is a pure function of the
    inputs, so identical params produce identical files.
    """
    names = sorted(named_arrays)
    entries = []
    blobs = []
    for name in names:
        arr = named_arrays[name]
        arr = arr.data if hasattr(arr, "data") and isinstance(getattr(arr, "data"), np.ndarray) else np.asarray(arr)
        code = {"float32": "<f4", "float64": "<f8"}[str(arr.dtype)]
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(np.ascontiguousarray(arr, dtype=code).tobytes())
    header = {"format": CHECKPOINT_FORMAT, "meta": meta, "tensors": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_params(path):
    """Read a checkpoint written by save_params; returns (meta, arrays)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognized checkpoint format in {path}")
        arrays = OrderedDict()
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            dt = np.dtype(entry["dtype"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise ValueError(f"truncated checkpoint {path} at tensor {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"trailing bytes in checkpoint {path}")
    return header["meta"], arrays


def assign_params(params, arrays):
    """Copy loaded arrays into live parameter tensors, checking shapes."""
    for name, tensor in params.items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name}")
        src = arrays[name]
        if tuple(src.shape) != tuple(tensor.data.shape):
            raise ValueError(f"shape mismatch for {name}: {src.shape} vs {tensor.data.shape}")
        tensor.data[...] = src.astype(tensor.data.dtype)
    return params
