"""Multi-layer perceptron with cached forward traces and exact manual backprop."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from distill_lab.numkit import STREAM_INIT, InvalidShapeError, as_matrix, make_rng

ACTIVATIONS = ("relu", "tanh")
INIT_RULES = ("he", "xavier")

CHECKPOINT_MAGIC = b"DLABMLP\x00"
CHECKPOINT_VERSION = 1


class InvalidStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    activation: str = "relu"
    init: str = "he"
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output sizes")
        if min(sizes) < 1:
            raise ValueError("all layer sizes must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.init not in INIT_RULES:
            raise ValueError(f"init must be one of {INIT_RULES}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "init": self.init,
            "seed": self.seed,
        }


@dataclass(eq=False)
class MlpModel:
    spec: MlpSpec
    weights: list
    biases: list

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise InvalidShapeError("parameter count does not match spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise InvalidShapeError(f"layer {i}: bad parameter shapes {w.shape}, {b.shape}")

    def params(self) -> list:
        """Parameters in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> MlpModel:
        return MlpModel(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise InvalidShapeError(f"expected {self.num_params} parameters, got {flat.shape}")
        offset = 0
        for p in self.params():
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params())


@dataclass
class ForwardTrace:
    # inputs[l] feeds layer l; pre[l] is its affine output (pre[-1] are the logits).
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


def init(spec: MlpSpec) -> MlpModel:
    rng = make_rng(spec.seed, STREAM_INIT)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        if spec.init == "he":
            std = np.sqrt(2.0 / fan_in)
        else:
            std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(std * rng.standard_normal((fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(spec, weights, biases)


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    return np.tanh(x)


def _act_grad(pre: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        # subgradient at exactly 0 is 0
        return (pre > 0.0).astype(np.float64)
    return 1.0 - post * post


def forward(model: MlpModel, x, trace: bool = True):
    """Return ``(logits, trace)``; ``trace`` is None when not requested."""
    h = as_matrix(x, "features")
    if h.shape[1] != model.spec.input_dim:
        raise InvalidShapeError(
            f"feature width {h.shape[1]} does not match input size {model.spec.input_dim}"
        )
    tr = ForwardTrace() if trace else None
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        if tr is not None:
            tr.inputs.append(h)
            tr.pre.append(z)
        h = z if i == last else _act(z, model.spec.activation)
    return h, tr


def predict_logits(model: MlpModel, x, batch_size: int = 4096) -> np.ndarray:
    x = as_matrix(x, "features")
    chunks = [forward(model, x[i : i + batch_size], trace=False)[0] for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


def backward(model: MlpModel, trace: ForwardTrace, grad_logits) -> list:
    """Gradients of ``sum(grad_logits * logits)`` w.r.t. the parameters.

    Returned in the same canonical order as :meth:`MlpModel.params`.
    """
    g = np.asarray(grad_logits, dtype=np.float64)
    n_layers = len(model.weights)
    if len(trace.pre) != n_layers or g.shape != trace.pre[-1].shape:
        raise InvalidStateError(
            f"trace does not match gradient: logits {trace.pre[-1].shape if trace.pre else None}, "
            f"grad {g.shape}"
        )
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        grads[2 * i] = trace.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ model.weights[i].T) * _act_grad(
                trace.pre[i - 1], trace.inputs[i], model.spec.activation
            )
    return grads


def save_checkpoint(model: MlpModel, path) -> None:
    """Binary checkpoint: magic, version, JSON spec header, little-endian float64 params."""
    header = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    flat = model.flat_params().astype("<f8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.tobytes())


def load_checkpoint(path) -> MlpModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    spec = MlpSpec(**json.loads(data[16 : 16 + hlen]))
    (n,) = struct.unpack_from("<Q", data, 16 + hlen)
    start = 24 + hlen
    if len(data) != start + 8 * n:
        raise OSError(f"{path}: truncated checkpoint")
    model = init(spec)
    model.set_flat_params(np.frombuffer(data, dtype="<f8", count=n, offset=start))
    return model


def to_json(model: MlpModel) -> str:
    return json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "spec": model.spec.to_dict(),
            "params": model.flat_params().tolist(),
        }
    )


def from_json(text: str) -> MlpModel:
    doc = json.loads(text)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    model = init(MlpSpec(**doc["spec"]))
    model.set_flat_params(doc["params"])
    return model
