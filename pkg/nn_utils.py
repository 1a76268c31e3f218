"""
Minimal MLP engine
==================
Fully connected layers with ReLU / Abs / Identity activations, an exact
backward pass, RMSProp, global-norm gradient clipping and a signed,
versioned checkpoint format.

Parameters of one network live in a single flat float64 array (ParamSet);
weights and biases are reshaped views into it, so snapshots and target
copies are plain array copies.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint_integrity import TAG_SIZE, attach_integrity, split_and_verify

logger = logging.getLogger(__name__)


# ============================================================================
# ERRORS
# ============================================================================

class NumericalError(ValueError):
    """Non-finite gradient, loss or probability encountered."""


class WidthMismatch(ValueError):
    """Input width does not match the first layer."""


class StaleCacheError(ValueError):
    """Activation cache was produced before the parameters last changed."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or failed its integrity check."""


# ============================================================================
# PARAMETER STORAGE
# ============================================================================

Layout = Tuple[Tuple[str, Tuple[int, ...]], ...]


class ParamSet:
    """Flat float64 storage with a (name, shape) layout descriptor."""

    def __init__(self, layout: Sequence[Tuple[str, Sequence[int]]], flat: Optional[np.ndarray] = None):
        self.layout: Layout = tuple((name, tuple(int(d) for d in shape)) for name, shape in layout)
        self._offsets: Dict[str, Tuple[int, int, Tuple[int, ...]]] = {}
        start = 0
        for name, shape in self.layout:
            count = int(np.prod(shape)) if shape else 1
            self._offsets[name] = (start, start + count, shape)
            start += count
        if flat is None:
            self.flat = np.zeros(start, dtype=np.float64)
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != (start,):
                raise WidthMismatch(f"flat array has {flat.size} entries, layout needs {start}")
            self.flat = flat.copy()
        self.version = 0

    @property
    def size(self) -> int:
        return self.flat.size

    def view(self, name: str) -> np.ndarray:
        start, stop, shape = self._offsets[name]
        return self.flat[start:stop].reshape(shape)

    def names(self) -> List[str]:
        return [name for name, _ in self.layout]

    def copy(self) -> "ParamSet":
        return ParamSet(self.layout, self.flat)

    def assign(self, other: "ParamSet") -> None:
        """Overwrite in place with another set of identical layout."""
        if other.layout != self.layout:
            raise WidthMismatch("cannot assign parameters with a different layout")
        self.flat[:] = other.flat
        self.version += 1

    def touch(self) -> None:
        self.version += 1

    def zeros_like(self) -> "GradSet":
        return GradSet(self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


class GradSet(ParamSet):
    """Gradient container; layout always mirrors a ParamSet."""

    def add(self, other: "GradSet") -> "GradSet":
        if other.layout != self.layout:
            raise WidthMismatch("gradient layouts differ")
        out = GradSet(self.layout, self.flat)
        out.flat += other.flat
        return out

    def scale(self, factor: float) -> None:
        self.flat *= factor

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat))


# ============================================================================
# ACTIVATIONS
# ============================================================================

class Activation(str, Enum):
    RELU = "relu"
    ABS = "abs"
    IDENTITY = "identity"


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.ABS:
        return np.abs(z)
    return z


def _activation_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    if kind is Activation.ABS:
        return np.sign(z)
    return np.ones_like(z)


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


# ============================================================================
# MLP
# ============================================================================

@dataclass
class MlpCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    version: int
    params_id: int
    squeeze: bool


class Mlp:
    """
    Stack of affine layers. `widths` lists every layer width including the
    input, e.g. [40, 250, 120, 120, 2]. Hidden layers default to ReLU and the
    final layer is always Identity.
    """

    def __init__(
        self,
        widths: Sequence[int],
        hidden_activation: Activation = Activation.RELU,
        rng: Optional[np.random.Generator] = None,
        params: Optional[ParamSet] = None,
    ):
        if len(widths) < 2:
            raise WidthMismatch("an MLP needs at least an input and an output width")
        self.widths = [int(w) for w in widths]
        n_layers = len(self.widths) - 1
        self.activations = [Activation(hidden_activation)] * (n_layers - 1) + [Activation.IDENTITY]

        layout = []
        for k in range(n_layers):
            layout.append((f"W{k}", (self.widths[k], self.widths[k + 1])))
            layout.append((f"b{k}", (self.widths[k + 1],)))

        if params is not None:
            if params.layout != tuple((n, tuple(s)) for n, s in layout):
                raise WidthMismatch("supplied parameters do not match the layer widths")
            self.params = params
        else:
            self.params = ParamSet(layout)
            if rng is not None:
                init_uniform(self.params, rng)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def layer(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.params.view(f"W{k}"), self.params.view(f"b{k}")

    def clone(self) -> "Mlp":
        twin = Mlp(self.widths, params=self.params.copy())
        twin.activations = list(self.activations)
        return twin


def init_uniform(params: ParamSet, rng: np.random.Generator) -> None:
    """Uniform in +-1/sqrt(fan_in); biases share their layer's fan-in."""
    fan_in = 1
    for name, shape in params.layout:
        if name.startswith("W"):
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params.view(name)[...] = rng.uniform(-bound, bound, size=shape)
    params.touch()


def forward(mlp: Mlp, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    """Affine+activation composition. Accepts a vector or a (batch, width) array."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != mlp.widths[0]:
        raise WidthMismatch(f"input width {h.shape[1]} != first layer width {mlp.widths[0]}")

    inputs, pre = [], []
    for k in range(mlp.n_layers):
        W, b = mlp.layer(k)
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = _activate(mlp.activations[k], z)

    cache = MlpCache(inputs, pre, mlp.params.version, id(mlp.params), squeeze)
    return (h[0] if squeeze else h), cache


def backward(mlp: Mlp, cache: MlpCache, grad_out: np.ndarray) -> Tuple[GradSet, np.ndarray]:
    """Exact gradients w.r.t. every parameter and the input (summed over the batch)."""
    if cache.params_id != id(mlp.params) or cache.version != mlp.params.version:
        raise StaleCacheError("parameters changed since the forward pass")

    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    grads = mlp.params.zeros_like()

    for k in reversed(range(mlp.n_layers)):
        W, _ = mlp.layer(k)
        dz = g * _activation_grad(mlp.activations[k], cache.pre_activations[k])
        grads.view(f"W{k}")[...] = cache.inputs[k].T @ dz
        grads.view(f"b{k}")[...] = dz.sum(axis=0)
        g = dz @ W.T

    return grads, (g[0] if cache.squeeze else g)


# ============================================================================
# OPTIMIZER
# ============================================================================

@dataclass
class RmsPropState:
    acc: np.ndarray
    lr: float
    rho: float = 0.99
    eps: float = 1e-5
    steps: int = field(default=0)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float, rho: float = 0.99, eps: float = 1e-5) -> "RmsPropState":
        return cls(acc=np.zeros(params.size), lr=lr, rho=rho, eps=eps)


def check_finite(grads: GradSet, label: str = "gradient") -> None:
    if not np.all(np.isfinite(grads.flat)):
        raise NumericalError(f"non-finite {label}")


def rmsprop_step(params: ParamSet, grads: GradSet, state: RmsPropState) -> ParamSet:
    """acc <- rho*acc + (1-rho)*g^2 ; p <- p - lr*g/(sqrt(acc)+eps)."""
    if grads.layout != params.layout or state.acc.shape != params.flat.shape:
        raise WidthMismatch("parameter, gradient and optimizer layouts differ")
    check_finite(grads)

    g = grads.flat
    state.acc *= state.rho
    state.acc += (1.0 - state.rho) * g * g
    params.flat -= state.lr * g / (np.sqrt(state.acc) + state.eps)
    state.steps += 1
    params.touch()
    return params


def clip_by_global_norm(grads: Sequence[GradSet], max_norm: Optional[float]) -> float:
    """Scale all gradients together so their joint L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float(g.flat @ g.flat) for g in grads)))
    if max_norm is not None and total > max_norm and np.isfinite(total):
        factor = max_norm / total
        for g in grads:
            g.scale(factor)
    return total


# ============================================================================
# CHECKPOINTS
# ============================================================================
# Layout on disk (all little-endian):
#   8s  magic  b"QPMXCKPT"
#   H   format version
#   I   header length in bytes
#   ... header JSON (utf-8): {"metadata": {...}, "tensors": [{"name", "layout"}]}
#   ... raw float64 values of every tensor, in header order
#   32s HMAC-SHA256 tag over everything above

CHECKPOINT_MAGIC = b"QPMXCKPT"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sHI")


def save_checkpoint(path, tensors: Dict[str, ParamSet], metadata: Optional[dict] = None) -> None:
    header = {
        "metadata": metadata or {},
        "tensors": [
            {"name": name, "layout": [[n, list(s)] for n, s in ps.layout]}
            for name, ps in tensors.items()
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = [_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)), header_bytes]
    body.extend(ps.flat.astype("<f8").tobytes() for ps in tensors.values())

    blob = attach_integrity(b"".join(body))
    with open(path, "wb") as f:
        f.write(blob)
    logger.debug(f"Checkpoint written: {path} ({len(tensors)} tensors, {len(blob)} bytes)")


def load_checkpoint(path) -> Tuple[Dict[str, ParamSet], dict]:
    with open(path, "rb") as f:
        blob = f.read()

    if len(blob) < _PREAMBLE.size + TAG_SIZE:
        raise CheckpointError(f"{path}: file too short")
    is_valid, result = split_and_verify(blob)
    if not is_valid:
        logger.error(f"Checkpoint integrity failure: {path}: {result}")
        raise CheckpointError(f"{path}: {result}")
    payload = result

    magic, version, header_len = _PREAMBLE.unpack_from(payload, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")

    offset = _PREAMBLE.size
    header = json.loads(payload[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    tensors: Dict[str, ParamSet] = {}
    for entry in header["tensors"]:
        ps = ParamSet([(n, tuple(s)) for n, s in entry["layout"]])
        nbytes = ps.size * 8
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        ps.flat[:] = np.frombuffer(payload, dtype="<f8", count=ps.size, offset=offset)
        tensors[entry["name"]] = ps
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")

    return tensors, header["metadata"]
