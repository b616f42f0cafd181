"""
Query / key encoder pair.

Each encoder is a feature extractor F (fully connected + rectifier layers,
parameter group `theta`), a projection head f (one linear layer followed by
row L2 normalization, group `beta`) and a classifier g (one linear layer,
group `psi`). The query side is trained by SGD; the key side only follows it
through the momentum update.
"""
import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from .errors import CheckpointError, ConfigError, GraphError, ShapeError
from .numgrad import Graph, Tensor, constant

logger = logging.getLogger(__name__)

GROUPS = ("theta", "beta", "psi")

CHECKPOINT_MAGIC = b"TCLCKPT"
CHECKPOINT_VERSION = b"1"

BIAS_INIT = 0.01


# --- ARCHITECTURE ---

@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: Tuple[int, ...] = (128, 64)
    proj_dim: int = 32
    num_classes: int = 10

    @property
    def feat_dim(self) -> int:
        return self.hidden[-1]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Parameter name -> shape, in canonical order."""
        shapes: Dict[str, Tuple[int, ...]] = {}
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden, start=1):
            shapes[f"theta.fc{i}.weight"] = (fan_in, width)
            shapes[f"theta.fc{i}.bias"] = (width,)
            fan_in = width
        shapes["beta.proj.weight"] = (self.feat_dim, self.proj_dim)
        shapes["beta.proj.bias"] = (self.proj_dim,)
        shapes["psi.cls.weight"] = (self.feat_dim, self.num_classes)
        shapes["psi.cls.bias"] = (self.num_classes,)
        return shapes

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, Tuple[int, ...]]) -> "Architecture":
        hidden = []
        i = 1
        while f"theta.fc{i}.weight" in shapes:
            hidden.append(shapes[f"theta.fc{i}.weight"][1])
            i += 1
        if not hidden or "beta.proj.weight" not in shapes or "psi.cls.weight" not in shapes:
            raise CheckpointError("checkpoint does not describe a complete encoder")
        return cls(
            input_dim=shapes["theta.fc1.weight"][0],
            hidden=tuple(hidden),
            proj_dim=shapes["beta.proj.weight"][1],
            num_classes=shapes["psi.cls.weight"][1],
        )


# --- PARAMETER SETS ---

class ParamSet:
    """Named tensors, each belonging to exactly one of the groups theta/beta/psi."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        for name in tensors:
            if name.split(".", 1)[0] not in GROUPS:
                raise ConfigError(f"parameter {name!r} belongs to no group of {GROUPS}")
        self._tensors: Dict[str, Tensor] = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    @property
    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def group(self, name: str) -> str:
        return name.split(".", 1)[0]

    def in_group(self, group: str) -> List[str]:
        return [n for n in self._tensors if self.group(n) == group]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {n: t.shape for n, t in self._tensors.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self._tensors.items()}

    def copy(self, requires_grad: Optional[bool] = None) -> "ParamSet":
        out = {}
        for n, t in self._tensors.items():
            flag = t.requires_grad if requires_grad is None else requires_grad
            out[n] = Tensor(t.values.copy(), requires_grad=flag, name=t.name)
        return ParamSet(out)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def gradients(self, fill_missing: bool = True) -> Dict[str, np.ndarray]:
        """Current gradients by name; parameters the loss never reached get zeros."""
        grads = {}
        for n, t in self._tensors.items():
            if t.grad is not None:
                grads[n] = t.grad
            elif fill_missing:
                grads[n] = np.zeros_like(t.values)
        return grads

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())


def init_params(arch: Architecture, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, small positive biases."""
    tensors = {}
    for name, shape in arch.shapes().items():
        if name.endswith(".weight"):
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-limit, limit, size=shape)
        else:
            # nonzero so a batch row whose rectifiers are all off still projects off the origin
            values = np.full(shape, BIAS_INIT)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    return ParamSet(tensors)


# ============================================================
# ENCODER PAIR
# ============================================================

class EncoderOutput(NamedTuple):
    z: Tensor
    proj: Tensor
    logits: Tensor


def encode(params: ParamSet, x, graph: Graph, arch: Architecture) -> EncoderOutput:
    x_t = x if isinstance(x, Tensor) else constant(x)
    if x_t.values.ndim != 2 or x_t.shape[1] != arch.input_dim:
        raise ShapeError(f"expected input of shape (batch, {arch.input_dim}), got {x_t.shape}")

    h = x_t
    for i in range(1, len(arch.hidden) + 1):
        h = graph.relu(graph.linear(h, params[f"theta.fc{i}.weight"], params[f"theta.fc{i}.bias"]))
    proj = graph.l2normalize_rows(graph.linear(h, params["beta.proj.weight"], params["beta.proj.bias"]))
    logits = graph.linear(h, params["psi.cls.weight"], params["psi.cls.bias"])
    return EncoderOutput(h, proj, logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Classifier probabilities outside any graph."""
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


class EncoderPair:
    def __init__(self, arch: Architecture, alpha: float = 0.99, rng: Optional[np.random.Generator] = None,
                 theta_q: Optional[ParamSet] = None):
        if not 0.0 <= alpha < 1.0:
            raise ConfigError(f"momentum coefficient alpha must lie in [0, 1), got {alpha}")
        self.arch = arch
        self.alpha = float(alpha)
        if theta_q is None:
            theta_q = init_params(arch, rng if rng is not None else np.random.default_rng(0))
        self.theta_q = theta_q
        self.theta_k = theta_q.copy(requires_grad=False)

    @property
    def d(self) -> int:
        return self.arch.proj_dim

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def encode_query(self, x, graph: Graph) -> EncoderOutput:
        return encode(self.theta_q, x, graph, self.arch)

    def encode_key(self, x) -> EncoderOutput:
        # never recorded: no gradient can reach theta_k
        return encode(self.theta_k, x, Graph(record=False), self.arch)

    def snapshot_query(self) -> Dict[str, np.ndarray]:
        return self.theta_q.snapshot()

    def momentum_update(self, query_snapshot: Optional[Mapping[str, np.ndarray]] = None) -> None:
        """
        theta_k <- alpha * theta_k + (1 - alpha) * theta_q(it-1).

        Pass the query values captured before this iteration's optimizer step;
        without a snapshot the current query values are blended.
        """
        source = query_snapshot if query_snapshot is not None else self.theta_q.snapshot()
        if set(source) != set(self.theta_k):
            raise ShapeError("query and key parameter names differ")
        a = self.alpha
        for name, key_t in self.theta_k.items():
            q_vals = np.asarray(source[name], dtype=np.float64)
            if q_vals.shape != key_t.shape:
                raise ShapeError(f"shape mismatch for {name}: {q_vals.shape} vs {key_t.shape}")
            key_t.values = a * key_t.values + (1.0 - a) * q_vals

    def key_has_gradients(self) -> bool:
        return any(t.grad is not None for _, t in self.theta_k.items())

    @classmethod
    def from_checkpoint(cls, path: str, alpha: float = 0.99) -> "EncoderPair":
        tensors = read_checkpoint(path)
        q_shapes = {n[2:]: v.shape for n, v in tensors.items() if n.startswith("q.")}
        pair = cls(Architecture.from_shapes(q_shapes), alpha=alpha)
        _assign(pair, tensors)
        return pair


# --- OPTIMIZER ---

def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float, momentum: float,
             velocity: Dict[str, np.ndarray]) -> None:
    """Classic momentum SGD: v <- m*v + g; p <- p - lr*v."""
    for name, tensor in params.items():
        if name not in grads:
            raise GraphError(f"missing gradient for parameter {name}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != tensor.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {tensor.shape}")
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        tensor.values = tensor.values - lr * v


class SGD:
    """Momentum SGD over one ParamSet. Holds the only optimizer state in the system."""

    def __init__(self, params: ParamSet, lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity: Dict[str, np.ndarray] = {n: np.zeros_like(t.values) for n, t in params.items()}

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        if grads is None:
            grads = self.params.gradients(fill_missing=True)
        sgd_step(self.params, grads, self.lr, self.momentum, self.velocity)


# ============================================================
# CHECKPOINTS
# ============================================================
# little-endian: magic "TCLCKPT1"; u32 count; per tensor: u32 name length,
# utf-8 name ("q." / "k." prefixed), u32 rank, u64 dims, float64 payload.

def save_checkpoint(pair: EncoderPair, path: str) -> None:
    chunks = [CHECKPOINT_MAGIC + CHECKPOINT_VERSION]
    entries = [("q." + n, t.values) for n, t in pair.theta_q.items()]
    entries += [("k." + n, t.values) for n, t in pair.theta_k.items()]
    chunks.append(struct.pack("<I", len(entries)))
    for name, values in entries:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        chunks.append(np.ascontiguousarray(values, dtype="<f8").tobytes())

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp_path, path)
    logger.debug(f"checkpoint written to {path}")


def read_checkpoint(path: str) -> Dict[str, np.ndarray]:
    """Parse a checkpoint file completely. Raises CheckpointError on any defect."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if len(data) < 8 or data[:7] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if data[7:8] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {data[7:8]!r}")

    offset = 8

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CheckpointError(f"{path}: truncated payload")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path}: tensor name is not utf-8") from e
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n_values = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(take(8 * n_values), dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = values
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return tensors


def _assign(pair: EncoderPair, tensors: Mapping[str, np.ndarray]) -> None:
    expected = {"q." + n: t.shape for n, t in pair.theta_q.items()}
    expected.update({"k." + n: t.shape for n, t in pair.theta_k.items()})
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"checkpoint tensors do not match encoder (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} does not match {shape}")
    # validated; now mutate
    for name, values in tensors.items():
        params = pair.theta_q if name.startswith("q.") else pair.theta_k
        params[name[2:]].values = values.copy()
        params[name[2:]].grad = None


def load_checkpoint(pair: EncoderPair, path: str) -> None:
    _assign(pair, read_checkpoint(path))
    logger.debug(f"checkpoint loaded from {path}")
