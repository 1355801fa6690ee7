"""
numgrad: reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor remembers the op that produced it and the tensors it was produced
from. backward() walks that tape in reverse topological order and
accumulates gradients into leaf tensors created with requires_grad=True
(in practice, the members of a ParameterSet). The graph is rebuilt on every
forward pass.
"""

import contextlib
import logging
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from artifacts import PathLike, write_atomic
from errors import ArtifactError, DomainError, FairTransError, ShapeError

logger = logging.getLogger(__name__)

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: "Tensor", b: "Tensor") -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape)


def _expand_reduced(grad, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence]] = None

    @classmethod
    def _from_op(cls, data, parents, backward, op) -> "Tensor":
        out = cls(data)
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return (
            f"Tensor(shape={self.shape}, op={self.op!r}, "
            f"requires_grad={self.requires_grad})"
        )

    # Elementwise arithmetic

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        _broadcast_shape("add", self, other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        _broadcast_shape("sub", self, other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
            "sub",
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        _broadcast_shape("mul", self, other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        _broadcast_shape("div", self, other)
        if np.any(other.data == 0):
            raise DomainError("div: division by zero", {"op": "div"})
        a, b = self.data, other.data
        return Tensor._from_op(
            a / b,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
            "div",
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # Reductions

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        return Tensor._from_op(
            self.data.sum(axis=axis, keepdims=keepdims),
            (self,),
            lambda g: (_expand_reduced(g, shape, axis, keepdims),),
            "sum",
        )

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        count = self.data.size if axis is None else self.data.shape[axis]
        if count == 0:
            raise ShapeError("mean", shape)
        return Tensor._from_op(
            self.data.mean(axis=axis, keepdims=keepdims),
            (self,),
            lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,),
            "mean",
        )

    # Pointwise functions

    def abs(self) -> "Tensor":
        x = self.data
        return Tensor._from_op(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    def log(self) -> "Tensor":
        x = self.data
        if np.any(x <= 0) or not np.all(np.isfinite(x)):
            raise DomainError(
                "log: input must be finite and strictly positive",
                {"op": "log", "min": float(np.min(x)) if x.size else None},
            )
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def sigmoid(self) -> "Tensor":
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        out[~pos] = e / (1.0 + e)
        return Tensor._from_op(
            out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid"
        )

    logistic = sigmoid

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def relu(self) -> "Tensor":
        x = self.data
        return Tensor._from_op(
            np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),), "relu"
        )

    def cos(self) -> "Tensor":
        x = self.data
        return Tensor._from_op(np.cos(x), (self,), lambda g: (-g * np.sin(x),), "cos")

    def arccos(self) -> "Tensor":
        x = self.data
        if np.any(np.abs(x) > 1.0):
            raise DomainError("arccos: input outside [-1, 1]", {"op": "arccos"})

        def backward(g):
            if np.any(np.abs(x) >= 1.0):
                raise DomainError(
                    "arccos: gradient is infinite at ±1; clamp the input first",
                    {"op": "arccos"},
                )
            return (-g / np.sqrt(1.0 - x * x),)

        return Tensor._from_op(np.arccos(x), (self,), backward, "arccos")

    def clamp(
        self, low: Optional[float] = None, high: Optional[float] = None
    ) -> "Tensor":
        x = self.data
        inside = np.ones_like(x, dtype=bool)
        if low is not None:
            inside &= x >= low
        if high is not None:
            inside &= x <= high
        return Tensor._from_op(
            np.clip(x, low, high), (self,), lambda g: (g * inside,), "clamp"
        )

    # Shape manipulation

    def reshape(self, *shape) -> "Tensor":
        original = self.shape
        return Tensor._from_op(
            self.data.reshape(*shape),
            (self,),
            lambda g: (g.reshape(original),),
            "reshape",
        )

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError("transpose", self.shape)
        return Tensor._from_op(self.data.T, (self,), lambda g: (g.T,), "transpose")

    # Normalization

    def l2_normalize(self) -> "Tensor":
        """Scale every vector along the last axis to unit L2 norm."""
        x = self.data
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        if np.any(norm == 0) or not np.all(np.isfinite(norm)):
            raise DomainError(
                "l2_normalize: zero-norm or non-finite input",
                {"op": "l2_normalize", "shape": x.shape},
            )
        y = x / norm

        def backward(g):
            return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

        return Tensor._from_op(y, (self,), backward, "l2_normalize")

    def log_softmax(self) -> "Tensor":
        """Log-softmax along the last axis, stabilized by max subtraction."""
        x = self.data
        shifted = x - np.max(x, axis=-1, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

        def backward(g):
            return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

        return Tensor._from_op(out, (self,), backward, "log_softmax")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    x, w = a.data, b.data
    return Tensor._from_op(
        x @ w, (a, b), lambda g: (g @ w.T, x.T @ g), "matmul"
    )


def dot(a, b) -> Tensor:
    """Row-wise dot product along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    return (a * b).sum(axis=-1)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", ())
    first = tensors[0].shape
    axis = axis % len(first)
    for t in tensors[1:]:
        if len(t.shape) != len(first) or any(
            t.shape[i] != first[i] for i in range(len(first)) if i != axis
        ):
            raise ShapeError("concat", first, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(
            "cross_entropy: label out of range",
            {"op": "cross_entropy", "n_classes": n_classes},
        )
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return -(logits.log_softmax() * onehot).sum(axis=-1).mean()


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf requiring grad."""
    if root.data.size != 1:
        raise ShapeError("backward", root.shape)
    if not root.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad = node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParameterSet:
    """Named, ordered collection of trainable tensors with optimizer state."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.state: Dict[str, AdamState] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise FairTransError(f"Duplicate parameter name '{name}'", {"name": name})
        data = np.array(value, dtype=np.float64)
        tensor = Tensor(data, requires_grad=True, name=name)
        self._params[name] = tensor
        self.state[name] = AdamState(np.zeros_like(data), np.zeros_like(data))
        return tensor

    @classmethod
    def combine(cls, sets: Mapping[str, "ParameterSet"]) -> "ParameterSet":
        """View over several sets sharing their tensors, names prefixed."""
        combined = cls()
        for prefix, params in sets.items():
            for name, tensor in params.items():
                key = f"{prefix}.{name}"
                if key in combined._params:
                    raise FairTransError(
                        f"Duplicate parameter name '{key}'", {"name": key}
                    )
                combined._params[key] = tensor
                combined.state[key] = params.state[name]
        return combined

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Exclude these parameters from graph recording inside the block."""
        previous = {name: t.requires_grad for name, t in self._params.items()}
        for tensor in self._params.values():
            tensor.requires_grad = False
        try:
            yield self
        finally:
            for name, tensor in self._params.items():
                tensor.requires_grad = previous[name]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = [name for name in self._params if name not in state]
        if missing:
            raise ArtifactError(
                f"State is missing parameters: {', '.join(missing)}",
                {"missing": missing},
            )
        for name, tensor in self._params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ShapeError(f"load_state_dict[{name}]", tensor.shape, value.shape)
            tensor.data = value.copy()


def adam_step(
    params: ParameterSet,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected adaptive-moment update; gradients are left as is."""
    if lr <= 0:
        raise DomainError("adam_step: learning rate must be positive", {"lr": lr})
    for name, tensor in params.items():
        state = params.state[name]
        state.step += 1
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        state.m = beta1 * state.m + (1.0 - beta1) * grad
        state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
        m_hat = state.m / (1.0 - beta1**state.step)
        v_hat = state.v / (1.0 - beta2**state.step)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def _crosses_kink(plus: np.ndarray, minus: np.ndarray, tol: float) -> bool:
    return bool(
        np.any(np.sign(plus) != np.sign(minus))
        or np.any(np.minimum(np.abs(plus), np.abs(minus)) < tol)
    )


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterSet,
    epsilon: float = 1e-5,
    n_coords: int = 50,
    seed: int = 0,
    kinks: Optional[Callable[[], np.ndarray]] = None,
    kink_tol: float = 1e-6,
) -> float:
    """
    Compare backward() against central finite differences.

    Args:
        loss_fn: rebuilds the scalar loss from the current parameter values
        params: parameters to perturb
        epsilon: perturbation size, within [1e-7, 1e-3]
        n_coords: coordinates sampled (all of them when fewer exist)
        kinks: optional callable returning quantities whose sign must not flip
            between the two perturbed evaluations (e.g. L1 residuals); a
            coordinate whose perturbation crosses or touches one is skipped

    Returns:
        The worst relative error |a - n| / max(|a|, |n|, 1e-8).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise DomainError(
            "finite_diff_check: epsilon must lie in [1e-7, 1e-3]", {"epsilon": epsilon}
        )
    params.zero_grad()
    backward(loss_fn())
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    params.zero_grad()

    coords = [(name, i) for name, t in params.items() for i in range(t.size)]
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)

    worst = 0.0
    skipped = 0
    with no_grad():
        for c in picked:
            name, flat_index = coords[c]
            tensor = params[name]
            index = np.unravel_index(flat_index, tensor.shape)
            original = tensor.data[index]

            tensor.data[index] = original + epsilon
            f_plus = loss_fn().item()
            k_plus = kinks() if kinks else None
            tensor.data[index] = original - epsilon
            f_minus = loss_fn().item()
            k_minus = kinks() if kinks else None
            tensor.data[index] = original

            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise DomainError(
                    "finite_diff_check: non-finite loss at coordinate "
                    f"{name}{list(index)}",
                    {"coordinate": name, "index": [int(i) for i in index]},
                )
            if kinks is not None and _crosses_kink(k_plus, k_minus, kink_tol):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            exact = analytic[name][index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, error)
    if skipped:
        logger.info("finite_diff_check skipped %d coordinates near a kink", skipped)
    return worst


class MLP:
    """Dense network over flattened inputs."""

    def __init__(
        self,
        sizes: Sequence[int],
        hidden: str = "tanh",
        output: str = "linear",
        seed: int = 0,
    ):
        if len(sizes) < 2:
            raise ShapeError("MLP", tuple(sizes))
        self.sizes = tuple(int(s) for s in sizes)
        self.hidden = hidden
        self.output = output
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = np.sqrt(6.0 / (n_in + n_out))
            self.params.add(f"W{i}", rng.uniform(-bound, bound, (n_in, n_out)))
            self.params.add(f"b{i}", np.zeros(n_out))

    @staticmethod
    def _activate(x: Tensor, kind: str) -> Tensor:
        if kind == "linear":
            return x
        return getattr(x, kind)()

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            x = x @ self.params[f"W{i}"] + self.params[f"b{i}"]
            x = self._activate(x, self.hidden if i < n_layers - 1 else self.output)
        return x


CHECKPOINT_MAGIC = b"FTNS"
CHECKPOINT_VERSION = 1


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        array = np.ascontiguousarray(value, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise ArtifactError("Truncated checkpoint", {"offset": offset})
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    if blob[:4] != CHECKPOINT_MAGIC:
        raise ArtifactError("Not a checkpoint: bad magic bytes", {"magic": blob[:4]})
    offset = 4
    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise ArtifactError(
            f"Unsupported checkpoint version {version}", {"version": version}
        )
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}Q")
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n_bytes > len(blob):
            raise ArtifactError("Truncated checkpoint", {"entry": name})
        tensors[name] = (
            np.frombuffer(blob, dtype="<f8", count=n_bytes // 8, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += n_bytes
    return tensors


def save_checkpoint(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    write_atomic(path, encode_checkpoint(tensors))


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise ArtifactError(f"Checkpoint not found: {path}", {"path": str(path)})
    return decode_checkpoint(blob)
