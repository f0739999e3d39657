"""
Dense float64 tensors and a minimal reverse-mode autodiff tape.

A Graph is recorded during the forward pass (every operation appends a Node
whose parents already exist, so node ids are a topological order) and is
walked in reverse by backward(). Learnable tensors live in a ParamStore;
Param nodes route their gradients back into it, and Activation nodes bound to
AdaptiveParams accumulate the beta gradients of their AULU site.
"""
import hashlib
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.special import log_softmax

from .activations import ActivationSpec, AdaptiveParams, batch_dx, batch_eval, batch_grad_beta
from .errors import (BackwardBeforeForwardError, NonFiniteGradientError, ParamStoreFormatError,
                     ShapeMismatchError)

Tensor = npt.NDArray[np.float64]

PARAM_FILE_MAGIC = b"ULUK"
PARAM_FILE_VERSION = 1


def as_tensor(values) -> Tensor:
    """Contiguous row-major float64 copy of values"""
    return np.array(values, dtype=np.float64, order="C")


class OpKind(Enum):
    INPUT = "Input"
    PARAM = "Param"
    MATMUL = "MatMul"
    CONV2D = "Conv2d"
    ADD = "Add"
    BIAS_ADD = "BiasAdd"
    ACTIVATION = "Activation"
    MEAN_POOL = "MeanPool"
    FLATTEN = "Flatten"
    SOFTMAX_CROSS_ENTROPY = "SoftmaxCrossEntropy"
    SCALE = "Scale"
    ATTENTION_SCORES = "AttentionScores"
    ATTENTION_APPLY = "AttentionApply"


@dataclass
class Node:
    id: int
    op: OpKind
    parents: Tuple[int, ...]
    value: Tensor
    grad: Optional[Tensor] = None
    saved: Dict[str, object] = field(default_factory=dict)


class ParamStore:
    """
    Named learnable tensors plus the AdaptiveParams of every AULU site.

    Gradients and momentum velocities are kept alongside, keyed by name
    (tensors) or by site index (adaptive pairs).
    """

    def __init__(self):
        self.tensors: Dict[str, Tensor] = {}
        self.grads: Dict[str, Tensor] = {}
        self.velocities: Dict[str, Tensor] = {}
        self.adaptive: List[AdaptiveParams] = []
        self.adaptive_velocities: List[Tuple[float, float]] = []

    def add(self, name: str, value) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"Parameter name {name!r} is already registered")
        tensor = as_tensor(value)
        self.tensors[name] = tensor
        self.grads[name] = np.zeros_like(tensor)
        self.velocities[name] = np.zeros_like(tensor)
        return tensor

    def add_adaptive(self, params: AdaptiveParams) -> AdaptiveParams:
        self.adaptive.append(params)
        self.adaptive_velocities.append((0.0, 0.0))
        return params

    def zero_grad(self):
        for grad in self.grads.values():
            grad.fill(0.0)
        for params in self.adaptive:
            params.zero_grad()

    def num_parameters(self) -> int:
        """Tensor elements plus two per adaptive site"""
        return sum(t.size for t in self.tensors.values()) + 2 * len(self.adaptive)

    def num_tensor_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def fingerprint(self) -> str:
        """sha256 over tensor names, shapes, bytes and adaptive betas"""
        digest = hashlib.sha256()
        for name, tensor in self.tensors.items():
            digest.update(name.encode("utf-8"))
            digest.update(str(tensor.shape).encode("ascii"))
            digest.update(tensor.tobytes())
        for params in self.adaptive:
            digest.update(struct.pack("<dd", params.beta1, params.beta2))
        return digest.hexdigest()

    def save(self, path: Union[str, Path]):
        """
        Write the binary parameter file: magic "ULUK", u32 version, u32 tensor
        count, then per tensor (u32 name length, name, u32 rank, u32 dims,
        little-endian float64 data), then u32 adaptive count and (beta1, beta2)
        pairs.
        """
        chunks = [PARAM_FILE_MAGIC, struct.pack("<II", PARAM_FILE_VERSION, len(self.tensors))]
        for name, tensor in self.tensors.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack(f"<I{tensor.ndim}I", tensor.ndim, *tensor.shape))
            chunks.append(tensor.astype("<f8").tobytes())
        chunks.append(struct.pack("<I", len(self.adaptive)))
        for params in self.adaptive:
            chunks.append(struct.pack("<dd", params.beta1, params.beta2))
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ParamStore":
        blob = Path(path).read_bytes()
        reader = _ByteReader(blob, str(path))

        if reader.take(4) != PARAM_FILE_MAGIC:
            raise ParamStoreFormatError(f"{path}: not a parameter file (magic bytes are not 'ULUK')")
        version, count = reader.unpack("<II")
        if version != PARAM_FILE_VERSION:
            raise ParamStoreFormatError(f"{path}: unsupported version {version}, expected {PARAM_FILE_VERSION}")

        store = cls()
        for _ in range(count):
            (name_len,) = reader.unpack("<I")
            raw_name = reader.take(name_len)
            try:
                name = raw_name.decode("utf-8")
            except UnicodeDecodeError:
                raise ParamStoreFormatError(f"{path}: tensor name {raw_name!r} is not valid UTF-8") from None
            (rank,) = reader.unpack("<I")
            shape = reader.unpack(f"<{rank}I")
            size = math.prod(shape)
            data = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape)
            store.add(name, data)
        (n_adaptive,) = reader.unpack("<I")
        for _ in range(n_adaptive):
            beta1, beta2 = reader.unpack("<dd")
            store.add_adaptive(AdaptiveParams(beta1, beta2))
        return store


class _ByteReader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.source = source
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise ParamStoreFormatError(f"{self.source}: file ends at byte {len(self.blob)}, "
                                        f"needed {self.offset + n}")
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


class Graph:
    """
    Reverse-mode tape. Each recording method returns the id of the new node.

    A graph is single-use and single-threaded: record the forward pass, call
    backward() once, read gradients from the ParamStore.
    """

    def __init__(self, store: ParamStore):
        self.store = store
        self.nodes: List[Node] = []
        self.loss_id: Optional[int] = None
        self._param_names: Dict[int, str] = {}

    def value(self, node_id: int) -> Tensor:
        return self.nodes[node_id].value

    def _record(self, op: OpKind, parents: Tuple[int, ...], value: Tensor, **saved) -> int:
        node = Node(id=len(self.nodes), op=op, parents=parents, value=value, saved=saved)
        self.nodes.append(node)
        return node.id

    def _next_label(self, op: OpKind) -> str:
        return f"{op.value}#{len(self.nodes)}"

    # -- leaves -------------------------------------------------------------

    def input(self, value) -> int:
        return self._record(OpKind.INPUT, (), as_tensor(value))

    def param(self, name: str) -> int:
        if name not in self.store.tensors:
            raise KeyError(f"Parameter {name!r} is not in the store")
        node_id = self._record(OpKind.PARAM, (), self.store.tensors[name])
        self._param_names[node_id] = name
        return node_id

    # -- operations ---------------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        """[..., n] @ [n, m] -> [..., m]; the right operand is a 2-D weight"""
        x, w = self.value(a), self.value(b)
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise ShapeMismatchError(self._next_label(OpKind.MATMUL),
                                     f"cannot multiply {x.shape} by {w.shape}")
        return self._record(OpKind.MATMUL, (a, b), x @ w)

    def conv2d(self, x: int, kernel: int) -> int:
        """
        Stride-1 direct convolution with zero padding that preserves H and W.
        x: [B, C, H, W]; kernel: [O, C, k, k] with odd k.
        """
        inp, k = self.value(x), self.value(kernel)
        label = self._next_label(OpKind.CONV2D)
        if inp.ndim != 4 or k.ndim != 4:
            raise ShapeMismatchError(label, f"expected 4-D input and kernel, got {inp.shape} and {k.shape}")
        if inp.shape[1] != k.shape[1]:
            raise ShapeMismatchError(label, f"input has {inp.shape[1]} channels, kernel expects {k.shape[1]}")
        if k.shape[2] != k.shape[3] or k.shape[2] % 2 == 0:
            raise ShapeMismatchError(label, f"kernel must be square with odd size, got {k.shape[2:]}")

        pad = k.shape[2] // 2
        height, width = inp.shape[2], inp.shape[3]
        padded = np.pad(inp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((inp.shape[0], k.shape[0], height, width))
        for i in range(k.shape[2]):
            for j in range(k.shape[3]):
                window = padded[:, :, i:i + height, j:j + width]
                out += np.einsum("bchw,oc->bohw", window, k[:, :, i, j])
        return self._record(OpKind.CONV2D, (x, kernel), out, padded=padded, pad=pad)

    def add(self, a: int, b: int) -> int:
        x, y = self.value(a), self.value(b)
        if x.shape != y.shape:
            raise ShapeMismatchError(self._next_label(OpKind.ADD), f"cannot add {x.shape} and {y.shape}")
        return self._record(OpKind.ADD, (a, b), x + y)

    def bias_add(self, x: int, bias: int, axis: int = -1) -> int:
        """Broadcast a 1-D bias along `axis` of x"""
        inp, b = self.value(x), self.value(bias)
        axis = axis % inp.ndim
        if b.ndim != 1 or b.shape[0] != inp.shape[axis]:
            raise ShapeMismatchError(self._next_label(OpKind.BIAS_ADD),
                                     f"bias of shape {b.shape} does not match axis {axis} of {inp.shape}")
        shape = [1] * inp.ndim
        shape[axis] = b.shape[0]
        return self._record(OpKind.BIAS_ADD, (x, bias), inp + b.reshape(shape), axis=axis)

    def activation(self, x: int, act: Union[ActivationSpec, AdaptiveParams]) -> int:
        return self._record(OpKind.ACTIVATION, (x,), batch_eval(act, self.value(x)), act=act)

    def mean_pool(self, x: int, axes: Tuple[int, ...]) -> int:
        inp = self.value(x)
        axes = tuple(a % inp.ndim for a in axes)
        return self._record(OpKind.MEAN_POOL, (x,), inp.mean(axis=axes), axes=axes)

    def flatten(self, x: int) -> int:
        inp = self.value(x)
        return self._record(OpKind.FLATTEN, (x,), inp.reshape(inp.shape[0], -1))

    def scale(self, x: int, factor: float) -> int:
        return self._record(OpKind.SCALE, (x,), self.value(x) * factor, factor=factor)

    def attention_scores(self, q: int, k: int) -> int:
        """Row softmax of q @ k^T over the key axis; q, k: [B, P, d]"""
        qv, kv = self.value(q), self.value(k)
        if qv.ndim != 3 or qv.shape != kv.shape:
            raise ShapeMismatchError(self._next_label(OpKind.ATTENTION_SCORES),
                                     f"queries {qv.shape} and keys {kv.shape} must both be [B, P, d]")
        scores = qv @ kv.transpose(0, 2, 1)
        scores = scores - scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        return self._record(OpKind.ATTENTION_SCORES, (q, k), weights)

    def attention_apply(self, weights: int, v: int) -> int:
        """[B, P, P] @ [B, P, d] -> [B, P, d]"""
        a, vv = self.value(weights), self.value(v)
        if a.ndim != 3 or vv.ndim != 3 or a.shape[2] != vv.shape[1] or a.shape[0] != vv.shape[0]:
            raise ShapeMismatchError(self._next_label(OpKind.ATTENTION_APPLY),
                                     f"cannot apply weights {a.shape} to values {vv.shape}")
        return self._record(OpKind.ATTENTION_APPLY, (weights, v), a @ vv)

    def softmax_cross_entropy(self, logits: int, labels) -> int:
        """Mean cross-entropy of integer labels under softmax(logits); records the loss"""
        z = self.value(logits)
        labels = np.asarray(labels, dtype=np.int64)
        label = self._next_label(OpKind.SOFTMAX_CROSS_ENTROPY)
        if z.ndim != 2 or labels.shape != (z.shape[0],):
            raise ShapeMismatchError(label, f"logits {z.shape} and labels {labels.shape} disagree")
        if z.shape[0] == 0:
            raise ShapeMismatchError(label, "cannot average a loss over an empty batch")
        if labels.min() < 0 or labels.max() >= z.shape[1]:
            raise ShapeMismatchError(label, f"labels must lie in [0, {z.shape[1]})")

        log_probs = log_softmax(z, axis=1)
        batch = np.arange(z.shape[0])
        loss = -log_probs[batch, labels].mean()
        node_id = self._record(OpKind.SOFTMAX_CROSS_ENTROPY, (logits,), np.asarray(loss),
                               probs=np.exp(log_probs), labels=labels)
        self.loss_id = node_id
        return node_id

    # -- backward -----------------------------------------------------------

    def backward(self):
        """
        Propagate d(loss)/d(node) to every node, accumulate parameter
        gradients into the store and beta gradients into AdaptiveParams.
        """
        if self.loss_id is None:
            raise BackwardBeforeForwardError("backward() called before a forward pass recorded a loss")

        for node in self.nodes:
            node.grad = None
        self.nodes[self.loss_id].grad = np.ones_like(self.nodes[self.loss_id].value)

        for node in reversed(self.nodes[:self.loss_id + 1]):
            if node.grad is None:
                continue
            parent_grads = _BACKWARD[node.op](self, node)
            for parent_id, grad in zip(node.parents, parent_grads):
                if grad is None:
                    continue
                parent = self.nodes[parent_id]
                parent.grad = grad if parent.grad is None else parent.grad + grad

        for node_id, name in self._param_names.items():
            grad = self.nodes[node_id].grad
            if grad is not None:
                self.store.grads[name] += grad

        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)


def _leaf_backward(graph: Graph, node: Node):
    return ()


def _matmul_backward(graph: Graph, node: Node):
    x, w = (graph.value(p) for p in node.parents)
    g = node.grad
    grad_x = g @ w.T
    grad_w = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return grad_x, grad_w


def _conv2d_backward(graph: Graph, node: Node):
    k = graph.value(node.parents[1])
    padded, pad = node.saved["padded"], node.saved["pad"]
    g = node.grad
    height, width = g.shape[2], g.shape[3]

    grad_padded = np.zeros_like(padded)
    grad_k = np.zeros_like(k)
    for i in range(k.shape[2]):
        for j in range(k.shape[3]):
            window = padded[:, :, i:i + height, j:j + width]
            grad_padded[:, :, i:i + height, j:j + width] += np.einsum("bohw,oc->bchw", g, k[:, :, i, j])
            grad_k[:, :, i, j] = np.einsum("bohw,bchw->oc", g, window)
    grad_x = grad_padded[:, :, pad:pad + height, pad:pad + width]
    return grad_x, grad_k


def _add_backward(graph: Graph, node: Node):
    return node.grad, node.grad


def _bias_add_backward(graph: Graph, node: Node):
    axis = node.saved["axis"]
    other = tuple(a for a in range(node.grad.ndim) if a != axis)
    return node.grad, node.grad.sum(axis=other)


def _activation_backward(graph: Graph, node: Node):
    act = node.saved["act"]
    x = graph.value(node.parents[0])
    g = node.grad
    if isinstance(act, AdaptiveParams):
        g1, g2 = batch_grad_beta(act, x)
        act.grad_beta1 += float(np.sum(g * g1))
        act.grad_beta2 += float(np.sum(g * g2))
    return (g * batch_dx(act, x),)


def _mean_pool_backward(graph: Graph, node: Node):
    x = graph.value(node.parents[0])
    axes = node.saved["axes"]
    count = math.prod(x.shape[a] for a in axes)
    g = np.expand_dims(node.grad, axes)
    return (np.broadcast_to(g / count, x.shape).copy(),)


def _flatten_backward(graph: Graph, node: Node):
    return (node.grad.reshape(graph.value(node.parents[0]).shape),)


def _scale_backward(graph: Graph, node: Node):
    return (node.grad * node.saved["factor"],)


def _attention_scores_backward(graph: Graph, node: Node):
    q, k = (graph.value(p) for p in node.parents)
    a, g = node.value, node.grad
    grad_scores = a * (g - np.sum(g * a, axis=-1, keepdims=True))
    return grad_scores @ k, grad_scores.transpose(0, 2, 1) @ q


def _attention_apply_backward(graph: Graph, node: Node):
    a, v = (graph.value(p) for p in node.parents)
    g = node.grad
    return g @ v.transpose(0, 2, 1), a.transpose(0, 2, 1) @ g


def _softmax_cross_entropy_backward(graph: Graph, node: Node):
    probs, labels = node.saved["probs"], node.saved["labels"]
    grad = probs.copy()
    grad[np.arange(labels.shape[0]), labels] -= 1.0
    return (grad * (node.grad / labels.shape[0]),)


_BACKWARD = {
    OpKind.INPUT: _leaf_backward,
    OpKind.PARAM: _leaf_backward,
    OpKind.MATMUL: _matmul_backward,
    OpKind.CONV2D: _conv2d_backward,
    OpKind.ADD: _add_backward,
    OpKind.BIAS_ADD: _bias_add_backward,
    OpKind.ACTIVATION: _activation_backward,
    OpKind.MEAN_POOL: _mean_pool_backward,
    OpKind.FLATTEN: _flatten_backward,
    OpKind.SCALE: _scale_backward,
    OpKind.ATTENTION_SCORES: _attention_scores_backward,
    OpKind.ATTENTION_APPLY: _attention_apply_backward,
    OpKind.SOFTMAX_CROSS_ENTROPY: _softmax_cross_entropy_backward,
}


def sgd_step(params: ParamStore, lr: float, momentum: float, weight_decay: float):
    """
    One SGD step with momentum and decoupled-from-beta weight decay

    v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
    AULU betas follow the same recurrence without weight decay; frozen pairs
    are left untouched.

    Args:
        params: Store with populated gradients
        lr: Learning rate for this step
        momentum: Velocity decay in [0, 1)
        weight_decay: L2 coefficient applied to tensors only
    """
    for name, grad in params.grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f"Gradient of {name!r} contains NaN or infinity; step aborted")
    for site, adaptive in enumerate(params.adaptive):
        if not (math.isfinite(adaptive.grad_beta1) and math.isfinite(adaptive.grad_beta2)):
            raise NonFiniteGradientError(f"Beta gradient of adaptive site {site} is not finite; step aborted")

    for name, tensor in params.tensors.items():
        velocity = params.velocities[name]
        velocity *= momentum
        velocity += params.grads[name] + weight_decay * tensor
        tensor -= lr * velocity

    for site, adaptive in enumerate(params.adaptive):
        if adaptive.frozen:
            continue
        v1, v2 = params.adaptive_velocities[site]
        v1 = momentum * v1 + adaptive.grad_beta1
        v2 = momentum * v2 + adaptive.grad_beta2
        params.adaptive_velocities[site] = (v1, v2)
        adaptive.beta1 -= lr * v1
        adaptive.beta2 -= lr * v2


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """
    Linear warmup over the first ceil(10%) of steps, then constant:
    base_lr * min(1, (step + 1) / ceil(0.1 * total_steps))
    """
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    warmup = max(1, math.ceil(0.1 * total_steps))
    return base_lr * min(1.0, (step + 1) / warmup)
