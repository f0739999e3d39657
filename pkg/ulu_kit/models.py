import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .activations import Activation, ActivationKind, ActivationSpec, AdaptiveParams
from .autodiff import Graph, ParamStore, Tensor
from .errors import BackwardBeforeForwardError, InvalidSpecError, ShapeMismatchError

logger = logging.getLogger(__name__)


class Architecture(Enum):
    MLP = "mlp"
    SMALL_CNN = "cnn"
    MINI_ATTENTION = "attn"


def _default_activation() -> ActivationSpec:
    return ActivationSpec.ulu(0.3, 0.8)


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture and activation of a desk-scale classifier.

    hidden_sizes applies to the MLP, channel_widths to the CNN, and
    embed_dim/patch_size to the attention model. An AULU activation makes
    every site adaptive: one beta pair per site, or one shared pair when
    share_betas is set. freeze_betas with a ULU activation builds frozen AULU
    sites that carry the ULU coefficients exactly.
    """
    arch: Architecture = Architecture.SMALL_CNN
    activation: ActivationSpec = field(default_factory=_default_activation)
    hidden_sizes: Tuple[int, ...] = (32,)
    channel_widths: Tuple[int, ...] = (8, 16)
    embed_dim: int = 16
    patch_size: int = 4
    num_classes: int = 10
    input_shape: Tuple[int, int] = (28, 28)
    share_betas: bool = False
    freeze_betas: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "channel_widths", tuple(int(c) for c in self.channel_widths))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))

        sizes = {
            Architecture.MLP: self.hidden_sizes,
            Architecture.SMALL_CNN: self.channel_widths,
            Architecture.MINI_ATTENTION: (self.embed_dim, self.patch_size),
        }[self.arch]
        if not sizes:
            raise InvalidSpecError(f"{self.arch.value} needs at least one activation site")
        if min(sizes) < 1 or self.num_classes < 1:
            raise InvalidSpecError(f"All layer sizes and num_classes must be >= 1, got {sizes}, {self.num_classes}")
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise InvalidSpecError(f"input_shape must be two positive dims, got {self.input_shape}")
        if self.arch is Architecture.MINI_ATTENTION:
            height, width = self.input_shape
            if height % self.patch_size or width % self.patch_size:
                raise InvalidSpecError(
                    f"Patch size {self.patch_size} does not divide input shape {self.input_shape}"
                )

    @property
    def activation_sites(self) -> int:
        if self.arch is Architecture.MLP:
            return len(self.hidden_sizes)
        if self.arch is Architecture.SMALL_CNN:
            return len(self.channel_widths)
        return 1

    @property
    def has_adaptive_sites(self) -> bool:
        return self.activation.is_adaptive or (self.freeze_betas and self.activation.kind is ActivationKind.ULU)

    def to_dict(self) -> Dict:
        return {
            "arch": self.arch.value,
            "activation": str(self.activation),
            "hidden_sizes": list(self.hidden_sizes),
            "channel_widths": list(self.channel_widths),
            "embed_dim": self.embed_dim,
            "patch_size": self.patch_size,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "share_betas": self.share_betas,
            "freeze_betas": self.freeze_betas,
        }


def kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def to_patches(images: Tensor, patch_size: int) -> Tensor:
    """[B, H, W] -> [B, (H/p)*(W/p), p*p], patches in row-major order"""
    batch, height, width = images.shape
    rows, cols = height // patch_size, width // patch_size
    patches = images.reshape(batch, rows, patch_size, cols, patch_size).transpose(0, 1, 3, 2, 4)
    return patches.reshape(batch, rows * cols, patch_size * patch_size)


class Model:
    """
    A built classifier: configuration, parameters and the activation bound to
    each site. forward() records a fresh Graph; backward() runs it.
    """

    def __init__(self, config: ModelConfig, store: ParamStore, activations: List[Activation]):
        self.config = config
        self.store = store
        self.activations = activations
        self.graph: Optional[Graph] = None
        self.last_logits: Optional[Tensor] = None

    @property
    def parameter_count(self) -> int:
        return self.store.num_tensor_parameters()

    def _check_input(self, images: Tensor):
        expected = self.config.input_shape
        if images.ndim != 3 or tuple(images.shape[1:]) != expected:
            raise ShapeMismatchError("Input#0", f"expected images of shape [B, {expected[0]}, {expected[1]}], "
                                                f"got {images.shape}")

    def _logits(self, graph: Graph, images: Tensor) -> int:
        self._check_input(images)
        if self.config.arch is Architecture.MLP:
            return mlp_forward(graph, self, images)
        if self.config.arch is Architecture.SMALL_CNN:
            return small_cnn_forward(graph, self, images)
        return mini_attention_forward(graph, self, to_patches(images, self.config.patch_size))

    def predict_logits(self, images) -> Tensor:
        graph = Graph(self.store)
        return graph.value(self._logits(graph, np.asarray(images, dtype=np.float64)))

    def forward(self, images, labels) -> float:
        graph = Graph(self.store)
        logits = self._logits(graph, np.asarray(images, dtype=np.float64))
        loss = graph.softmax_cross_entropy(logits, labels)
        self.graph = graph
        self.last_logits = graph.value(logits)
        return float(graph.value(loss))

    def backward(self):
        """Zero all gradients, then fill them from the last forward pass"""
        if self.graph is None:
            raise BackwardBeforeForwardError("Model.backward() called before Model.forward()")
        self.store.zero_grad()
        self.graph.backward()


def mlp_forward(graph: Graph, model: Model, images: Tensor) -> int:
    h = graph.flatten(graph.input(images))
    layers = len(model.config.hidden_sizes) + 1
    for i in range(layers):
        h = graph.matmul(h, graph.param(f"fc{i}.weight"))
        h = graph.bias_add(h, graph.param(f"fc{i}.bias"))
        if i < layers - 1:
            h = graph.activation(h, model.activations[i])
    return h


def small_cnn_forward(graph: Graph, model: Model, images: Tensor) -> int:
    h = graph.input(images[:, None, :, :])
    for i in range(len(model.config.channel_widths)):
        h = graph.conv2d(h, graph.param(f"conv{i}.weight"))
        h = graph.bias_add(h, graph.param(f"conv{i}.bias"), axis=1)
        h = graph.activation(h, model.activations[i])
    h = graph.mean_pool(h, axes=(2, 3))
    h = graph.matmul(h, graph.param("head.weight"))
    return graph.bias_add(h, graph.param("head.bias"))


def mini_attention_forward(graph: Graph, model: Model, patches: Tensor) -> int:
    """
    Single-head attention patch classifier.

    embed -> scaled dot-product self-attention with a residual connection ->
    dense + activation -> mean over patches -> linear head.

    Args:
        graph: Tape to record into
        model: Model whose store holds the attention parameters
        patches: [B, P, patch_size**2] flattened patches

    Returns:
        Node id of the [B, num_classes] logits
    """
    scale = 1.0 / math.sqrt(model.config.embed_dim)

    embedded = graph.matmul(graph.input(patches), graph.param("embed.weight"))
    embedded = graph.bias_add(embedded, graph.param("embed.bias"))

    queries = graph.scale(graph.matmul(embedded, graph.param("attn.query")), scale)
    keys = graph.matmul(embedded, graph.param("attn.key"))
    values = graph.matmul(embedded, graph.param("attn.value"))
    weights = graph.attention_scores(queries, keys)
    attended = graph.add(embedded, graph.attention_apply(weights, values))

    h = graph.matmul(attended, graph.param("ff.weight"))
    h = graph.bias_add(h, graph.param("ff.bias"))
    h = graph.activation(h, model.activations[0])
    h = graph.mean_pool(h, axes=(1,))
    h = graph.matmul(h, graph.param("head.weight"))
    return graph.bias_add(h, graph.param("head.bias"))


def _init_mlp(store: ParamStore, config: ModelConfig, rng: np.random.Generator):
    sizes = [config.input_shape[0] * config.input_shape[1], *config.hidden_sizes, config.num_classes]
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.add(f"fc{i}.weight", kaiming_uniform(rng, (fan_in, fan_out), fan_in))
        store.add(f"fc{i}.bias", np.zeros(fan_out))


def _init_small_cnn(store: ParamStore, config: ModelConfig, rng: np.random.Generator):
    in_channels = 1
    for i, out_channels in enumerate(config.channel_widths):
        fan_in = in_channels * 9
        store.add(f"conv{i}.weight", kaiming_uniform(rng, (out_channels, in_channels, 3, 3), fan_in))
        store.add(f"conv{i}.bias", np.zeros(out_channels))
        in_channels = out_channels
    store.add("head.weight", kaiming_uniform(rng, (in_channels, config.num_classes), in_channels))
    store.add("head.bias", np.zeros(config.num_classes))


def _init_mini_attention(store: ParamStore, config: ModelConfig, rng: np.random.Generator):
    patch_dim = config.patch_size * config.patch_size
    d = config.embed_dim
    store.add("embed.weight", kaiming_uniform(rng, (patch_dim, d), patch_dim))
    store.add("embed.bias", np.zeros(d))
    for name in ("attn.query", "attn.key", "attn.value", "ff.weight"):
        store.add(name, kaiming_uniform(rng, (d, d), d))
    store.add("ff.bias", np.zeros(d))
    store.add("head.weight", kaiming_uniform(rng, (d, config.num_classes), d))
    store.add("head.bias", np.zeros(config.num_classes))


_INITIALIZERS = {
    Architecture.MLP: _init_mlp,
    Architecture.SMALL_CNN: _init_small_cnn,
    Architecture.MINI_ATTENTION: _init_mini_attention,
}


def _initial_site_params(config: ModelConfig) -> AdaptiveParams:
    if config.activation.is_adaptive:
        return config.activation.initial_adaptive_params(config.freeze_betas)
    return AdaptiveParams.from_coefficients(*config.activation.params, frozen=True)


def build(config: ModelConfig, seed: int) -> Model:
    """
    Create a model with deterministic Kaiming-uniform weights and zero biases

    Args:
        config: Architecture, sizes and activation
        seed: Seed of the PCG64 generator drawing the initial weights

    Returns:
        The built Model; its ParamStore holds one AdaptiveParams per activation
        site (or a single shared one) when config.has_adaptive_sites
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    _INITIALIZERS[config.arch](store, config, rng)

    sites = config.activation_sites
    activations: List[Activation]
    if config.has_adaptive_sites:
        if config.share_betas:
            shared = store.add_adaptive(_initial_site_params(config))
            activations = [shared] * sites
        else:
            activations = [store.add_adaptive(_initial_site_params(config)) for _ in range(sites)]
    else:
        activations = [config.activation] * sites

    logger.debug("Built %s with %d parameters and %d adaptive pair(s)",
                 config.arch.value, store.num_tensor_parameters(), len(store.adaptive))
    return Model(config, store, activations)
