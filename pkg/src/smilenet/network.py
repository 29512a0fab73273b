"""The convolutional smile classifier: configuration, construction and passes.

Layer plan::

    [conv 5x5 / 32 maps -> ReLU -> 2x2 max pool] x num_convolutions
    -> flatten
    -> [dense(units) -> ReLU -> dropout] x num_hidden_layers
    -> dense(2) -> softmax
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .errors import ConfigError, ShapeError
from .nnops import ConvParams, DenseParams

TRAIN = "train"
INFER = "infer"


@dataclass(frozen=True)
class ArchitectureConfig:
    num_convolutions: int = 1
    num_hidden_layers: int = 1
    units_per_hidden_layer: int = 100
    dropout_rate: float = 0.5
    input_height: int = 69
    input_width: int = 85
    kernel_size: int = 5
    feature_maps: int = 32
    pool_size: int = 2
    num_classes: int = 2

    def __post_init__(self):
        for name in ("num_convolutions", "num_hidden_layers", "units_per_hidden_layer",
                     "input_height", "input_width", "kernel_size", "feature_maps", "num_classes"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.pool_size != 2:
            raise ConfigError(f"only 2x2 pooling is supported, got pool_size={self.pool_size}")
        if not 0.0 <= float(self.dropout_rate) < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate!r}")

    def replace(self, **changes) -> "ArchitectureConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        return dataclasses.asdict(self)


def shape_chain(config: ArchitectureConfig):
    """Spatial sizes through the conv stages and the flattened feature length.

    Returns ``(stages, flat)`` where ``stages`` is a list of
    ``((h, w) in, (h, w) after conv, (h, w) after pool)`` per stage.
    Raises ConfigError naming the stage whose input is smaller than the kernel.
    """
    h, w = config.input_height, config.input_width
    k = config.kernel_size
    stages = []
    for i in range(config.num_convolutions):
        if h < k or w < k:
            raise ConfigError(
                f"convolution stage {i + 1} receives {h}x{w} input, smaller than the {k}x{k} kernel"
            )
        ch, cw = h - k + 1, w - k + 1
        if ch < 2 or cw < 2:
            raise ConfigError(f"pooling in stage {i + 1} receives {ch}x{cw} input, smaller than 2x2")
        ph, pw = ch // 2, cw // 2
        stages.append(((h, w), (ch, cw), (ph, pw)))
        h, w = ph, pw
    return stages, h * w * config.feature_maps


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ForwardCache:
    """Intermediate values kept by a forward pass for the matching backward pass."""

    conv_inputs: list = field(default_factory=list)
    conv_pre: list = field(default_factory=list)
    pool_index: list = field(default_factory=list)
    flat_shape: tuple = ()
    dense_inputs: list = field(default_factory=list)
    dense_pre: list = field(default_factory=list)
    dropout_masks: list = field(default_factory=list)
    output_input: np.ndarray | None = None
    probs: np.ndarray | None = None


class Network:
    """Parameters plus the forward/backward passes of one architecture."""

    def __init__(self, config: ArchitectureConfig, convs, hiddens, output):
        self.config = config
        self.convs = list(convs)
        self.hiddens = list(hiddens)
        self.output = output

    def layers(self):
        """(name, params) pairs in build order."""
        named = [(f"conv{i}", p) for i, p in enumerate(self.convs)]
        named += [(f"hidden{i}", p) for i, p in enumerate(self.hiddens)]
        named.append(("output", self.output))
        return named

    def named_parameters(self):
        """Flat (name, array) list in build order; arrays are live views."""
        out = []
        for name, p in self.layers():
            if isinstance(p, ConvParams):
                out += [(f"{name}.kernels", p.kernels), (f"{name}.bias", p.bias)]
            else:
                out += [(f"{name}.weights", p.weights), (f"{name}.bias", p.bias)]
        return out

    def parameters(self):
        return [a for _, a in self.named_parameters()]

    def parameter_count(self):
        return sum(a.size for a in self.parameters())

    def copy(self):
        return Network(
            self.config,
            [ConvParams(p.kernels.copy(), p.bias.copy()) for p in self.convs],
            [DenseParams(p.weights.copy(), p.bias.copy()) for p in self.hiddens],
            DenseParams(self.output.weights.copy(), self.output.bias.copy()),
        )

    def _check_batch(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 3:
            batch = batch[:, None]
        cfg = self.config
        if batch.ndim != 4 or batch.shape[1:] != (1, cfg.input_height, cfg.input_width):
            raise ShapeError(
                f"batch must be (B, 1, {cfg.input_height}, {cfg.input_width}), got {batch.shape}"
            )
        return batch

    def forward(self, batch, mode=INFER, rng=None):
        """Class probabilities ``(B, 2)`` and the cache for :meth:`backward`.

        Dropout is active only when ``mode == "train"``; it then draws from ``rng``.
        """
        if mode not in (TRAIN, INFER):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = self._check_batch(batch)
        cache = ForwardCache()
        for p in self.convs:
            cache.conv_inputs.append(x)
            pre = nnops.conv2d_valid(x, p)
            cache.conv_pre.append(pre)
            x, idx = nnops.maxpool2x2_forward(nnops.relu(pre))
            cache.pool_index.append(idx)
        cache.flat_shape = x.shape
        x = x.reshape(x.shape[0], -1)
        rate = float(self.config.dropout_rate)
        for p in self.hiddens:
            cache.dense_inputs.append(x)
            pre = nnops.dense_forward(x, p)
            cache.dense_pre.append(pre)
            x = nnops.relu(pre)
            if mode == TRAIN and rate > 0.0:
                if rng is None:
                    raise ValueError("train-mode forward with dropout needs an rng")
                x, mask = nnops.dropout_forward(x, rate, rng)
            else:
                mask = None
            cache.dropout_masks.append(mask)
        cache.output_input = x
        probs = nnops.softmax(nnops.dense_forward(x, self.output))
        cache.probs = probs
        return probs, cache

    def backward(self, cache: ForwardCache, labels):
        """Gradients of the batch-mean cross-entropy, same layout as :meth:`parameters`."""
        probs = cache.probs
        labels = np.asarray(labels)
        if labels.shape != (probs.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} != ({probs.shape[0]},)")
        g = nnops.cross_entropy_logit_grad(probs, labels) / probs.shape[0]

        g, out_grad = nnops.dense_backward(cache.output_input, self.output, g)
        hidden_grads = []
        for i in reversed(range(len(self.hiddens))):
            if cache.dropout_masks[i] is not None:
                g = nnops.dropout_backward(g, cache.dropout_masks[i])
            g = nnops.relu_backward(cache.dense_pre[i], g)
            g, pg = nnops.dense_backward(cache.dense_inputs[i], self.hiddens[i], g)
            hidden_grads.append(pg)
        hidden_grads.reverse()

        g = g.reshape(cache.flat_shape)
        conv_grads = []
        for i in reversed(range(len(self.convs))):
            g = nnops.maxpool2x2_backward(g, cache.pool_index[i])
            g = nnops.relu_backward(cache.conv_pre[i], g)
            if i == 0:
                # the input gradient of the first stage is never used
                pg = _conv_param_grads(cache.conv_inputs[0], self.convs[0], g)
            else:
                g, pg = nnops.conv2d_backward(cache.conv_inputs[i], self.convs[i], g)
            conv_grads.append(pg)
        conv_grads.reverse()

        grads = []
        for pg in conv_grads:
            grads += [pg.kernels, pg.bias]
        for pg in hidden_grads + [out_grad]:
            grads += [pg.weights, pg.bias]
        return grads

    def predict_proba(self, batch):
        return self.forward(batch, INFER)[0]

    def predict(self, batch):
        return probs_to_labels(self.predict_proba(batch))

    def loss(self, batch, labels):
        """Mean cross-entropy in inference mode."""
        return float(np.mean(nnops.cross_entropy(self.predict_proba(batch), labels)))


def _conv_param_grads(x, p, grad_out):
    windows = np.lib.stride_tricks.sliding_window_view(x, (p.k, p.k), axis=(2, 3))
    grad_k = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))
    return ConvParams(grad_k, grad_out.sum(axis=(0, 2, 3)))


def probs_to_labels(probs):
    """Argmax per row; exact ties resolve to class 0."""
    return np.argmax(np.asarray(probs), axis=-1).astype(np.int64)


def build(config: ArchitectureConfig, seed=0) -> Network:
    """Create a network with Glorot-uniform weights and zero biases."""
    _, flat = shape_chain(config)
    rng = np.random.default_rng(seed)
    k, maps = config.kernel_size, config.feature_maps
    convs = []
    in_maps = 1
    for _ in range(config.num_convolutions):
        shape = (maps, in_maps, k, k)
        kernels = _glorot(rng, shape, in_maps * k * k, maps * k * k)
        convs.append(ConvParams(kernels, np.zeros(maps)))
        in_maps = maps
    hiddens = []
    n_in = flat
    for _ in range(config.num_hidden_layers):
        units = config.units_per_hidden_layer
        hiddens.append(DenseParams(_glorot(rng, (units, n_in), n_in, units), np.zeros(units)))
        n_in = units
    c = config.num_classes
    output = DenseParams(_glorot(rng, (c, n_in), n_in, c), np.zeros(c))
    return Network(config, convs, hiddens, output)
