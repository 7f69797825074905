"""Fully connected classifier: layer specs, initialisation, forward pass, loss.

Weights are stored input-major, ``W.shape == (in_dim, out_dim)``, so the
forward pass of a layer is ``act(x @ W + b)``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .errors import ConfigError, DataFormatError, ShapeError

FULLY_CONNECTED = "fully_connected"
DROPOUT = "dropout"
ACTIVATIONS = ("relu", "tanh", "sigmoid", "none")


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    in_dim: int = 0
    out_dim: int = 0
    activation: str = "none"
    drop_prob: float = 0.0
    prunable: bool = True

    def __post_init__(self):
        if self.kind == FULLY_CONNECTED:
            if self.in_dim <= 0 or self.out_dim <= 0:
                raise ConfigError(
                    f"layer {self.name!r}: dimensions must be positive, "
                    f"got {self.in_dim}x{self.out_dim}"
                )
            if self.activation not in ACTIVATIONS:
                raise ConfigError(
                    f"layer {self.name!r}: unknown activation {self.activation!r}"
                )
        elif self.kind == DROPOUT:
            if not 0.0 <= self.drop_prob < 1.0:
                raise ConfigError(
                    f"layer {self.name!r}: drop_prob must lie in [0, 1), got {self.drop_prob}"
                )
            self.prunable = False
        else:
            raise ConfigError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "scaled_gaussian"
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("gaussian", "scaled_gaussian"):
            raise ConfigError(f"unknown init scheme {self.scheme!r}")
        if not self.scale > 0:
            raise ConfigError(f"init std/scale must be positive, got {self.scale}")

    def std_for(self, in_dim: int) -> float:
        if self.scheme == "gaussian":
            return self.scale
        return self.scale / math.sqrt(in_dim)


def mlp_layers(
    sizes: list[int],
    activation: str = "relu",
    dropout: float = 0.0,
) -> list[LayerSpec]:
    """Build the layer list for a plain MLP, e.g. ``[784, 128, 64, 10]``.

    Hidden layers get ``activation`` (and a dropout layer after them when
    ``dropout > 0``); the output layer emits raw logits.
    """
    if len(sizes) < 2:
        raise ConfigError("an MLP needs at least an input and an output size")
    layers = []
    n_fc = len(sizes) - 1
    for i in range(n_fc):
        last = i == n_fc - 1
        layers.append(
            LayerSpec(
                FULLY_CONNECTED,
                name=f"fc{i + 1}",
                in_dim=sizes[i],
                out_dim=sizes[i + 1],
                activation="none" if last else activation,
            )
        )
        if dropout > 0 and not last:
            layers.append(LayerSpec(DROPOUT, name=f"drop{i + 1}", drop_prob=dropout))
    return layers


class Network:
    """Ordered layers, their parameters and optional pruning masks.

    ``weights`` and ``biases`` map layer name to a leaf :class:`Tensor`;
    ``masks`` maps layer name to a :class:`~dsd.pruning.PruneMask` while a
    sparse phase is active.
    """

    def __init__(self, layers: list[LayerSpec]):
        if not layers:
            raise ConfigError("network has no layers")
        names = set()
        prev_out = None
        for i, layer in enumerate(layers):
            if not layer.name:
                layer.name = f"layer{i}"
            if layer.name in names:
                raise ConfigError(f"duplicate layer name {layer.name!r}")
            names.add(layer.name)
            if layer.kind == FULLY_CONNECTED:
                if prev_out is not None and layer.in_dim != prev_out:
                    raise ConfigError(
                        f"layer {layer.name!r} expects {layer.in_dim} inputs "
                        f"but the previous layer emits {prev_out}"
                    )
                prev_out = layer.out_dim
        if prev_out is None:
            raise ConfigError("network has no fully connected layer")
        self.layers = list(layers)
        self.weights: dict[str, Tensor] = {}
        self.biases: dict[str, Tensor] = {}
        self.masks: dict = {}
        for layer in self.fc_layers:
            self.weights[layer.name] = Tensor(
                np.zeros((layer.in_dim, layer.out_dim)), requires_grad=True, name=f"{layer.name}.W"
            )
            self.biases[layer.name] = Tensor(
                np.zeros(layer.out_dim), requires_grad=True, name=f"{layer.name}.b"
            )

    @property
    def fc_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == FULLY_CONNECTED]

    @property
    def in_dim(self) -> int:
        return self.fc_layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.fc_layers[-1].out_dim

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def parameters(self) -> list[tuple[str, Tensor]]:
        """(key, tensor) pairs in a fixed order: W then b for each layer."""
        out = []
        for layer in self.fc_layers:
            out.append((f"{layer.name}.W", self.weights[layer.name]))
            out.append((f"{layer.name}.b", self.biases[layer.name]))
        return out

    def clone(self) -> "Network":
        other = Network(copy.deepcopy(self.layers))
        for name in self.weights:
            other.weights[name].data = self.weights[name].data.copy()
            other.biases[name].data = self.biases[name].data.copy()
        other.masks = {k: copy.deepcopy(v) for k, v in self.masks.items()}
        return other

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.parameters()}

    def __repr__(self):
        dims = [self.in_dim] + [l.out_dim for l in self.fc_layers]
        return f"Network({'-'.join(map(str, dims))}, masks={sorted(self.masks)})"


def init(network: Network, spec: InitSpec) -> Network:
    """Draw every weight i.i.d. from N(0, std^2) and zero every bias.

    Layers are filled in order from one generator seeded by ``spec.seed``,
    so the result is bit-identical for a given seed.
    """
    rng = np.random.default_rng(spec.seed)
    for layer in network.fc_layers:
        std = spec.std_for(layer.in_dim)
        network.weights[layer.name].data = rng.normal(
            0.0, std, size=(layer.in_dim, layer.out_dim)
        )
        network.biases[layer.name].data = np.zeros(layer.out_dim)
    network.masks = {}
    return network


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "none":
        return x
    return ad.elementwise(activation, x)


def forward(
    network: Network,
    batch,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits for a batch of shape (n, in_dim).

    In ``train`` mode dropout layers zero activations with probability p and
    scale survivors by 1/(1-p); ``rng`` supplies the drop pattern.  In
    ``eval`` mode dropout is the identity.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor._wrap(np.asarray(batch, dtype=np.float64))
    if x.data.ndim != 2 or x.shape[1] != network.in_dim:
        raise ShapeError(
            f"batch of shape {x.shape} does not match network input dim {network.in_dim}"
        )
    for layer in network.layers:
        if layer.kind == FULLY_CONNECTED:
            x = ad.matmul(x, network.weights[layer.name])
            x = ad.add_bias(x, network.biases[layer.name])
            x = _activate(x, layer.activation)
        elif mode == "train" and layer.drop_prob > 0:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            keep = 1.0 - layer.drop_prob
            scale = (rng.random(x.shape) < keep) / keep
            x = ad.mul(x, Tensor._wrap(scale))
    return x


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy; thin alias over the fused autodiff op."""
    return ad.softmax_cross_entropy(logits, labels)


def predict(network: Network, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(forward(network, features, "eval").data, axis=1)


def error_rate(network: Network, dataset) -> float:
    """Fraction of examples whose argmax prediction differs from the label."""
    if len(dataset) == 0:
        raise DataFormatError("error_rate on an empty dataset")
    pred = predict(network, dataset.features)
    return float(np.count_nonzero(pred != dataset.labels)) / len(dataset)


def evaluate(network: Network, dataset, chunk: int = 4096) -> tuple[float, float]:
    """(mean cross-entropy, error rate) over a dataset, eval mode."""
    if len(dataset) == 0:
        raise DataFormatError("evaluate on an empty dataset")
    total_loss = 0.0
    wrong = 0
    n = len(dataset)
    for lo in range(0, n, chunk):
        xb = dataset.features[lo : lo + chunk]
        yb = dataset.labels[lo : lo + chunk]
        logits = forward(network, xb, "eval")
        total_loss += ad.softmax_cross_entropy(logits, yb).item() * len(yb)
        wrong += int(np.count_nonzero(np.argmax(logits.data, axis=1) != yb))
    return total_loss / n, wrong / n


def loss_and_grads(network: Network, xb, yb, rng=None, mode="train"):
    """One traced forward/backward pass; returns (loss, {param key: grad})."""
    with GradTape() as tape:
        loss = ad.softmax_cross_entropy(forward(network, xb, mode, rng), yb)
    by_tensor = tape.backward(loss)
    grads = {key: by_tensor[t] for key, t in network.parameters() if t in by_tensor}
    return loss.item(), grads
