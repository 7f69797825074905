"""Magnitude pruning: per-layer top-k masks, mask enforcement and the
loss-increase diagnostics that justify ranking weights by ``|w|``.

A layer with N weights pruned at sparsity s keeps exactly
``k = N - floor(N * s)`` weights: the k largest by magnitude, with ties
resolved in favour of the lower row-major index.  The threshold reported
alongside the mask is the k-th largest magnitude, which is itself kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import spearmanr

from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .network import evaluate


def pruned_count(n: int, sparsity: float) -> int:
    """``floor(n * sparsity)`` evaluated on the decimal value of ``sparsity``.

    Binary rounding makes e.g. ``90 * 0.7`` come out as 62.99999..., which a
    plain float floor would turn into 62.
    """
    return math.floor(n * Fraction(repr(float(sparsity))))


def _check_sparsity(sparsity: float) -> None:
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity must lie in [0, 1), got {sparsity}")


@dataclass
class PruneMask:
    bits: np.ndarray
    kept_count: int
    layer_name: str = ""

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if int(self.bits.sum()) != self.kept_count:
            raise ContractError(
                f"mask for {self.layer_name!r}: {int(self.bits.sum())} bits set "
                f"but kept_count={self.kept_count}"
            )

    @property
    def shape(self):
        return self.bits.shape

    @property
    def pruned_count(self) -> int:
        return self.bits.size - self.kept_count

    def __eq__(self, other):
        return (
            isinstance(other, PruneMask)
            and self.kept_count == other.kept_count
            and self.layer_name == other.layer_name
            and np.array_equal(self.bits, other.bits)
        )


@dataclass(frozen=True)
class SparsitySpec:
    sparsity: float
    excluded_layers: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        _check_sparsity(self.sparsity)


def taylor_delta(w) -> np.ndarray:
    """Pruning score of each weight: ``|w|``.

    Near a minimum the first-order term of the loss change vanishes and the
    second-order term grows with ``w**2``; the magnitude is the cheap proxy.
    Lower scores are pruned first.
    """
    return np.abs(np.asarray(w, dtype=np.float64))


def pruning_order(w) -> np.ndarray:
    """Flat indices sorted in the order they would be pruned."""
    score = taylor_delta(w).reshape(-1)
    # descending magnitude with lower index first on ties, then reversed
    keep_order = np.argsort(-score, kind="stable")
    return keep_order[::-1]


def threshold(weights, sparsity: float, layer_name: str = "") -> tuple[float, PruneMask]:
    """Magnitude threshold and keep-mask for one layer.

    Returns ``(lam, mask)`` where ``lam`` is the k-th largest ``|w|``.
    """
    _check_sparsity(sparsity)
    if isinstance(weights, Tensor):
        weights = weights.data
    w = np.asarray(weights, dtype=np.float64)
    n = w.size
    if n < 1:
        raise ContractError("threshold() on an empty weight tensor")
    k = n - pruned_count(n, sparsity)
    score = np.abs(w).reshape(-1)
    keep = np.argsort(-score, kind="stable")[:k]
    bits = np.zeros(n, dtype=bool)
    bits[keep] = True
    lam = float(score[keep[-1]])
    return lam, PruneMask(bits.reshape(w.shape), k, layer_name)


def apply_mask(weights: np.ndarray, mask: PruneMask) -> np.ndarray:
    """Copy of ``weights`` with pruned coordinates set to +0.0."""
    w = np.asarray(weights)
    if w.shape != mask.shape:
        raise ContractError(f"mask shape {mask.shape} does not match weights {w.shape}")
    # np.where rather than multiplication: w * 0 gives -0.0 for negative w
    return np.where(mask.bits, w, 0.0)


def enforce_masks(network) -> None:
    """Zero every masked coordinate of ``network`` in place."""
    for name, mask in network.masks.items():
        t = network.weights[name]
        if t.shape != mask.shape:
            raise ShapeError(f"mask for {name!r} has shape {mask.shape}, weights {t.shape}")
        t.data[~mask.bits] = 0.0


def prunable_layers(network, excluded=()) -> list[str]:
    return [
        l.name
        for l in network.fc_layers
        if l.prunable and l.name not in set(excluded)
    ]


def prune_network(network, spec: SparsitySpec) -> dict[str, float]:
    """Build a fresh mask for every non-excluded prunable layer from the
    current weights, install it and zero the pruned weights.

    Returns the per-layer thresholds.
    """
    for name in spec.excluded_layers:
        try:
            network.layer(name)
        except KeyError:
            raise ConfigError(f"excluded layer {name!r} is not in the network") from None
    lambdas = {}
    network.masks = {}
    for name in prunable_layers(network, spec.excluded_layers):
        lam, mask = threshold(network.weights[name].data, spec.sparsity, name)
        network.masks[name] = mask
        lambdas[name] = lam
    enforce_masks(network)
    return lambdas


# ------------------------------------------------------------ diagnostics


def _dataset_loss(network, dataset) -> float:
    return evaluate(network, dataset)[0]


def true_loss_delta(network, dataset, layer: str, index: int, base_loss: float | None = None) -> float:
    """Loss increase from zeroing one weight: ``loss(w_i := 0) - loss(W)``.

    Two full eval-mode passes over ``dataset``; the weight is restored
    before returning.  ``base_loss`` skips the unperturbed pass when the
    caller already has it.
    """
    if layer not in network.weights:
        raise ContractError(f"no weight layer named {layer!r}")
    flat = network.weights[layer].data.reshape(-1)
    if not 0 <= index < flat.size:
        raise ContractError(f"index {index} out of range for {layer!r} with {flat.size} weights")
    if base_loss is None:
        base_loss = _dataset_loss(network, dataset)
    saved = flat[index]
    if saved == 0.0:
        return 0.0
    flat[index] = 0.0
    try:
        perturbed = _dataset_loss(network, dataset)
    finally:
        flat[index] = saved
    return perturbed - base_loss


@dataclass
class TaylorCheck:
    magnitudes: np.ndarray
    loss_deltas: np.ndarray
    spearman: float
    bottom_decile_mean: float
    top_decile_mean: float

    @property
    def passed(self) -> bool:
        return self.bottom_decile_mean < self.top_decile_mean and self.spearman > 0.5


def taylor_check(network, dataset, layers=None) -> TaylorCheck:
    """Exhaustively zero each weight and compare the loss increase with |w|."""
    names = list(network.weights) if layers is None else list(layers)
    base = _dataset_loss(network, dataset)
    mags, deltas = [], []
    for name in names:
        flat = network.weights[name].data.reshape(-1)
        for i in range(flat.size):
            mags.append(abs(flat[i]))
            deltas.append(true_loss_delta(network, dataset, name, i, base_loss=base))
    mags = np.array(mags)
    deltas = np.array(deltas)
    order = np.argsort(mags, kind="stable")
    decile = max(1, len(mags) // 10)
    rho = spearmanr(mags, deltas).statistic
    return TaylorCheck(
        magnitudes=mags,
        loss_deltas=deltas,
        spearman=float(rho),
        bottom_decile_mean=float(deltas[order[:decile]].mean()),
        top_decile_mean=float(deltas[order[-decile:]].mean()),
    )
