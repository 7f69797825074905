"""Weight-distribution histograms, sparsity audits and magnitude tracking.

Exact zeros are never binned; they go to ``zero_count`` so the pruned
spike does not swamp the rest of the distribution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

STAGES = ("dense_final", "post_prune", "sparse_final", "zero_restored", "redense_final")
DEFAULT_BINS = 64


@dataclass
class Histogram:
    layer_name: str
    stage: str
    bin_edges: np.ndarray
    counts: np.ndarray
    zero_count: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.zero_count


def histogram(weights, bins: int = DEFAULT_BINS, range=None, layer_name: str = "", stage: str = "") -> Histogram:
    """Bin the nonzero weights into ``bins`` equal-width bins.

    ``range`` defaults to ``[-m, m]`` with ``m = max|w|``; pass the
    dense-stage range to keep several stages on one axis.  Values outside
    the range are clamped into the end bins so counts stay conserved.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ContractError("histogram of an empty weight tensor")
    if bins < 1:
        raise ContractError(f"bins must be >= 1, got {bins}")
    nonzero = w[w != 0.0]
    if range is None:
        m = float(np.abs(w).max())
        range = (-m, m)
    lo, hi = float(range[0]), float(range[1])
    if not hi > lo:
        # all-zero layer: any strictly increasing edges will do
        lo, hi = -1.0, 1.0
    edges = np.linspace(lo, hi, bins + 1)
    if nonzero.size:
        # bins are [e_i, e_{i+1}) except the last, which is closed
        idx = np.searchsorted(edges, nonzero, side="right") - 1
        idx = np.clip(idx, 0, bins - 1)
        counts = np.bincount(idx, minlength=bins)
    else:
        counts = np.zeros(bins, dtype=np.int64)
    return Histogram(layer_name, stage, edges, counts.astype(np.int64), int(w.size - nonzero.size))


def mean_abs(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ContractError("mean_abs of an empty tensor")
    return float(np.abs(w).mean())


@dataclass(frozen=True)
class AuditRow:
    name: str
    zero_fraction: float
    mask_active: bool


def sparsity_audit(network) -> list[AuditRow]:
    """Per weight layer: fraction of exact zeros and whether a mask is live."""
    rows = []
    for layer in network.fc_layers:
        w = network.weights[layer.name].data
        zeros = int(np.count_nonzero(w == 0.0))
        rows.append(AuditRow(layer.name, zeros / w.size, layer.name in network.masks))
    return rows


def soft_boundary_count(weights, lam: float) -> int:
    """Nonzero weights with magnitude below the pruning threshold ``lam``.

    Right after pruning this is 0; sparse retraining lets kept weights drift
    inside the cut, which shows up here.
    """
    w = np.asarray(weights).reshape(-1)
    return int(np.count_nonzero((w != 0.0) & (np.abs(w) < lam)))


# ---------------------------------------------------------------- writers


def histogram_filename(layer: str, stage: str, iteration: int = 1) -> str:
    return f"hist_it{iteration}_{layer}_{stage}.csv"


def write_histogram_csv(hist: Histogram, path) -> None:
    """``layer,stage,bin_lo,bin_hi,count`` rows plus a trailing zero-count row
    whose bin bounds are both 0."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "stage", "bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
            w.writerow([hist.layer_name, hist.stage, repr(float(lo)), repr(float(hi)), int(c)])
        w.writerow([hist.layer_name, hist.stage, "0.0", "0.0", hist.zero_count])


def read_histogram_csv(path) -> Histogram:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ContractError(f"{path}: empty histogram file")
    *binned, zero = rows
    edges = [float(r["bin_lo"]) for r in binned] + [float(binned[-1]["bin_hi"])] if binned else []
    return Histogram(
        zero["layer"],
        zero["stage"],
        np.array(edges),
        np.array([int(r["count"]) for r in binned], dtype=np.int64),
        int(zero["count"]),
    )


def write_audit_csv(rows: list[AuditRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "zero_fraction", "mask_active"])
        for r in rows:
            w.writerow([r.name, repr(r.zero_fraction), int(r.mask_active)])


class HistogramRecorder:
    """Collects the five per-iteration stage snapshots of a DSD run.

    All stages of one iteration share the bin range fixed at its
    ``dense_final`` snapshot.  If ``out_dir`` is set, each histogram is
    also written there as CSV.
    """

    def __init__(self, bins: int = DEFAULT_BINS, out_dir=None, layers=None):
        self.bins = bins
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.layers = layers
        self.histograms: list[tuple[int, Histogram]] = []
        self.mean_abs: dict[tuple[int, str], dict[str, float]] = {}
        self._ranges: dict[tuple[int, str], tuple[float, float]] = {}

    def snapshot(self, network, stage: str, iteration: int) -> None:
        if stage not in STAGES:
            raise ContractError(f"unknown histogram stage {stage!r}")
        names = self.layers if self.layers is not None else [l.name for l in network.fc_layers]
        for name in names:
            w = network.weights[name].data
            key = (iteration, name)
            if stage == "dense_final" or key not in self._ranges:
                m = float(np.abs(w).max())
                self._ranges[key] = (-m, m)
            h = histogram(w, self.bins, self._ranges[key], layer_name=name, stage=stage)
            self.histograms.append((iteration, h))
            self.mean_abs.setdefault((iteration, name), {})[stage] = mean_abs(w)
            if self.out_dir is not None:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                write_histogram_csv(h, self.out_dir / histogram_filename(name, stage, iteration))
