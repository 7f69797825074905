"""Dense -> sparse -> re-dense orchestration, plus the LLR control run.

A :class:`PhasePlan` lists phases; :func:`run_dsd` executes them, pruning at
every sparse entry, re-applying the mask after every parameter update while
sparse, and dropping the mask (pruned weights restart from 0.0) at every
re-dense entry.  Optimizer velocity restarts at each phase boundary.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import ResumeState, save_checkpoint
from .data import BatchPlan, Dataset, batches
from .errors import ConfigError, FairnessError, NumericError
from .network import DROPOUT, Network, evaluate, loss_and_grads
from .optim import OptimizerSpec, OptimizerState, effective_lr, sgd_step
from .pruning import SparsitySpec, enforce_masks, prune_network
from .reporting import HistogramRecorder, soft_boundary_count, sparsity_audit

log = logging.getLogger(__name__)

DENSE, SPARSE, REDENSE, LLR = "dense", "sparse", "redense", "llr"
PHASE_KINDS = (DENSE, SPARSE, REDENSE)
REDENSE_LR_FACTOR = 0.1
RECORD_HEADER = ["epoch", "phase", "lr", "train_loss", "val_loss", "val_err"]


@dataclass(frozen=True)
class Phase:
    kind: str
    epochs: int
    lr: float | None = None
    sparsity: float | None = None


@dataclass(frozen=True)
class ConvergenceSpec:
    patience: int = 5
    min_delta: float = 1e-4
    max_epochs: int = 100

    def __post_init__(self):
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("convergence.patience and max_epochs must be >= 1")
        if self.patience > self.max_epochs:
            raise ConfigError(
                f"convergence.patience ({self.patience}) exceeds max_epochs ({self.max_epochs})"
            )
        if self.min_delta < 0:
            raise ConfigError(f"convergence.min_delta must be >= 0, got {self.min_delta}")


@dataclass
class PhasePlan:
    phases: list[Phase]
    seed: int = 0
    excluded_layers: tuple[str, ...] = ()
    from_checkpoint: bool = False

    def validate(self) -> "PhasePlan":
        if not self.phases:
            raise ConfigError("plan has no phases")
        for i, p in enumerate(self.phases):
            where = f"dsd.phases[{i}] ({p.kind})"
            if p.kind not in PHASE_KINDS:
                raise ConfigError(f"{where}: unknown phase kind")
            if p.epochs < 1:
                raise ConfigError(f"{where}: epochs must be >= 1, got {p.epochs}")
            if p.lr is not None and not p.lr > 0:
                raise ConfigError(f"{where}: lr must be positive, got {p.lr}")
            if p.kind == SPARSE:
                if p.sparsity is None or not 0.0 < p.sparsity < 1.0:
                    raise ConfigError(f"{where}: sparsity must lie in (0, 1), got {p.sparsity}")
            elif p.sparsity is not None:
                raise ConfigError(f"{where}: only sparse phases take a sparsity")
            if p.kind == REDENSE:
                prev = self.phases[i - 1].kind if i else None
                if prev != SPARSE and not (i == 0 and self.from_checkpoint):
                    raise ConfigError(f"{where}: a redense phase must follow a sparse phase")
        if self.phases[0].kind != DENSE and not self.from_checkpoint:
            raise ConfigError("plan must start with a dense phase unless resuming from a checkpoint")
        return self

    def resolved(self, base_lr: float) -> "PhasePlan":
        """Copy with every missing lr filled in.

        dense: ``base_lr``; sparse and redense: one tenth of the previous
        phase's lr (``base_lr`` standing in for a checkpointed baseline).
        """
        out, prev_lr = [], base_lr
        for p in self.phases:
            lr = p.lr
            if lr is None:
                lr = base_lr if p.kind == DENSE else prev_lr * REDENSE_LR_FACTOR
            out.append(replace(p, lr=lr))
            prev_lr = lr
        return replace(self, phases=out)

    def retrain_epochs(self) -> int:
        """Epoch budget of all sparse and redense phases (what LLR must match)."""
        return sum(p.epochs for p in self.phases if p.kind in (SPARSE, REDENSE))


@dataclass
class TrainData:
    train: Dataset
    val: Dataset
    test: Dataset
    batch_size: int = 64
    drop_last: bool = False


@dataclass
class EpochRow:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    val_loss: float
    val_err: float


@dataclass
class PhaseResult:
    index: int
    kind: str
    sparsity: float
    epochs: int
    lr: float
    train_loss: float
    val_loss: float
    val_err: float
    test_err: float
    thresholds: dict[str, float] = field(default_factory=dict)


@dataclass
class RunRecord:
    seed: int
    rows: list[EpochRow] = field(default_factory=list)
    phases: list[PhaseResult] = field(default_factory=list)
    start_test_err: float | None = None
    test_err: float | None = None
    layer_sparsity: dict[str, float] = field(default_factory=dict)
    mask_active: dict[str, bool] = field(default_factory=dict)
    seconds: float = 0.0
    histograms: HistogramRecorder | None = None
    soft_boundary: dict[str, int] = field(default_factory=dict)
    error: str | None = None

    @property
    def epochs(self) -> int:
        return len(self.rows)

    def retrain_epochs(self) -> int:
        return sum(p.epochs for p in self.phases if p.kind in (SPARSE, REDENSE, LLR))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(RECORD_HEADER)
            for r in self.rows:
                w.writerow(
                    [r.epoch, r.phase, repr(r.lr), repr(r.train_loss), repr(r.val_loss), repr(r.val_err)]
                )

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": self.epochs,
            "start_test_err": self.start_test_err,
            "test_err": self.test_err,
            "phases": [asdict(p) for p in self.phases],
            "layer_sparsity": self.layer_sparsity,
            "mask_active": self.mask_active,
            "soft_boundary": self.soft_boundary,
            "seconds": round(self.seconds, 3),
            "error": self.error,
        }


def read_record_csv(path) -> list[EpochRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RECORD_HEADER:
            raise ConfigError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            EpochRow(int(r["epoch"]), r["phase"], float(r["lr"]), float(r["train_loss"]),
                     float(r["val_loss"]), float(r["val_err"]))
            for r in reader
        ]


class EarlyStopping:
    """Stop once validation loss fails to improve by ``min_delta`` for
    ``patience`` consecutive epochs."""

    def __init__(self, spec: ConvergenceSpec, best: float = math.inf, bad: int = 0):
        self.spec = spec
        self.best = best
        self.bad = bad

    def update(self, val_loss: float) -> bool:
        if val_loss < self.best - self.spec.min_delta:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.spec.patience


StepHook = Callable[[Network, str, int, int], None]


def _has_dropout(network: Network) -> bool:
    return any(l.kind == DROPOUT and l.drop_prob > 0 for l in network.layers)


def run_phase(
    network: Network,
    phase: Phase,
    opt: OptimizerSpec,
    data: TrainData,
    convergence: ConvergenceSpec | None = None,
    *,
    seed: int = 0,
    start_epoch: int = 0,
    phase_index: int = 0,
    label: str | None = None,
    excluded_layers=(),
    resume: ResumeState | None = None,
    checkpoint_every: int | None = None,
    checkpoint_dir=None,
    on_step: StepHook | None = None,
) -> tuple[Network, list[EpochRow], PhaseResult]:
    """Train ``network`` in place for one phase.

    Without ``convergence`` the phase runs exactly ``phase.epochs`` epochs;
    with it the phase stops early once validation loss stalls, and never
    exceeds ``min(phase.epochs, convergence.max_epochs)``.
    """
    label = label or phase.kind
    lambdas: dict[str, float] = {}
    if phase.kind == SPARSE and not network.masks:
        lambdas = prune_network(network, SparsitySpec(phase.sparsity, tuple(excluded_layers)))
    elif phase.kind != SPARSE and network.masks:
        enforce_masks(network)
        network.masks = {}

    params = network.parameters()
    state = OptimizerState.fresh(params)
    stopper = EarlyStopping(convergence) if convergence else None
    cap = phase.epochs if convergence is None else min(phase.epochs, convergence.max_epochs)
    done, epoch = 0, start_epoch
    if resume is not None:
        done, epoch = resume.epochs_done, resume.next_epoch
        state.velocity.update({k: v.copy() for k, v in resume.velocity.items()})
        if stopper is not None:
            stopper.best, stopper.bad = resume.best_val_loss, resume.bad_epochs

    plan = BatchPlan(data.batch_size, shuffle_seed=seed, drop_last=data.drop_last)
    dropout = _has_dropout(network)
    rows: list[EpochRow] = []
    while done < cap:
        lr = effective_lr(opt, epoch, phase, phase_start=epoch - done)
        state.lr, state.epoch = lr, epoch
        total, seen = 0.0, 0
        for step, (xb, yb) in enumerate(batches(data.train, plan, epoch)):
            rng = np.random.default_rng([seed, epoch, step]) if dropout else None
            try:
                loss, grads = loss_and_grads(network, xb, yb, rng)
                sgd_step(params, grads, state, opt, lr)
            except NumericError as e:
                raise NumericError(f"{label} phase {phase_index}, epoch {epoch}, step {step}: {e}") from e
            if network.masks:
                enforce_masks(network)
            if on_step is not None:
                on_step(network, label, epoch, step)
            total += loss * len(yb)
            seen += len(yb)
        val_loss, val_err = evaluate(network, data.val)
        if not math.isfinite(val_loss):
            raise NumericError(f"{label} phase {phase_index}, epoch {epoch}: validation loss {val_loss}")
        rows.append(EpochRow(epoch, label, lr, total / seen, val_loss, val_err))
        log.debug("%s epoch %d lr=%g train=%.5f val=%.5f err=%.4f",
                  label, epoch, lr, total / seen, val_loss, val_err)
        done += 1
        epoch += 1
        stop = stopper.update(val_loss) if stopper else False
        if checkpoint_every and checkpoint_dir is not None and done % checkpoint_every == 0 and done < cap and not stop:
            ckpt_state = ResumeState(
                phase_index, done, epoch,
                stopper.best if stopper else math.inf,
                stopper.bad if stopper else 0,
                state.velocity,
            )
            save_checkpoint(network, Path(checkpoint_dir) / f"resume_e{epoch:04d}.dsdc", ckpt_state)
        if stop:
            break

    last = rows[-1] if rows else None
    _, test_err = evaluate(network, data.test)
    result = PhaseResult(
        index=phase_index,
        kind=label,
        sparsity=phase.sparsity or 0.0,
        epochs=len(rows) + (resume.epochs_done if resume else 0),
        lr=phase.lr if phase.lr is not None else opt.base_lr,
        train_loss=last.train_loss if last else math.nan,
        val_loss=last.val_loss if last else math.nan,
        val_err=last.val_err if last else math.nan,
        test_err=test_err,
        thresholds=lambdas,
    )
    return network, rows, result


def _finalise(record: RunRecord, network: Network, data: TrainData, started: float) -> None:
    record.test_err = evaluate(network, data.test)[1]
    for row in sparsity_audit(network):
        record.layer_sparsity[row.name] = row.zero_fraction
        record.mask_active[row.name] = row.mask_active
    record.seconds = time.perf_counter() - started


def run_dsd(
    plan: PhasePlan,
    network: Network,
    data: TrainData,
    opt: OptimizerSpec,
    convergence: ConvergenceSpec | None = None,
    *,
    out_dir=None,
    bins: int = 64,
    checkpoint_every: int | None = None,
    resume: ResumeState | None = None,
    on_step: StepHook | None = None,
    on_phase: Callable[[Network, PhaseResult], None] | None = None,
    on_phase_start: Callable[[Network, int, Phase], None] | None = None,
    early_stop_retrain: bool = True,
) -> tuple[Network, RunRecord]:
    """Execute every phase of ``plan`` on ``network`` (modified in place).

    With ``out_dir`` set, writes ``phase{i}_{kind}.dsdc`` after each phase
    (plus ``input.dsdc`` when the plan starts from a checkpoint),
    stage-tagged histogram CSVs, ``record.csv`` and ``summary.json``.
    ``resume`` restarts mid-phase from a checkpoint's resume block.
    ``early_stop_retrain=False`` runs sparse and redense phases for exactly
    their configured epochs, which paired comparisons need.
    ``on_phase_start`` sees the network after any pruning or mask removal,
    right before the phase's first step.
    """
    plan.validate()
    plan = plan.resolved(opt.base_lr)
    started = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if plan.from_checkpoint and resume is None:
            save_checkpoint(network, out / "input.dsdc")

    record = RunRecord(seed=plan.seed)
    record.start_test_err = evaluate(network, data.test)[1]
    excluded = tuple(plan.excluded_layers)
    hist_layers = [l.name for l in network.fc_layers]
    recorder = HistogramRecorder(bins, out, layers=hist_layers)
    record.histograms = recorder

    iteration = 0
    epoch = 0
    first = resume.phase_index if resume is not None else 0
    for i, phase in enumerate(plan.phases):
        if i < first:
            if phase.kind == SPARSE:
                iteration += 1
            continue
        mid_phase = resume is not None and i == first
        thresholds: dict[str, float] = {}
        if phase.kind == SPARSE and not mid_phase:
            iteration += 1
            recorder.snapshot(network, "dense_final", iteration)
            thresholds = prune_network(network, SparsitySpec(phase.sparsity, excluded))
            recorder.snapshot(network, "post_prune", iteration)
        elif phase.kind == SPARSE:
            iteration += 1
        elif phase.kind == REDENSE and not mid_phase:
            if not network.masks and i == 0:
                raise ConfigError("redense phase needs a sparse checkpoint with masks")
            enforce_masks(network)
            network.masks = {}
            recorder.snapshot(network, "zero_restored", iteration)

        if on_phase_start is not None:
            on_phase_start(network, i, phase)
        stopper = convergence if phase.kind == DENSE or early_stop_retrain else None
        network, rows, result = run_phase(
            network, phase, opt, data, stopper,
            seed=plan.seed,
            start_epoch=epoch,
            phase_index=i,
            excluded_layers=excluded,
            resume=resume if mid_phase else None,
            checkpoint_every=checkpoint_every,
            checkpoint_dir=out,
            on_step=on_step,
        )
        if thresholds:
            result.thresholds = thresholds
        if mid_phase:
            epoch = resume.next_epoch
        epoch += len(rows)
        record.rows.extend(rows)
        record.phases.append(result)

        if phase.kind == SPARSE:
            recorder.snapshot(network, "sparse_final", iteration)
            for name, lam in result.thresholds.items():
                record.soft_boundary[name] = soft_boundary_count(network.weights[name].data, lam)
        elif phase.kind == REDENSE:
            recorder.snapshot(network, "redense_final", iteration)
        if out is not None:
            save_checkpoint(network, out / f"phase{i}_{phase.kind}.dsdc")
        if on_phase is not None:
            on_phase(network, result)

    _finalise(record, network, data, started)
    if out is not None:
        record.write_csv(out / "record.csv")
        with open(out / "summary.json", "w") as f:
            json.dump(record.summary(), f, indent=2, sort_keys=True)
    return network, record


def run_llr(
    network: Network,
    total_extra_epochs: int,
    lr_sequence,
    data: TrainData,
    opt: OptimizerSpec,
    *,
    seed: int = 0,
    paired=None,
    out_dir=None,
) -> tuple[Network, RunRecord]:
    """Continue dense training from a converged network with lowered lrs.

    ``lr_sequence`` is a list of ``(epochs, lr)`` blocks whose epochs must add
    up to ``total_extra_epochs``.  ``paired`` (a :class:`PhasePlan` or a
    DSD :class:`RunRecord`) must have the same sparse+redense budget.
    Early stopping is never applied, so the budget is spent exactly.
    """
    blocks = [(int(e), float(lr)) for e, lr in lr_sequence]
    if any(e < 1 or lr < 0 for e, lr in blocks):
        raise ConfigError(f"invalid LLR block in {blocks}")
    if sum(e for e, _ in blocks) != total_extra_epochs:
        raise FairnessError(
            f"LLR lr_sequence covers {sum(e for e, _ in blocks)} epochs, "
            f"expected {total_extra_epochs}"
        )
    if paired is not None:
        budget = paired.retrain_epochs()
        if budget != total_extra_epochs:
            raise FairnessError(
                f"LLR runs {total_extra_epochs} epochs but the paired DSD arm retrains for {budget}"
            )
    started = time.perf_counter()
    record = RunRecord(seed=seed)
    record.start_test_err = evaluate(network, data.test)[1]
    if network.masks:
        log.warning("LLR input carried masks; dropping them")
        network.masks = {}
    epoch = 0
    for i, (epochs, lr) in enumerate(blocks):
        phase = Phase(DENSE, epochs, lr)
        # per-block lr must be honoured even under a non per-phase schedule
        block_opt = replace(opt, schedule="per_phase_constant", step_factor=None, step_every=None)
        network, rows, result = run_phase(
            network, phase, block_opt, data, None,
            seed=seed, start_epoch=epoch, phase_index=i, label=LLR,
        )
        result.lr = lr
        epoch += len(rows)
        record.rows.extend(rows)
        record.phases.append(result)
    _finalise(record, network, data, started)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        record.write_csv(out / "record.csv")
        with open(out / "summary.json", "w") as f:
            json.dump(record.summary(), f, indent=2, sort_keys=True)
        save_checkpoint(network, out / "llr_final.dsdc")
    return network, record


def train_dense(
    network: Network,
    data: TrainData,
    opt: OptimizerSpec,
    convergence: ConvergenceSpec,
    *,
    seed: int = 0,
    lr: float | None = None,
    out_dir=None,
) -> tuple[Network, RunRecord]:
    """Conventional training to convergence: a one-phase dense plan."""
    plan = PhasePlan([Phase(DENSE, convergence.max_epochs, lr)], seed=seed)
    return run_dsd(plan, network, data, opt, convergence, out_dir=out_dir)
