"""Experiment drivers behind the CLI commands.

Every driver writes into one output directory with fixed file names, and
echoes the resolved config there as ``config.json`` first, so a run can be
reproduced from its own artifacts.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, read_checkpoint
from .config import ExperimentConfig
from .errors import ConfigError, FairnessError, MissingArtifactError
from .flow import (
    DENSE, REDENSE, SPARSE, PhasePlan, RunRecord, TrainData, run_dsd, run_llr, train_dense,
)
from .network import Network, error_rate
from .pruning import threshold
from .reporting import STAGES, histogram, histogram_filename, write_histogram_csv
from .stats import compare_arms, repeat_runs

log = logging.getLogger(__name__)


def write_config_echo(cfg: ExperimentConfig, out: Path, **run) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    doc["run"] = run
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _network_from(cfg: ExperimentConfig, checkpoint=None) -> Network:
    net = cfg.build_network()
    if checkpoint is not None:
        load_checkpoint(checkpoint, net)
    return net


# ----------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig, out, seed: int) -> RunRecord:
    """Dense training to convergence; writes ``phase0_dense.dsdc``."""
    out = Path(out)
    write_config_echo(cfg, out, command="train", seed=seed)
    data = cfg.load_data()
    _, record = train_dense(
        cfg.build_network(), data, cfg.optimizer_spec(), cfg.convergence_spec(), seed=seed, out_dir=out
    )
    return record


def cmd_dsd(cfg: ExperimentConfig, out, seed: int, from_checkpoint=None) -> RunRecord:
    out = Path(out)
    resuming = from_checkpoint is not None
    plan = cfg.plan(seed, from_checkpoint=resuming or None)
    if not plan.phases:
        raise ConfigError("dsd.phases: nothing left to run")
    write_config_echo(cfg, out, command="dsd", seed=seed,
                      from_checkpoint=str(from_checkpoint) if resuming else None)
    net = _network_from(cfg, from_checkpoint)
    _, record = run_dsd(
        plan, net, cfg.load_data(), cfg.optimizer_spec(), cfg.convergence_spec(),
        out_dir=out,
        bins=cfg.harness.bins,
        checkpoint_every=cfg.harness.checkpoint_every or None,
        early_stop_retrain=cfg.harness.early_stop_retrain,
    )
    return record


def _baseline(cfg: ExperimentConfig, out: Path, data: TrainData, from_checkpoint=None) -> Path:
    """Path of the converged dense checkpoint, training it if not given."""
    if from_checkpoint is not None:
        return Path(from_checkpoint)
    train_dense(
        cfg.build_network(), data, cfg.optimizer_spec(), cfg.convergence_spec(),
        seed=cfg.model.init_seed, out_dir=out / "baseline",
    )
    return out / "baseline" / "phase0_dense.dsdc"


def _fairness(cfg: ExperimentConfig) -> tuple[PhasePlan, list[tuple[int, float]]]:
    plan = cfg.plan(0, from_checkpoint=True)
    plan.validate()
    blocks = cfg.llr_blocks()
    dsd_budget = plan.retrain_epochs()
    llr_budget = sum(e for e, _ in blocks)
    if dsd_budget != llr_budget:
        raise FairnessError(
            f"unequal retraining budgets: DSD sparse+redense = {dsd_budget} epochs, "
            f"LLR = {llr_budget} epochs"
        )
    if any(p.kind == DENSE for p in plan.phases):
        raise ConfigError("dsd.phases: a paired comparison allows only one leading dense phase")
    return plan, blocks


def cmd_llr(cfg: ExperimentConfig, out, seed: int, from_checkpoint=None) -> RunRecord:
    out = Path(out)
    plan, blocks = _fairness(cfg)
    write_config_echo(cfg, out, command="llr", seed=seed,
                      from_checkpoint=str(from_checkpoint) if from_checkpoint else None)
    data = cfg.load_data()
    ckpt = _baseline(cfg, out, data, from_checkpoint)
    _, record = run_llr(
        _network_from(cfg, ckpt), plan.retrain_epochs(), blocks, data, cfg.optimizer_spec(),
        seed=seed, paired=plan, out_dir=out,
    )
    return record


def _dsd_arm(seed: int, cfg: ExperimentConfig, ckpt: Path, data: TrainData, out: Path) -> RunRecord:
    plan = cfg.plan(seed, from_checkpoint=True)
    write_config_echo(cfg, out / f"seed{seed}", command="compare", arm="dsd", seed=seed, baseline=str(ckpt))
    _, record = run_dsd(
        plan, _network_from(cfg, ckpt), data, cfg.optimizer_spec(), None,
        out_dir=out / f"seed{seed}", bins=cfg.harness.bins, early_stop_retrain=False,
    )
    record.histograms = None  # large and already on disk
    return record


def _llr_arm(seed: int, cfg: ExperimentConfig, ckpt: Path, data: TrainData, out: Path) -> RunRecord:
    plan, blocks = _fairness(cfg)
    write_config_echo(cfg, out / f"seed{seed}", command="compare", arm="llr", seed=seed, baseline=str(ckpt))
    _, record = run_llr(
        _network_from(cfg, ckpt), plan.retrain_epochs(), blocks, data, cfg.optimizer_spec(),
        seed=seed, paired=plan, out_dir=out / f"seed{seed}",
    )
    return record


def cmd_compare(cfg: ExperimentConfig, out, seeds=None, jobs: int = 1, from_checkpoint=None):
    """DSD and LLR arms per seed from one shared baseline, then the report.

    Both arms run their epochs without early stopping so the budgets stay
    equal; the guard runs before any training.
    """
    out = Path(out)
    seeds = list(cfg.harness.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("harness.seeds must not be empty")
    _fairness(cfg)
    write_config_echo(cfg, out, command="compare", seeds=seeds, jobs=jobs,
                      from_checkpoint=str(from_checkpoint) if from_checkpoint else None)
    data = cfg.load_data()
    ckpt = _baseline(cfg, out, data, from_checkpoint)
    baseline_err = error_rate(_network_from(cfg, ckpt), data.test)

    dsd = repeat_runs(functools.partial(_dsd_arm, cfg=cfg, ckpt=ckpt, data=data, out=out / "dsd"), seeds, jobs)
    llr = repeat_runs(functools.partial(_llr_arm, cfg=cfg, ckpt=ckpt, data=data, out=out / "llr"), seeds, jobs)
    for a, b in zip(dsd, llr):
        if a.error is None and b.error is None and a.retrain_epochs() != b.retrain_epochs():
            raise FairnessError(
                f"seed {a.seed}: DSD retrained {a.retrain_epochs()} epochs, LLR {b.retrain_epochs()}"
            )
    report = build_comparison(dsd, llr, baseline_err, cfg.harness.alternative)
    report.write(out)
    half = build_comparison(dsd, llr, baseline_err, cfg.harness.alternative, halfway=True)
    if half is not None:
        half.write(out, stem="comparison_half")
    _write_arm_table(out / "arms.csv", dsd, llr)
    return report, dsd, llr


def _halfway_err(record: RunRecord) -> float | None:
    """Test error after the first retraining block (sparse phase / first LLR block)."""
    if record.error is not None or len(record.phases) < 2:
        return None
    return record.phases[0].test_err


def build_comparison(dsd, llr, baseline_err: float, alternative="two-sided", halfway=False):
    pick = _halfway_err if halfway else (lambda r: r.test_err if r.error is None else None)
    arms = {"dsd": [pick(r) for r in dsd], "llr": [pick(r) for r in llr]}
    if halfway and all(v is None for vs in arms.values() for v in vs):
        return None
    report = compare_arms(arms, [("dsd", "llr")], alternative)
    label = "after the first retraining block" if halfway else "final"
    report.notes.append("")
    report.notes.append(f"test errors: {label}")
    report.notes.append(f"baseline test error: {baseline_err * 100:.2f}%")
    s = report.summaries
    if not halfway and "dsd" in s and "llr" in s:
        d, l = s["dsd"], s["llr"]
        report.notes.append(f"dsd mean below llr mean: {'yes' if d.mean < l.mean else 'no'}")
        report.notes.append(f"dsd mean below baseline: {'yes' if d.mean < baseline_err else 'no'}")
        if d.n > 1 and l.n > 1:
            report.notes.append(f"sd(dsd) <= sd(llr): {'yes' if d.sd <= l.sd else 'no'}")
    return report


def _write_arm_table(path: Path, dsd, llr) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed", "method", "epochs", "half_err", "test_err", "error"])
        for arm, records in (("dsd", dsd), ("llr", llr)):
            for r in records:
                half = _halfway_err(r)
                w.writerow([r.seed, arm, r.retrain_epochs(), "" if half is None else repr(half),
                            "" if r.test_err is None else repr(r.test_err), r.error or ""])


# ------------------------------------------------------------------ report


REPORT_DIR = "report"


def _require(run_dir: Path, names) -> None:
    missing = [n for n in names if not (run_dir / n).exists()]
    if missing:
        listing = "\n  ".join(str(run_dir / n) for n in missing)
        raise MissingArtifactError(f"{run_dir}: missing expected files:\n  {listing}")


def _pct(x: float) -> str:
    return f"{x * 100:.2f}%"


def report_run(run_dir) -> Path:
    """Regenerate the five-stage histograms and a summary for one DSD run.

    Everything is derived from the phase checkpoints, ``summary.json`` and
    ``config.json``, so reruns produce identical bytes.
    """
    run_dir = Path(run_dir)
    _require(run_dir, ["config.json", "summary.json", "record.csv"])
    cfg = json.loads((run_dir / "config.json").read_text())
    summary = json.loads((run_dir / "summary.json").read_text())
    phases = summary["phases"]
    ckpts = [f"phase{i}_{p['kind']}.dsdc" for i, p in enumerate(phases)]
    needs_input = bool(phases) and phases[0]["kind"] != DENSE
    _require(run_dir, ckpts + (["input.dsdc"] if needs_input else []))

    out = run_dir / REPORT_DIR
    out.mkdir(exist_ok=True)
    bins = cfg["harness"]["bins"]
    excluded = set(cfg["dsd"]["excluded_layers"])
    for row in cfg["model"].get("layers") or ():
        if row.get("prunable") is False:
            excluded.add(row.get("name"))

    def weights_of(name):
        ckpt = read_checkpoint(run_dir / name)
        return {rec.name: rec.weights for rec in ckpt.layers if rec.weights is not None}

    iteration = 0
    for i, p in enumerate(phases):
        if p["kind"] != SPARSE:
            continue
        iteration += 1
        dense = weights_of(ckpts[i - 1] if i else "input.dsdc")
        sparse = weights_of(ckpts[i])
        nxt = phases[i + 1]["kind"] if i + 1 < len(phases) else None
        redense = weights_of(ckpts[i + 1]) if nxt == REDENSE else None
        for layer, w in dense.items():
            m = float(np.abs(w).max())
            rng = (-m, m)
            if layer in excluded:
                post = w
            else:
                _, mask = threshold(w, p["sparsity"], layer)
                post = np.where(mask.bits, w, 0.0)
            stages = {
                "dense_final": w,
                "post_prune": post,
                "sparse_final": sparse[layer],
                "zero_restored": sparse[layer],
                "redense_final": redense[layer] if redense is not None else None,
            }
            for stage in STAGES:
                if stages[stage] is None:
                    continue
                h = histogram(stages[stage], bins, rng, layer_name=layer, stage=stage)
                write_histogram_csv(h, out / histogram_filename(layer, stage, iteration))

    (out / "summary.txt").write_text(render_summary(summary))
    return out


def _baseline_of(summary: dict) -> float:
    first_sparse = next((i for i, p in enumerate(summary["phases"]) if p["kind"] == SPARSE), None)
    if first_sparse:
        return summary["phases"][first_sparse - 1]["test_err"]
    return summary["start_test_err"]


def render_summary(summary: dict) -> str:
    phases = summary["phases"]
    lines = [f"{'phase':<6}{'kind':<9}{'sparsity':>9}{'epochs':>8}{'lr':>10}{'val err':>9}{'test err':>10}"]
    for p in phases:
        lines.append(
            f"{p['index']:<6}{p['kind']:<9}{p['sparsity'] * 100:>8.0f}%{p['epochs']:>8}"
            f"{p['lr']:>10.3g}{_pct(p['val_err']):>9}{_pct(p['test_err']):>10}"
        )
    lines.append("")
    base = _baseline_of(summary)
    final = summary["test_err"]
    lines.append(f"{'Baseline':<16}{_pct(base):>9}")
    sparse = [p for p in phases if p["kind"] == SPARSE]
    if sparse:
        lines.append(f"{'Sparse':<16}{_pct(sparse[-1]['test_err']):>9}")
    lines.append(f"{'DSD':<16}{_pct(final):>9}")
    improve = base - final
    lines.append(f"{'Improve (abs)':<16}{_pct(improve):>9}")
    rel = improve / base if base else float("nan")
    lines.append(f"{'Improve (rel)':<16}{_pct(rel):>9}")
    return "\n".join(lines) + "\n"


def cmd_report(run_dir) -> list[Path]:
    """Report a DSD run directory, or every DSD arm of a compare directory
    plus the re-rendered comparison."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise MissingArtifactError(f"{run_dir}: no such run directory")
    arm_dir = run_dir / "dsd"
    if not arm_dir.is_dir():
        return [report_run(run_dir)]
    _require(run_dir, ["config.json", "arms.csv"])
    outs = [report_run(d) for d in sorted(arm_dir.iterdir()) if d.is_dir()]
    outs.append(_rerender_comparison(run_dir))
    return outs


def _rerender_comparison(run_dir: Path) -> Path:
    cfg = json.loads((run_dir / "config.json").read_text())
    rows = list(csv.DictReader(open(run_dir / "arms.csv", newline="")))
    arms: dict[str, list] = {"dsd": [], "llr": []}
    for r in rows:
        arms[r["method"]].append(float(r["test_err"]) if r["test_err"] else None)
    report = compare_arms(arms, [("dsd", "llr")], cfg["harness"]["alternative"])
    out = run_dir / REPORT_DIR
    report.write(out)
    return out
