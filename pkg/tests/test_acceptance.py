"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The MNIST experiment (criteria 5, 6, 7 and 9) uses the full IDX files when
``DSD_MNIST_DIR`` points at a directory holding ``train-images-idx3-ubyte.gz``,
``train-labels-idx1-ubyte.gz``, ``t10k-images-idx3-ubyte.gz`` and
``t10k-labels-idx1-ubyte.gz``; otherwise it converts the 5,000-image subset
bundled with mlxtend.  ``DSD_ACCEPTANCE_JOBS`` sets the process count for
the 16-seed comparison (default 1).
"""

import importlib.util
import json
import math
import os
import time
from decimal import Decimal
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

from dsd.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from dsd.cli import main as cli_main
from dsd.config import from_dict, load_config, tomllib
from dsd.data import make_synthetic, split
from dsd.flow import (
    DENSE, REDENSE, SPARSE, ConvergenceSpec, Phase, PhasePlan, TrainData, run_dsd, train_dense,
)
from dsd.harness import cmd_compare
from dsd.network import (
    ACTIVATIONS, FULLY_CONNECTED, InitSpec, LayerSpec, Network, init, loss_and_grads, mlp_layers,
)
from dsd.optim import OptimizerSpec
from dsd.pruning import pruned_count, taylor_check, threshold
from dsd.reporting import STAGES, histogram_filename, read_histogram_csv, sparsity_audit
from dsd.stats import summarize, welch_t_test

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"

# pinned tolerances
GRAD_H = 1e-5
GRAD_REL_TOL = 1e-4
GRAD_REL_FLOOR = 1e-6  # |a - n| / max(|a|, |n|, floor); FD roundoff is ~1e-11
WELCH_P_TOL = 1e-6
DSD_LLR_MARGIN = 0.001  # 0.1% absolute
ITER2_MARGIN = 0.002  # 0.2% absolute
TAYLOR_MIN_SEEDS = 9
RHO_MIN = 0.5


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# ------------------------------------------------------------ MNIST setup


def _mnist_config(data_dir: Path) -> tuple[dict, str]:
    full = os.environ.get("DSD_MNIST_DIR")
    if full:
        raw = tomllib.loads((CONFIGS / "mnist_compare.toml").read_text())
        d = Path(full)
        raw["dataset"].update(
            images=str(d / "train-images-idx3-ubyte.gz"), labels=str(d / "train-labels-idx1-ubyte.gz"),
            test_images=str(d / "t10k-images-idx3-ubyte.gz"), test_labels=str(d / "t10k-labels-idx1-ubyte.gz"),
        )
        return raw, "MNIST 10k train / 1k val / 10k test"
    spec = importlib.util.spec_from_file_location("make_mnist_idx", REPO / "scripts" / "make_mnist_idx.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    images, labels = mod.convert(data_dir)
    raw = tomllib.loads((CONFIGS / "mnist5k_compare.toml").read_text())
    raw["dataset"].update(images=str(images), labels=str(labels))
    return raw, "MNIST 5k subset: 3k train / 1k val / 1k test"


@pytest.fixture(scope="module")
def mnist(tmp_path_factory):
    root = tmp_path_factory.mktemp("mnist")
    raw, label = _mnist_config(root / "data")
    cfg = from_dict(raw)
    out = root / "compare"
    jobs = int(os.environ.get("DSD_ACCEPTANCE_JOBS", "1"))
    started = time.perf_counter()
    report, dsd, llr = cmd_compare(cfg, out, jobs=jobs)
    return {
        "cfg": cfg, "out": out, "report": report, "dsd": dsd, "llr": llr, "label": label,
        "seconds": time.perf_counter() - started, "data": cfg.load_data(),
    }


# -------------------------------------------------------------- criterion 1


def _random_net(rng) -> tuple[Network, int]:
    depth = int(rng.integers(2, 4))
    dims = [int(d) for d in rng.integers(2, 33, size=depth + 1)]
    acts = [a for a in ACTIVATIONS if a != "none"]
    layers = [
        LayerSpec(FULLY_CONNECTED, f"fc{i + 1}", dims[i], dims[i + 1],
                  str(rng.choice(acts)) if i < depth - 1 else "none")
        for i in range(depth)
    ]
    net = init(Network(layers), InitSpec(seed=int(rng.integers(2**31))))
    for b in net.biases.values():
        b.data[:] = rng.normal(0, 0.1, b.shape)
    return net, dims[-1]


def test_criterion_1_gradients(capsys):
    rng = np.random.default_rng(101)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        net, classes = _random_net(rng)
        x = rng.normal(size=(int(rng.integers(1, 9)), net.layers[0].in_dim))
        y = rng.integers(0, classes, size=len(x))
        _, grads = loss_and_grads(net, x, y, mode="eval")
        for key, t in net.parameters():
            flat, g = t.data.reshape(-1), grads[key].reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + GRAD_H
                up = loss_and_grads(net, x, y, mode="eval")[0]
                flat[i] = saved - GRAD_H
                down = loss_and_grads(net, x, y, mode="eval")[0]
                flat[i] = saved
                numeric = (up - down) / (2 * GRAD_H)
                err = abs(g[i] - numeric) / max(abs(g[i]), abs(numeric), GRAD_REL_FLOOR)
                worst = max(worst, err)
    secs = time.perf_counter() - started
    verdict(capsys, 1, worst < GRAD_REL_TOL and secs < 60,
            f"gradients on 50 random nets: max rel err {worst:.2e} (< {GRAD_REL_TOL:g}), {secs:.1f}s")


# -------------------------------------------------------------- criterion 2


def test_criterion_2_mask_enforcement(capsys):
    ds = make_synthetic("concentric_rings", 2000, 0.15, seed=2)
    data = TrainData(*split(ds, (0.8, 0.1, 0.1), seed=0), batch_size=16)
    net = init(Network(mlp_layers([2, 16, 16, 2])), InitSpec(seed=0))
    plan = PhasePlan([Phase(DENSE, 5), Phase(SPARSE, 5, sparsity=0.5)], seed=0)
    state = {"steps": 0, "bad": 0}

    def on_step(network, label, epoch, step):
        if label != SPARSE:
            return
        state["steps"] += 1
        for name, mask in network.masks.items():
            w = network.weights[name].data
            expected = math.floor(w.size * Decimal("0.5"))
            if (w[~mask.bits] != 0.0).any() or np.count_nonzero(w == 0.0) != expected:
                state["bad"] += 1

    started = time.perf_counter()
    net, record = run_dsd(plan, net, data, OptimizerSpec(base_lr=0.05), on_step=on_step, early_stop_retrain=False)
    secs = time.perf_counter() - started
    fractions = {r.name: r.zero_fraction for r in sparsity_audit(net)}
    exact = all(fractions[n] == math.floor(net.weights[n].data.size * 0.5) / net.weights[n].data.size
                for n in ("fc1", "fc2", "fc3"))
    ok = state["bad"] == 0 and state["steps"] >= 500 and record.phases[1].epochs >= 5 and exact and secs < 60
    verdict(capsys, 2, ok, f"{state['steps']} sparse steps over {record.phases[1].epochs} epochs, "
                           f"{state['bad']} violations, zero fractions {fractions}, {secs:.1f}s")


# -------------------------------------------------------------- criterion 3


def _oracle_kept(w, s):
    mags = [abs(float(v)) for v in w]
    k = len(mags) - math.floor(Decimal(str(s)) * len(mags))
    return set(sorted(range(len(mags)), key=lambda i: (-mags[i], i))[:k])


def test_criterion_3_threshold_oracle(capsys):
    rng = np.random.default_rng(303)
    started = time.perf_counter()
    mismatches = ties = 0
    for trial in range(1000):
        n = int(rng.integers(1, 501))
        s = float(rng.choice([0.0, 0.25, 0.3, 0.5, 0.8]))
        if trial % 2:
            w = rng.choice([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0], size=n)
            ties += 1
        else:
            w = rng.normal(size=n)
        _, mask = threshold(w, s)
        if set(np.flatnonzero(mask.bits).tolist()) != _oracle_kept(w, s):
            mismatches += 1
    secs = time.perf_counter() - started
    verdict(capsys, 3, mismatches == 0 and secs < 10,
            f"1000 vectors ({ties} with ties): {mismatches} kept-set mismatches, {secs:.1f}s")


# -------------------------------------------------------------- criterion 4


def test_criterion_4_taylor(capsys):
    ds = make_synthetic("concentric_rings", 1000, 0.15, seed=0)
    data = TrainData(*split(ds, (0.8, 0.1, 0.1), seed=0), batch_size=32)
    opt = OptimizerSpec(base_lr=0.01, momentum=0.9, nesterov=True, weight_decay=1e-3)
    conv = ConvergenceSpec(patience=20, min_delta=1e-4, max_epochs=500)
    started = time.perf_counter()
    rows = []
    for seed in range(10):
        net = init(Network(mlp_layers([2, 16, 16, 2])), InitSpec(seed=seed))
        net, _ = train_dense(net, data, opt, conv, seed=seed)
        check = taylor_check(net, data.train)
        rows.append((seed, check.passed, check.spearman, check.bottom_decile_mean, check.top_decile_mean))
    secs = time.perf_counter() - started
    passed = sum(r[1] for r in rows)
    with capsys.disabled():
        for seed, ok, rho, lo, hi in rows:
            print(f"    seed {seed}: rho={rho:.3f} bottom={lo:.2e} top={hi:.2e} {'ok' if ok else 'miss'}")
    verdict(capsys, 4, passed >= TAYLOR_MIN_SEEDS and secs < 600,
            f"Taylor check holds in {passed}/10 seeds (need {TAYLOR_MIN_SEEDS}), {secs:.1f}s")


# -------------------------------------------------------------- criterion 5


class RedenseEntryCheck:
    """on_phase / on_phase_start hooks asserting the re-dense entry contract."""

    def __init__(self):
        self.sparse_end = None
        self.checked = 0
        self.failures = []

    def on_phase(self, net, result):
        if result.kind == SPARSE:
            self.sparse_end = (
                {k: t.data.copy() for k, t in net.parameters()},
                {n: m.bits.copy() for n, m in net.masks.items()},
                result.lr,
            )

    def on_phase_start(self, net, i, phase):
        if phase.kind != REDENSE:
            return
        weights, masks, sparse_lr = self.sparse_end
        self.checked += 1
        if net.masks:
            self.failures.append(f"phase {i}: mask still active")
        for key, t in net.parameters():
            if t.data.tobytes() != weights[key].tobytes():
                self.failures.append(f"phase {i}: {key} differs from the sparse result")
        for name, bits in masks.items():
            if (net.weights[name].data[~bits] != 0.0).any():
                self.failures.append(f"phase {i}: pruned {name} weights not 0.0")


def test_criterion_5_redense_entry(capsys, mnist):
    # live check on a synthetic run with the lr left unset
    ds = make_synthetic("concentric_rings", 600, 0.15, seed=5)
    data = TrainData(*split(ds, (0.8, 0.1, 0.1), seed=0), batch_size=32)
    hook = RedenseEntryCheck()
    net = init(Network(mlp_layers([2, 16, 2])),
               InitSpec(seed=5))
    plan = PhasePlan([Phase(DENSE, 5), Phase(SPARSE, 3, lr=0.02, sparsity=0.5), Phase(REDENSE, 3)])
    _, record = run_dsd(plan, net, data, OptimizerSpec(base_lr=0.05),
                        on_phase=hook.on_phase, on_phase_start=hook.on_phase_start)
    lr_ok = record.phases[2].lr == 0.02 * 0.1
    # the 16 comparison arms, from their artifacts: the zero-restored
    # histogram must equal the sparse-final one, and redense lr = sparse lr / 10
    arms_ok, arms = True, 0
    for run_dir in sorted((mnist["out"] / "dsd").iterdir()):
        summary = json.loads((run_dir / "summary.json").read_text())
        sparse, redense = summary["phases"]
        arms_ok &= redense["lr"] == sparse["lr"] * 0.1
        ckpt = read_checkpoint(run_dir / "phase0_sparse.dsdc")
        for rec in ckpt.layers:
            if rec.mask is not None:
                arms_ok &= bool((rec.weights[~rec.mask] == 0.0).all())
            if rec.weights is not None:
                a = (run_dir / histogram_filename(rec.name, "sparse_final")).read_text().replace("sparse_final", "X")
                b = (run_dir / histogram_filename(rec.name, "zero_restored")).read_text().replace("zero_restored", "X")
                arms_ok &= a == b
        arms += 1
    # criterion 7 applies the same hook live to its two MNIST redense entries
    ok = not hook.failures and hook.checked == 1 and lr_ok and arms_ok and arms == 16
    verdict(capsys, 5, ok, f"live redense entry clean: {not hook.failures}; default redense lr = sparse lr x 0.1: "
                           f"{lr_ok}; {arms} comparison arms consistent: {arms_ok}"
                           + (f"; {hook.failures[:3]}" if hook.failures else ""))


# -------------------------------------------------------------- criterion 6


def test_criterion_6_dsd_vs_llr(capsys, mnist):
    report, dsd, llr = mnist["report"], mnist["dsd"], mnist["llr"]
    fair = all(a.retrain_epochs() == b.retrain_epochs() == 90 for a, b in zip(dsd, llr))
    fair &= all(r.error is None for r in dsd + llr) and len(dsd) == len(llr) == 16
    d, l = report.summaries["dsd"], report.summaries["llr"]
    gate_b = d.mean <= l.mean + DSD_LLR_MARGIN
    text = (mnist["out"] / "comparison.txt").read_text()
    rows = (mnist["out"] / "comparison.csv").read_text().splitlines()
    ttests = (mnist["out"] / "comparison_ttests.csv").read_text().splitlines()
    gate_c = (
        len(rows) == 3 and len(ttests) == 2 and "Welch" in text
        and all(not math.isnan(s.sd) for s in (d, l)) and len(report.tests) == 1
    )
    t = report.tests[0][2] if report.tests else None
    with capsys.disabled():
        print("\n" + text, end="")
        print(f"    data: {mnist['label']}; wall clock {mnist['seconds'] / 60:.1f} min")
    verdict(
        capsys, 6, fair and gate_b and gate_c,
        f"fairness {fair}; DSD {d.mean:.4%} +- {d.sd:.4%} vs LLR {l.mean:.4%} +- {l.sd:.4%} "
        f"(gate: DSD <= LLR + 0.1%: {gate_b}); Welch t={t.t_statistic:.3f} p={t.p_value:.3g}"
        if t else "no t-test",
    )


# -------------------------------------------------------------- criterion 7


def test_criterion_7_iterative(capsys, mnist):
    cfg, data = mnist["cfg"], mnist["data"]
    net = load_checkpoint(mnist["out"] / "baseline" / "phase0_dense.dsdc", cfg.build_network())
    plan = PhasePlan(
        [Phase(SPARSE, 45, 0.005, 0.5), Phase(REDENSE, 45, 0.0005),
         Phase(SPARSE, 45, 0.005, 0.25), Phase(REDENSE, 45, 0.0005)],
        seed=0, excluded_layers=cfg.excluded_layers(), from_checkpoint=True,
    )
    hook = RedenseEntryCheck()
    before_second = {}

    def on_phase(network, result):
        hook.on_phase(network, result)
        if result.index == 1:
            before_second.update({k: t.data.copy() for k, t in network.parameters()})

    recomputed = []

    def on_phase_start(network, i, phase):
        hook.on_phase_start(network, i, phase)
        if i == 2:
            for name, mask in network.masks.items():
                recomputed.append(np.array_equal(mask.bits, threshold(before_second[f"{name}.W"], 0.25, name)[1].bits))

    started = time.perf_counter()
    _, record = run_dsd(plan, net, data, cfg.optimizer_spec(), None, on_phase=on_phase,
                        on_phase_start=on_phase_start, early_stop_retrain=False)
    secs = time.perf_counter() - started
    first, second = record.phases[1].val_err, record.phases[3].val_err
    ok = (all(recomputed) and len(recomputed) == 2 and len(record.phases) == 4
          and second <= first + ITER2_MARGIN and hook.checked == 2 and not hook.failures and secs < 1800)
    verdict(capsys, 7, ok, f"masks recomputed at iteration 2: {all(recomputed)}; "
                           f"{hook.checked} redense entries clean: {not hook.failures}; final val err "
                           f"iteration 1 {first:.2%}, iteration 2 {second:.2%} (gate +0.2%), {secs / 60:.1f} min")


# -------------------------------------------------------------- criterion 8


def _density(x, df):
    c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(c - (df + 1) / 2 * math.log1p(x * x / df))


def _oracle_welch(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    tail, _ = integrate.quad(_density, abs(t), math.inf, args=(df,), epsabs=1e-14, epsrel=1e-12, limit=200)
    return t, df, 2 * tail


def test_criterion_8_welch(capsys):
    rng = np.random.default_rng(808)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), int(rng.integers(2, 25)))
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), int(rng.integers(2, 25)))
        p = welch_t_test(summarize(a), summarize(b)).p_value
        worst = max(worst, abs(p - _oracle_welch(a, b)[2]))
    exact = 0
    for _ in range(100):
        # dyadic samples, integer shifts and power-of-two scales are exact in binary
        a = (rng.integers(-5000, 5000, int(rng.integers(2, 20))) / 128).tolist()
        b = (rng.integers(-5000, 5000, int(rng.integers(2, 20))) / 128).tolist()
        shift, c = int(rng.integers(-100, 100)), 2.0 ** int(rng.integers(-6, 7))
        base = welch_t_test(summarize(a), summarize(b))
        flipped = welch_t_test(summarize(b), summarize(a))
        moved = welch_t_test(summarize([x * c + shift for x in a]), summarize([x * c + shift for x in b]))
        exact += (
            flipped.t_statistic == -base.t_statistic and flipped.p_value == base.p_value
            and (moved.t_statistic, moved.degrees_of_freedom, moved.p_value)
            == (base.t_statistic, base.degrees_of_freedom, base.p_value)
        )
    secs = time.perf_counter() - started
    verdict(capsys, 8, worst < WELCH_P_TOL and exact == 100 and secs < 10,
            f"max |p - oracle p| {worst:.1e} on 100 pairs; invariances exact in {exact}/100; {secs:.1f}s")


# -------------------------------------------------------------- criterion 9


def test_criterion_9_histograms(capsys, mnist):
    excluded = set(mnist["cfg"].excluded_layers())
    problems, files = [], 0
    for run_dir in sorted((mnist["out"] / "dsd").iterdir()):
        for rec in read_checkpoint(run_dir / "input.dsdc").layers:
            if rec.weights is None:
                continue
            found = sorted(run_dir.glob(f"hist_it1_{rec.name}_*.csv"))
            if len(found) != 5:
                problems.append(f"{run_dir.name}/{rec.name}: {len(found)} files")
            for stage in STAGES:
                h = read_histogram_csv(run_dir / histogram_filename(rec.name, stage))
                files += 1
                if h.total != rec.weights.size:
                    problems.append(f"{run_dir.name}/{rec.name}/{stage}: not conserved")
                if stage == "post_prune" and rec.name not in excluded:
                    if h.zero_count != pruned_count(rec.weights.size, 0.5):
                        problems.append(f"{run_dir.name}/{rec.name}: post_prune zeros {h.zero_count}")
    verdict(capsys, 9, not problems and files == 16 * 3 * 5,
            f"{files} histogram CSVs checked, {len(problems)} problems" + (f": {problems[:3]}" if problems else ""))


# ------------------------------------------------------------- criterion 10


def test_criterion_10_determinism(capsys, tmp_path):
    started = time.perf_counter()
    cfg = CONFIGS / "rings.toml"
    codes = [cli_main(["dsd", "--config", str(cfg), "--out", str(tmp_path / r), "--seed", "3"]) for r in "ab"]
    final = [(tmp_path / r / "phase2_redense.dsdc").read_bytes() for r in "ab"]
    same = codes == [0, 0] and final[0] == final[1]

    loaded = load_checkpoint(tmp_path / "a" / "phase1_sparse.dsdc", load_config(cfg).build_network())
    save_checkpoint(loaded, tmp_path / "again.dsdc")
    round_trip = (tmp_path / "again.dsdc").read_bytes() == (tmp_path / "a" / "phase1_sparse.dsdc").read_bytes()

    # interrupt the sparse phase two epochs in, then resume
    c = load_config(cfg)
    data = c.load_data()
    plan = c.plan(seed=3)
    full, _ = run_dsd(plan, c.build_network(), data, c.optimizer_spec(), c.convergence_spec(),
                      out_dir=tmp_path / "full", checkpoint_every=2)
    dense_epochs = json.loads((tmp_path / "full" / "summary.json").read_text())["phases"][0]["epochs"]
    ckpt = read_checkpoint(tmp_path / "full" / f"resume_e{dense_epochs + 2:04d}.dsdc")
    net = load_checkpoint(tmp_path / "full" / f"resume_e{dense_epochs + 2:04d}.dsdc", c.build_network())
    resumed, _ = run_dsd(plan, net, data, c.optimizer_spec(), c.convergence_spec(), resume=ckpt.resume)
    resume_ok = ckpt.resume.phase_index == 1 and all(
        a.data.tobytes() == b.data.tobytes() for (_, a), (_, b) in zip(full.parameters(), resumed.parameters())
    )
    secs = time.perf_counter() - started
    verdict(capsys, 10, same and round_trip and resume_ok and secs < 300,
            f"rerun bit-identical: {same}; save/load round-trip exact: {round_trip}; "
            f"mid-sparse resume matches: {resume_ok}; {secs:.1f}s")
