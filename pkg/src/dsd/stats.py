"""Multi-seed harness and the unpaired (Welch) t-test used to compare arms.

The Student-t CDF goes through the regularized incomplete beta function,
evaluated with a modified-Lentz continued fraction, so no statistics
package is needed.  Sample moments, t**2 and the Welch-Satterthwaite
degrees of freedom are computed in exact rational arithmetic from the
float inputs, which makes the test exactly antisymmetric and exactly
invariant to shifting or scaling both samples whenever the transformed
values are themselves representable.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

from .errors import ContractError

log = logging.getLogger(__name__)

LOW_POWER_N = 5
ALTERNATIVES = ("two-sided", "less", "greater")


# ------------------------------------------------------ special functions


def _betacf(a: float, b: float, x: float, tol: float, max_iter: int) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError(f"betainc needs a, b > 0, got {a}, {b}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the fraction converges fast only on this side of the mode
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x, tol, max_iter) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x, tol, max_iter) / b


def _t_tail_x(t_sq: float, df: float) -> float:
    return df / (df + t_sq)


def student_t_cdf(t: float, df: float) -> float:
    """P(T <= t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError(f"df must be positive, got {df}")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = 0.5 * betainc(df / 2.0, 0.5, _t_tail_x(t * t, df))
    return 1.0 - tail if t > 0 else tail


# --------------------------------------------------------------- summaries


@dataclass(frozen=True)
class SampleSummary:
    n: int
    mean: float
    sd: float  # n-1 denominator; nan when n == 1
    values: tuple[float, ...] = ()

    def fmt(self, scale: float = 100.0, suffix: str = "%") -> tuple[str, str]:
        sd = "undefined" if math.isnan(self.sd) else f"{self.sd * scale:.2f}{suffix}"
        return f"{self.mean * scale:.2f}{suffix}", sd


def _exact_moments(values) -> tuple[int, Fraction, Fraction | None]:
    xs = [Fraction(float(v)) for v in values]
    n = len(xs)
    mean = sum(xs, Fraction(0)) / n
    var = sum(((x - mean) ** 2 for x in xs), Fraction(0)) / (n - 1) if n > 1 else None
    return n, mean, var


def summarize(values: Sequence[float]) -> SampleSummary:
    values = [float(v) for v in values]
    if not values:
        raise ContractError("summarize() of an empty sample")
    n, mean, var = _exact_moments(values)
    sd = math.sqrt(float(var)) if var is not None else math.nan
    return SampleSummary(n, float(mean), sd, tuple(values))


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    alternative: str = "two-sided"


def welch_t_test(a: SampleSummary, b: SampleSummary, alternative: str = "two-sided") -> TTestResult:
    """Unequal-variance two-sample t-test of mean(a) against mean(b).

    ``alternative="less"`` tests mean(a) < mean(b) (e.g. DSD error below
    LLR error).  If both samples have zero variance, t is 0 for equal means
    and +-inf otherwise, with df = na + nb - 2.
    """
    if alternative not in ALTERNATIVES:
        raise ContractError(f"alternative must be one of {ALTERNATIVES}")
    if a.n < 2 or b.n < 2:
        raise ContractError(f"welch_t_test needs n >= 2 in both samples, got {a.n} and {b.n}")
    if len(a.values) != a.n or len(b.values) != b.n:
        raise ContractError("welch_t_test needs the raw sample values")
    na, ma, va = _exact_moments(a.values)
    nb, mb, vb = _exact_moments(b.values)
    diff = ma - mb
    sa, sb = va / na, vb / nb
    se_sq = sa + sb

    if se_sq == 0:
        df = float(na + nb - 2)
        if diff == 0:
            t, x = 0.0, 1.0
        else:
            t, x = math.copysign(math.inf, diff), 0.0
    else:
        t_sq = diff * diff / se_sq
        df_exact = se_sq * se_sq / (sa * sa / (na - 1) + sb * sb / (nb - 1))
        df = float(df_exact)
        t = math.copysign(math.sqrt(float(t_sq)), diff) if diff else 0.0
        x = float(df_exact / (df_exact + t_sq))

    two_sided = betainc(df / 2.0, 0.5, x) if x < 1.0 else 1.0
    if alternative == "two-sided":
        p = two_sided
    else:
        # one tail holds half the two-sided mass
        lower = 0.5 * two_sided if t <= 0 else 1.0 - 0.5 * two_sided
        p = lower if alternative == "less" else 1.0 - lower
        if t == 0:
            p = 0.5
    return TTestResult(t, df, min(1.0, max(0.0, p)), alternative)


# ----------------------------------------------------------------- harness


def repeat_runs(run_fn: Callable, seeds: Sequence[int], jobs: int = 1) -> list:
    """Call ``run_fn(seed)`` once per seed, results in seed order.

    ``run_fn`` returns a :class:`~dsd.flow.RunRecord`.  An exception in one
    run does not stop the others; that slot gets a record with ``error``
    set and no test error.  With ``jobs > 1`` runs go to a process pool,
    so ``run_fn`` must be picklable.
    """
    from .flow import RunRecord

    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise ContractError(f"seeds must be distinct, got {seeds}")

    def failed(seed, exc):
        log.error("run with seed %s failed: %s", seed, exc)
        return RunRecord(seed=seed, error=f"{type(exc).__name__}: {exc}")

    if jobs <= 1:
        out = []
        for seed in seeds:
            try:
                out.append(run_fn(seed))
            except Exception as exc:  # noqa: BLE001 -- recorded, not swallowed
                out.append(failed(seed, exc))
        return out

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_fn, s) for s in seeds]
        out = []
        for seed, fut in zip(seeds, futures):
            try:
                out.append(fut.result())
            except Exception as exc:  # noqa: BLE001
                out.append(failed(seed, exc))
        return out


# ------------------------------------------------------------------ report


@dataclass
class ComparisonReport:
    summaries: dict[str, SampleSummary]
    tests: list[tuple[str, str, TTestResult]] = field(default_factory=list)
    failures: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def low_power(self) -> bool:
        return any(s.n < LOW_POWER_N for s in self.summaries.values())

    def write(self, out_dir, stem: str = "comparison") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows_path = out / f"{stem}.csv"
        with open(rows_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["method", "n", "mean_err", "sd_err"])
            for name, s in self.summaries.items():
                w.writerow([name, s.n, repr(s.mean), "" if math.isnan(s.sd) else repr(s.sd)])
        tests_path = out / f"{stem}_ttests.csv"
        with open(tests_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["method_a", "method_b", "t", "df", "p"])
            for a, b, r in self.tests:
                w.writerow([a, b, repr(r.t_statistic), repr(r.degrees_of_freedom), repr(r.p_value)])
        text_path = out / f"{stem}.txt"
        text_path.write_text(self.render())
        return [rows_path, tests_path, text_path]

    def render(self) -> str:
        lines = [f"{'method':<28} {'n':>3} {'avg err':>9} {'sd err':>10}"]
        for name, s in self.summaries.items():
            mean, sd = s.fmt()
            incomplete = f"  ({self.failures[name]} failed runs)" if self.failures.get(name) else ""
            lines.append(f"{name:<28} {s.n:>3} {mean:>9} {sd:>10}{incomplete}")
        if self.tests:
            lines.append("")
            lines.append("Welch t-test (unpaired)")
            for a, b, r in self.tests:
                lines.append(
                    f"  {a} vs {b}: t={r.t_statistic:.4f} df={r.degrees_of_freedom:.2f} "
                    f"p={r.p_value:.3g} ({r.alternative})"
                )
        if self.low_power:
            lines.append("")
            lines.append(f"WARNING: low statistical power (fewer than {LOW_POWER_N} runs in an arm)")
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"


def compare_arms(
    arms: dict[str, Sequence[float | None]],
    pairs: Sequence[tuple[str, str]],
    alternative: str = "two-sided",
) -> ComparisonReport:
    """Summarise each arm and t-test each requested pair.

    ``None`` entries mark failed runs; they are dropped and counted.
    Pairs where either side has fewer than two values are skipped with a
    note rather than raising.
    """
    summaries, failures = {}, {}
    for name, values in arms.items():
        ok = [v for v in values if v is not None]
        failures[name] = len(values) - len(ok)
        if ok:
            summaries[name] = summarize(ok)
    report = ComparisonReport(summaries, failures=failures)
    for a, b in pairs:
        sa, sb = summaries.get(a), summaries.get(b)
        if sa is None or sb is None or sa.n < 2 or sb.n < 2:
            report.notes.append(f"t-test {a} vs {b} skipped: needs at least 2 runs per arm")
            continue
        report.tests.append((a, b, welch_t_test(sa, sb, alternative)))
    return report
