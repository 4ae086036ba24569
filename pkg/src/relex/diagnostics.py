"""Linearity, explained-variance and weight-space alignment reports."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyWindow,
    NumericalError,
    RankOutOfRange,
    SchemaMismatch,
    UnknownStep,
    ZeroTrajectory,
)
from .spectral import linear_fit, truncated_svd
from .trajectory import build_trajectory

R2_THRESHOLD = 0.98
UNDEFINED = float("nan")


def fmt(x):
    """Fixed 17-significant-digit float formatting used by every report."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


# -- explained variance and coefficients -------------------------------------------------

def explained_variance(decomp):
    """sigma_k^2 / sum_j sigma_j^2 over the retained components."""
    s2 = np.asarray(decomp.singular_values, dtype=np.float64) ** 2
    return [float(x) for x in s2 / s2.sum()]


@dataclass(frozen=True)
class CoefficientRow:
    step: int
    component: int        # 1-based
    value: float
    explained_variance: float


def coefficient_dump(traj, r, decomp=None):
    """Rows of C_r in step-major order, annotated with explained variance."""
    if not 1 <= r <= traj.n_steps:
        raise RankOutOfRange(f"rank {r} outside [1, {traj.n_steps}]")
    if decomp is None:
        decomp = truncated_svd(traj, r, strict=False)
    ev = explained_variance(decomp)
    return [
        CoefficientRow(step, k + 1, float(decomp.coefficients[i, k]), ev[k])
        for i, step in enumerate(traj.steps)
        for k in range(r)
    ]


# -- linearity ------------------------------------------------------------------------------

@dataclass
class TensorDiagnostics:
    tensor_name: str
    r_squared: float
    slope: float
    intercept: float
    sigma_top_k: list
    explained_variance: list
    coefficient_series: list   # one list of c_t per component


@dataclass
class LinearityReport:
    records: list
    skipped: list
    threshold: float = R2_THRESHOLD
    failed: dict = field(default_factory=dict)

    @property
    def fraction_above(self):
        if not self.records:
            return UNDEFINED
        return sum(r.r_squared > self.threshold for r in self.records) / len(self.records)

    def summary(self):
        r2 = [r.r_squared for r in self.records]
        return {
            "tensors": len(self.records),
            "skipped": list(self.skipped),
            "failed": dict(self.failed),
            "threshold": self.threshold,
            "fraction_above_threshold": self.fraction_above,
            "r_squared_min": min(r2) if r2 else None,
            "r_squared_median": float(np.median(r2)) if r2 else None,
            "r_squared_mean": float(np.mean(r2)) if r2 else None,
        }

    def write_csv(self, path):
        write_csv(path, ["tensor", "r2", "slope", "intercept", "sigma1"],
                  [(r.tensor_name, r.r_squared, r.slope, r.intercept, r.sigma_top_k[0])
                   for r in sorted(self.records, key=lambda r: r.tensor_name)])


def tensor_diagnostics(traj, rank=1):
    """Rank-1 line fit plus the top-``rank`` spectrum of one trajectory."""
    rank = min(rank, traj.n_steps)
    dec = truncated_svd(traj, rank, strict=False)
    fit = linear_fit(traj.steps, dec.coefficients[:, 0])
    return TensorDiagnostics(
        traj.tensor_name, fit.r_squared, fit.a, fit.b,
        [float(s) for s in dec.singular_values],
        explained_variance(dec),
        [[float(x) for x in dec.coefficients[:, k]] for k in range(rank)],
    )


def linearity_report(series, t_cut, rank=1, threshold=R2_THRESHOLD, names=None):
    """One TensorDiagnostics per tensor with non-zero delta over the window.

    Zero-delta tensors are listed in ``skipped``; numerical failures in
    ``failed``.
    """
    steps = series.steps_upto(t_cut)
    if len(steps) < 2:
        raise EmptyWindow(f"need at least 2 observed steps <= {t_cut}, have {len(steps)}")
    report = LinearityReport([], [], threshold)
    for name in sorted(names or series.names):
        traj = build_trajectory(series, name, t_cut)
        try:
            report.records.append(tensor_diagnostics(traj, rank))
        except ZeroTrajectory:
            report.skipped.append(name)
        except NumericalError as exc:
            report.failed[name] = str(exc)
    return report


# -- alignment ---------------------------------------------------------------------------------

@dataclass
class AlignmentRecord:
    step: int
    mean_cosine: float
    mean_norm_ratio: float
    per_tensor: list   # (name, cosine, norm_ratio)


def _nanmean(xs):
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else UNDEFINED


def delta_alignment(pred_delta, true_delta):
    """(cosine, norm ratio) of two flat deltas; NaN where undefined."""
    pred_delta = np.asarray(pred_delta, dtype=np.float64)
    true_delta = np.asarray(true_delta, dtype=np.float64)
    return _alignment_from_sums(float(np.dot(pred_delta, true_delta)),
                                float(np.dot(pred_delta, pred_delta)),
                                float(np.dot(true_delta, true_delta)))


def _alignment_from_sums(dot, pp, tt):
    np_, nt = math.sqrt(pp), math.sqrt(tt)
    if np_ == 0 or nt == 0:
        cos = UNDEFINED
    else:
        # sqrt(pp * tt) is exact for pp == tt, so identical deltas give exactly 1
        prod = pp * tt
        denom = math.sqrt(prod) if 0 < prod < math.inf else np_ * nt
        cos = max(-1.0, min(1.0, dot / denom))
    ratio = UNDEFINED if nt == 0 else np_ / nt
    return cos, ratio


def _tensor_alignment(predicted, actual, base_step, step, name, chunk=1 << 20):
    dot = pp = tt = 0.0
    chunks = zip(predicted.iter_chunks(step, name, chunk),
                 actual.iter_chunks(step, name, chunk),
                 actual.iter_chunks(base_step, name, chunk))
    for p, a, b in chunks:
        dp, da = p - b, a - b
        dot += float(np.dot(dp, da))
        pp += float(np.dot(dp, dp))
        tt += float(np.dot(da, da))
    return _alignment_from_sums(dot, pp, tt)


def alignment_report(predicted_series, actual_series, steps, base_step=None):
    """Per-step mean per-tensor cosine and norm ratio of predicted vs actual deltas.

    Deltas are taken against ``base_step`` of the actual series (its base by
    default). Means are unweighted over tensors and skip undefined values.
    """
    pred = {s.name: s for s in predicted_series.schema}
    act = {s.name: s for s in actual_series.schema}
    for name in sorted(set(pred) | set(act)):
        if pred.get(name) != act.get(name):
            raise SchemaMismatch(name, "-", "predicted and actual schemas differ")
    base_step = actual_series.base.step if base_step is None else int(base_step)
    actual_series.manifest(base_step)
    records = []
    for step in steps:
        for s in (predicted_series, actual_series):
            if step not in s.steps:
                raise UnknownStep(f"step {step} missing from {s.root_path}")
        per = [(name, *_tensor_alignment(predicted_series, actual_series, base_step, step, name))
               for name in sorted(actual_series.names)]
        records.append(AlignmentRecord(int(step), _nanmean([c for _, c, _ in per]),
                                       _nanmean([r for _, _, r in per]), per))
    return records


def write_alignment(records, out_dir):
    out_dir = Path(out_dir)
    write_csv(out_dir / "alignment.csv", ["tensor", "step", "cosine", "norm_ratio"],
              [(name, rec.step, c, r) for rec in records for name, c, r in rec.per_tensor])
    write_csv(out_dir / "alignment_summary.csv", ["step", "mean_cosine", "mean_norm_ratio"],
              [(rec.step, rec.mean_cosine, rec.mean_norm_ratio) for rec in records])
