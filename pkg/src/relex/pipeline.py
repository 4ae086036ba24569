"""End-to-end drivers behind the command line.

Every driver works tensor by tensor: build the trajectory, fit, and stream
the prediction into the output blobs, so peak memory is bounded by one
tensor's working set rather than the model size. Tensors may run on a
thread pool; results are merged in tensor-name order, so the worker count
never changes the output.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import store
from .diagnostics import (
    R2_THRESHOLD,
    LinearityReport,
    alignment_report,
    fmt,
    tensor_diagnostics,
    write_alignment,
    write_csv,
    write_json,
)
from .errors import (
    ConfigError,
    EmptyWindow,
    RelexError,
    UnknownStep,
    ValidationError,
    ZeroTrajectory,
)
from .extrapolate import (
    alpharl_extrapolate,
    expo,
    fit_rank1,
    fit_subspace,
    hat_weights,
    reconstruct_rank_r,
    weight_extrapolate,
)
from .spectral import GramCache, truncated_svd
from .trajectory import DENSE_THRESHOLD, build_trajectory, chunk_width

METHODS = ("relex", "raw", "expo", "weight", "alpharl")
FITS = ("linear", "poly3")
SPACES = ("svd", "raw")


@dataclass
class RunOptions:
    t_cut: int
    targets: list
    method: str = "relex"
    rank: int = 1
    fit: str = "linear"
    space: str = "svd"
    alpha: float = None
    t0: int = None
    workers: int = 1
    dense_threshold: int = DENSE_THRESHOLD
    save_models: bool = True

    def __post_init__(self):
        self.targets = sorted({int(t) for t in self.targets})
        if not self.targets:
            raise ConfigError("need at least one target step")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.fit not in FITS:
            raise ConfigError(f"fit must be one of {FITS}")
        if self.space not in SPACES:
            raise ConfigError(f"space must be one of {SPACES}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.method == "expo" and self.alpha is None:
            raise ConfigError("method expo needs --alpha")
        if self.method == "weight" and self.t0 is None:
            raise ConfigError("method weight needs --t0")

    @property
    def uses_svd(self):
        return self.method == "relex" and self.space == "svd"


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _tagged(name, fn, *args):
    try:
        return fn(*args)
    except RelexError as exc:
        if exc.tensor is None:
            exc.tensor = name
        raise


def _window(series, t_cut):
    steps = series.steps_upto(t_cut)
    if not steps:
        raise EmptyWindow(f"no observed step <= {t_cut} in {series.root_path}")
    return steps


def _check_targets(series, opts):
    if opts.targets[0] <= series.base.step:
        raise ValidationError(f"targets must exceed the base step {series.base.step}")


# -- per-tensor predictors ---------------------------------------------------------------

class _Predictor:
    """Per-tensor prediction: ``info`` for the summary, ``chunks(T)`` for output."""

    def __init__(self, series, name, width):
        self.series = series
        self.name = name
        self.width = width
        self.info = {}

    def base_chunks(self):
        return self.series.iter_chunks(self.series.base.step, self.name, self.width)

    def chunks(self, T):
        # zero-delta tensors and anything without a model: copy the base
        return self.base_chunks()


class _SubspacePredictor(_Predictor):
    def __init__(self, series, name, width, model):
        super().__init__(series, name, width)
        self.model = model

    def chunks(self, T):
        return self.model.predict_chunks(self.base_chunks(), T)


class _RawPredictor(_Predictor):
    def __init__(self, series, name, width, traj, fit):
        super().__init__(series, name, width)
        self.traj, self.fit = traj, fit

    def chunks(self, T):
        h = hat_weights(self.traj.steps, T, self.fit)
        base = self.base_chunks()
        for _, _, block in self.traj.iter_column_chunks(self.width):
            yield next(base) + h @ block


class _TwoPointPredictor(_Predictor):
    """``combine(theta_p, theta_q, T)`` applied chunk by chunk."""

    def __init__(self, series, name, width, p, q, combine):
        super().__init__(series, name, width)
        self.p, self.q, self.combine = p, q, combine

    def chunks(self, T):
        a = self.series.iter_chunks(self.p, self.name, self.width)
        b = self.series.iter_chunks(self.q, self.name, self.width)
        for x, y in zip(a, b):
            yield self.combine(x, y, T)


class _VectorPredictor(_Predictor):
    def __init__(self, series, name, width, make):
        super().__init__(series, name, width)
        self.make = make

    def chunks(self, T):
        v = self.make(T)
        for start in range(0, v.size, self.width):
            yield v[start:start + self.width]


def _rank1_info(model):
    return {"r_squared": model.fit.r_squared, "slope": model.fit.a,
            "intercept": model.fit.b, "sigma1": model.sigma1}


def make_predictor(series, name, opts, cache=None, models_dir=None):
    """Fit one tensor for ``opts`` and return its predictor."""
    spec = series.spec(name)
    t_cut = opts.t_cut
    steps = _window(series, t_cut)
    last = steps[-1]

    if opts.method == "expo":
        p = _TwoPointPredictor(series, name, 0, series.base.step, last,
                               lambda x, y, T: expo(x, y, opts.alpha))
    elif opts.method == "weight":
        t0 = int(opts.t0)
        if t0 not in series.steps:
            raise UnknownStep(f"t0 = {t0} is not a step of the series")
        if t0 >= last:
            raise ValidationError(f"t0 = {t0} must precede the last observed step {last} <= t_cut")
        p = _TwoPointPredictor(series, name, 0, t0, last,
                               lambda x, y, T: weight_extrapolate(x, y, t0, last, T))
    elif opts.method == "alpharl":
        p = _VectorPredictor(series, name, 0, lambda T: alpharl_extrapolate(series, name, t_cut, T))
    else:
        traj = build_trajectory(series, name, t_cut, opts.dense_threshold)
        width = traj.chunk_width()
        if opts.method == "raw" or opts.space == "raw":
            p = _RawPredictor(series, name, width, traj, opts.fit)
        else:
            gram = cache.extend(traj).gram_for(traj) if cache is not None else None
            try:
                if opts.rank == 1 and opts.fit == "linear":
                    model = fit_rank1(traj, gram=gram)
                    if models_dir is not None:
                        model.save(models_dir)
                    p = _SubspacePredictor(series, name, width, model)
                    p.info = _rank1_info(model)
                else:
                    rank = min(opts.rank, traj.n_steps)
                    model = fit_subspace(traj, rank, opts.fit, gram=gram)
                    p = _SubspacePredictor(series, name, width, model)
                    r1 = model.fits[0]
                    # columns of C = U diag(sigma) have norm sigma_k
                    p.info = {"sigma": [float(x) for x in np.linalg.norm(model.coefficients, axis=0)]}
                    if opts.fit == "linear":
                        p.info.update(r_squared=r1.r_squared, slope=r1.a, intercept=r1.b)
            except ZeroTrajectory:
                p = _Predictor(series, name, width)
                p.info = {"skipped": "zero delta"}
        return p
    p.width = chunk_width(1, spec.element_count)
    return p


def _write_prediction(predictor, spec, root, steps):
    sums = {}
    for T in steps:
        sums[T] = store.write_blob(store.blob_path(root, T, spec.name), spec, predictor.chunks(T))
    return sums


def _prepare_output(series, out, targets):
    out = Path(out)
    for T in targets:
        store.step_dir(out, T).mkdir(parents=True, exist_ok=True)
    store.copy_checkpoint(series, series.base.step, out)
    return out


def _finish_output(series, out, targets, sums_by_tensor):
    for T in targets:
        store.write_manifest(out, T, series.schema, {n: s[T] for n, s in sums_by_tensor.items()})
    store.write_index(out, series.base.step, targets, series.schema)


def _r2_summary(infos, threshold=R2_THRESHOLD):
    r2 = [i["r_squared"] for i in infos.values() if "r_squared" in i]
    if not r2:
        return {"count": 0}
    return {
        "count": len(r2),
        "min": min(r2),
        "median": float(np.median(r2)),
        "mean": float(np.mean(r2)),
        "max": max(r2),
        "threshold": threshold,
        "fraction_above_threshold": sum(x > threshold for x in r2) / len(r2),
    }


# -- extrapolate --------------------------------------------------------------------------------

def run_extrapolate(series, opts, out):
    """Write one predicted checkpoint per target; returns the summary dict.

    The output directory is itself a series: the base copied verbatim and
    one checkpoint per target, so it can be opened and aligned directly.
    """
    t_start = time.perf_counter()
    steps = _window(series, opts.t_cut)
    _check_targets(series, opts)
    out = _prepare_output(series, out, opts.targets)
    models_dir = out / "models" if opts.uses_svd and opts.rank == 1 and opts.fit == "linear" \
        and opts.save_models else None

    def one(spec):
        def work():
            p = make_predictor(series, spec.name, opts, models_dir=models_dir)
            return p.info, _write_prediction(p, spec, out, opts.targets)
        return _tagged(spec.name, work)

    specs = sorted(series.schema, key=lambda s: s.name)
    results = _map(one, specs, opts.workers)
    infos = {s.name: info for s, (info, _) in zip(specs, results)}
    _finish_output(series, out, opts.targets, {s.name: sums for s, (_, sums) in zip(specs, results)})

    summary = {
        "method": opts.method,
        "rank": opts.rank,
        "fit": opts.fit,
        "space": opts.space,
        "alpha": opts.alpha,
        "t0": opts.t0,
        "t_cut": opts.t_cut,
        "last_observed_step": steps[-1],
        "observed_steps_used": steps,
        "targets": opts.targets,
        "cost_proxy": {str(T): opts.t_cut / T for T in opts.targets},
        "tensors": infos,
        "skipped": sorted(n for n, i in infos.items() if "skipped" in i),
        "r_squared": _r2_summary(infos),
    }
    write_json(out / "summary.json", summary)
    write_json(out / "timing.json", {"wall_seconds": time.perf_counter() - t_start})
    return summary


# -- sweep ----------------------------------------------------------------------------------------

@dataclass
class SweepGrid:
    t_cuts: list
    targets: list
    path_pattern: str = "t_cut_{t_cut}/step_{target}"

    def __post_init__(self):
        self.t_cuts = sorted({int(t) for t in self.t_cuts})
        self.targets = sorted({int(t) for t in self.targets})
        if not self.t_cuts or not self.targets:
            raise ConfigError("sweep grid needs non-empty t_cuts and targets")

    @staticmethod
    def kind(t_cut, target):
        return "reconstruction" if target <= t_cut else "extrapolation"

    def cells(self):
        return [(c, t) for c in self.t_cuts for t in self.targets]


@dataclass
class _SweepTensorResult:
    infos: dict = field(default_factory=dict)    # t_cut -> info
    sums: dict = field(default_factory=dict)     # t_cut -> {target: crc}
    errors: dict = field(default_factory=dict)   # t_cut -> exception


def run_sweep(series, grid, opts, out, use_cache=True):
    """Fill every (t_cut, target) cell; failed t_cuts are recorded, not fatal.

    Each t_cut writes a series under ``out/t_cut_<t_cut>``. With
    ``use_cache`` one Gram cache per tensor is grown across the ascending
    t_cuts; the tiled Gram kernel makes the result bit-identical to
    recomputing each cutoff from scratch.
    """
    out = Path(out)
    _check_targets(series, opts)
    valid, errors = [], {}
    for c in grid.t_cuts:
        try:
            _window(series, c)
            valid.append(c)
        except RelexError as exc:
            errors[c] = exc
    for c in valid:
        _prepare_output(series, out / f"t_cut_{c}", grid.targets)

    def one(spec):
        res = _SweepTensorResult()
        cache = GramCache() if use_cache and opts.uses_svd else None
        for c in valid:
            cell = RunOptions(**{**opts.__dict__, "t_cut": c, "targets": grid.targets})
            try:
                p = _tagged(spec.name, make_predictor, series, spec.name, cell, cache)
                res.sums[c] = _tagged(spec.name, _write_prediction, p, spec,
                                      out / f"t_cut_{c}", grid.targets)
                res.infos[c] = p.info
            except RelexError as exc:
                res.errors[c] = exc
        return res

    specs = sorted(series.schema, key=lambda s: s.name)
    results = dict(zip((s.name for s in specs), _map(one, specs, opts.workers)))

    rows, status = [], {}
    for c in grid.t_cuts:
        failure = errors.get(c)
        if failure is None:
            for name in sorted(results):
                if c in results[name].errors:
                    failure = results[name].errors[c]
                    break
        if failure is None:
            _finish_output(series, out / f"t_cut_{c}", grid.targets,
                           {n: r.sums[c] for n, r in results.items()})
            infos = {n: r.infos[c] for n, r in results.items()}
            write_json(out / f"t_cut_{c}" / "summary.json",
                       {"t_cut": c, "targets": grid.targets, "tensors": infos,
                        "r_squared": _r2_summary(infos)})
        status[c] = failure
        r2 = _r2_summary({n: r.infos.get(c, {}) for n, r in results.items()}) if failure is None else {}
        for target in grid.targets:
            rows.append((
                c, target, grid.kind(c, target),
                "ok" if failure is None else "failed",
                grid.path_pattern.format(t_cut=c, target=target) if failure is None else "",
                r2.get("median", math.nan), r2.get("fraction_above_threshold", math.nan),
                "" if failure is None else describe_error(failure),
            ))
    write_csv(out / "grid.csv",
              ["t_cut", "target", "kind", "status", "path", "r2_median", "fraction_above", "error"],
              rows)
    return rows, {c: e for c, e in status.items() if e is not None}


def describe_error(exc):
    msg = str(exc)
    if exc.tensor and exc.tensor not in msg:
        msg = f"tensor {exc.tensor}: {msg}"
    return f"{type(exc).__name__}: {msg}"


# -- reconstruct -------------------------------------------------------------------------------

def run_reconstruct(series, t_cut, rank, out, steps=None, workers=1, dense_threshold=DENSE_THRESHOLD):
    """Rank-``rank`` reconstruction of the observed checkpoints <= ``t_cut``."""
    window = _window(series, t_cut)
    steps = window if not steps else sorted({int(s) for s in steps})
    for s in steps:
        if s not in window:
            raise UnknownStep(f"step {s} is not observed within t_cut = {t_cut}")
    out = _prepare_output(series, out, steps)

    def one(spec):
        def work():
            traj = build_trajectory(series, spec.name, t_cut, dense_threshold)
            r = min(rank, traj.n_steps)
            try:
                dec = truncated_svd(traj, r, strict=False)
            except ZeroTrajectory:
                dec = None
            sums = {}
            base = series.read_tensor(series.base.step, spec.name)
            for s in steps:
                values = base if dec is None else reconstruct_rank_r(
                    traj, base, r, traj.steps.index(s), decomp=dec)
                sums[s] = store.write_blob(store.blob_path(out, s, spec.name), spec, values)
            return sums
        return _tagged(spec.name, work)

    specs = sorted(series.schema, key=lambda s: s.name)
    _finish_output(series, out, steps, dict(zip((s.name for s in specs), _map(one, specs, workers))))
    summary = {"t_cut": t_cut, "rank": rank, "steps": steps}
    write_json(out / "summary.json", summary)
    return summary


# -- diagnose ----------------------------------------------------------------------------------

def run_diagnose(series, t_cut, rank, out, workers=1, threshold=R2_THRESHOLD,
                 dense_threshold=DENSE_THRESHOLD):
    """Linearity, explained-variance and coefficient reports for every tensor."""
    steps = _window(series, t_cut)
    if len(steps) < 2:
        raise EmptyWindow(f"need at least 2 observed steps <= {t_cut}, have {len(steps)}")
    out = Path(out)

    def one(name):
        traj = build_trajectory(series, name, t_cut, dense_threshold)
        try:
            return _tagged(name, tensor_diagnostics, traj, rank)
        except ZeroTrajectory:
            return None

    names = sorted(series.names)
    report = LinearityReport([], [], threshold)
    for name, rec in zip(names, _map(one, names, workers)):
        if rec is None:
            report.skipped.append(name)
        else:
            report.records.append(rec)
    report.write_csv(out / "linearity.csv")
    write_csv(out / "explained_variance.csv", ["tensor", "component", "sigma", "explained_variance"],
              [(r.tensor_name, k + 1, s, ev)
               for r in report.records
               for k, (s, ev) in enumerate(zip(r.sigma_top_k, r.explained_variance))])
    write_csv(out / "coefficients.csv", ["tensor", "step", "component", "value", "explained_variance"],
              [(r.tensor_name, step, k + 1, series_k[i], r.explained_variance[k])
               for r in report.records
               for i, step in enumerate(steps)
               for k, series_k in enumerate(r.coefficient_series)])
    summary = report.summary()
    summary.update(t_cut=t_cut, rank=rank, steps=steps)
    write_json(out / "diagnose_summary.json", summary)
    return report


# -- align ---------------------------------------------------------------------------------------

def run_align(predicted, actual, out, steps=None, base_step=None):
    if not steps:
        steps = sorted(set(predicted.observed_steps) & set(actual.observed_steps))
        if not steps:
            raise UnknownStep("predicted and actual series share no observed step")
    records = alignment_report(predicted, actual, steps, base_step)
    write_alignment(records, out)
    write_json(Path(out) / "alignment_summary.json",
               {"steps": [r.step for r in records],
                "mean_cosine": [r.mean_cosine for r in records],
                "mean_norm_ratio": [r.mean_norm_ratio for r in records]})
    return records


# -- inspect ---------------------------------------------------------------------------------------

def describe_series(series):
    return {
        "root": str(series.root_path),
        "base_step": series.base.step,
        "observed_steps": list(series.observed_steps),
        "tensors": [{**s.to_json(), "elements": s.element_count} for s in series.schema],
        "total_elements": sum(s.element_count for s in series.schema),
    }
