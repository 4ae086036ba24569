"""Checkpoint reconstruction and extrapolation from a trajectory.

``fit_rank1`` + ``predict`` is the rank-1 method: one trajectory SVD per
tensor, a straight line through the top coefficient series, and the
prediction ``theta_0 + (a T + b) v1``. The remaining functions are the
ablation variants (raw space, rank r, polynomial fits) and the two-endpoint
and per-checkpoint baselines.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadStepIndex,
    DegenerateInterval,
    DimensionMismatch,
    EmptyWindow,
    NotAMatrix,
    PowerIterationStall,
    RankOutOfRange,
    TooFewPoints,
    ValidationError,
)
from .spectral import LinearFit, fit_curve, linear_fit, pls1_fit, truncated_svd, _poly_design


@dataclass
class ExtrapolationConfig:
    t_cut: int
    target_steps: list
    rank: int = 1
    fit_kind: str = "linear"   # "linear" or "polyN"
    space: str = "svd"         # "svd" or "raw"

    def __post_init__(self):
        if self.rank < 1:
            raise ValidationError("rank must be >= 1")
        if any(int(t) <= 0 for t in self.target_steps):
            raise ValidationError("target steps must be positive")
        if self.space not in ("svd", "raw"):
            raise ValidationError(f"space must be 'svd' or 'raw', not {self.space!r}")
        if self.fit_kind != "linear" and not str(self.fit_kind).startswith("poly"):
            raise ValidationError(f"unknown fit kind {self.fit_kind!r}")


def _check_base(base, d):
    base = np.asarray(base, dtype=np.float64).reshape(-1)
    if base.size != d:
        raise DimensionMismatch(f"base has {base.size} elements, trajectory has {d}")
    return base


# -- rank-1 model ----------------------------------------------------------------

@dataclass
class Rank1Model:
    tensor_name: str
    v1: np.ndarray
    sigma1: float
    fit: LinearFit
    steps: tuple
    coefficients: np.ndarray = field(repr=False)

    def coefficient_at(self, T):
        return self.fit.a * float(T) + self.fit.b

    def predict(self, base, T):
        return predict(self, base, T)

    def predict_chunks(self, base_chunks, T):
        """Stream ``base + c_T v1`` chunk by chunk alongside ``base_chunks``."""
        c = self.coefficient_at(T)
        start = 0
        for chunk in base_chunks:
            stop = start + chunk.size
            yield chunk + c * self.v1[start:stop]
            start = stop

    # .r1m layout (little-endian float64):
    #   T, d, steps[T], coefficients[T], a, b, r_squared, sigma1, v1[d]
    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        T, d = len(self.steps), self.v1.size
        head = np.array([T, d, *self.steps, *self.coefficients,
                         self.fit.a, self.fit.b, self.fit.r_squared, self.sigma1], dtype="<f8")
        path = directory / f"{self.tensor_name}.r1m"
        with open(path, "wb") as fh:
            fh.write(head.tobytes())
            # tofile streams from the array; tobytes would copy all of v1
            np.ascontiguousarray(self.v1, dtype="<f8").tofile(fh)
        sidecar = {
            "tensor": self.tensor_name, "T": T, "d": d,
            "a": self.fit.a, "b": self.fit.b, "r_squared": self.fit.r_squared,
            "sigma1": self.sigma1, "steps": list(self.steps),
        }
        with open(directory / f"{self.tensor_name}.json", "w") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        raw = np.fromfile(path, dtype="<f8")
        T, d = int(raw[0]), int(raw[1])
        if raw.size != 2 + 2 * T + 4 + d:
            raise ValidationError(f"{path}: size does not match header (T={T}, d={d})")
        steps = tuple(int(s) for s in raw[2:2 + T])
        coeffs = raw[2 + T:2 + 2 * T].copy()
        a, b, r2, sigma1 = (float(x) for x in raw[2 + 2 * T:6 + 2 * T])
        v1 = raw[6 + 2 * T:].copy()
        name = path.name[: -len(".r1m")]
        return cls(name, v1, sigma1, LinearFit(a, b, r2), steps, coeffs)


def fit_rank1(traj, gram=None):
    """Top direction v1 of the trajectory and a line through its coefficients.

    The line is fit against the true step values, not 1..T ordinals.
    """
    if traj.n_steps < 2:
        raise TooFewPoints(f"{traj.tensor_name}: need at least 2 observed steps, have {traj.n_steps}")
    dec = truncated_svd(traj, 1, gram=gram)
    c = dec.coefficients[:, 0].copy()
    fit = linear_fit(traj.steps, c)
    return Rank1Model(traj.tensor_name, dec.right_vectors[0], float(dec.singular_values[0]),
                      fit, traj.steps, c)


def predict(model, base, T):
    """``base + (a T + b) v1`` in float64."""
    if T <= 0:
        raise ValidationError("target step must be positive")
    base = _check_base(base, model.v1.size)
    return base + model.coefficient_at(T) * model.v1


# -- reconstruction and ablations --------------------------------------------------

def reconstruct_rank_r(traj, base, r, step_index, decomp=None):
    """``base + C_r[i] V_r``: rank-r reconstruction of observed row ``i``."""
    base = _check_base(base, traj.d)
    if not 1 <= r <= traj.n_steps:
        raise RankOutOfRange(f"rank {r} outside [1, {traj.n_steps}]")
    if not -traj.n_steps <= step_index < traj.n_steps:
        raise BadStepIndex(f"step index {step_index} out of range for {traj.n_steps} rows")
    if decomp is None:
        decomp = truncated_svd(traj, r, strict=False)
    return base + decomp.coefficients[step_index, :r] @ decomp.right_vectors[:r]


@dataclass
class SubspaceModel:
    """Rank-r generalisation of Rank1Model with arbitrary per-component fits."""

    tensor_name: str
    directions: np.ndarray   # (r, d)
    fits: list
    steps: tuple
    coefficients: np.ndarray  # (T, r)

    def coefficients_at(self, T):
        return np.array([float(f(T)) for f in self.fits])

    def predict(self, base, T):
        base = _check_base(base, self.directions.shape[1])
        return base + self.coefficients_at(T) @ self.directions

    def predict_chunks(self, base_chunks, T):
        c = self.coefficients_at(T)
        start = 0
        for chunk in base_chunks:
            stop = start + chunk.size
            yield chunk + c @ self.directions[:, start:stop]
            start = stop


def fit_subspace(traj, rank=1, fit_kind="linear", gram=None):
    """Top-``rank`` directions with an independent curve per coefficient series."""
    if traj.n_steps < 2:
        raise TooFewPoints(f"{traj.tensor_name}: need at least 2 observed steps")
    dec = truncated_svd(traj, rank, gram=gram, strict=False)
    fits = [fit_curve(traj.steps, dec.coefficients[:, k], fit_kind) for k in range(rank)]
    return SubspaceModel(traj.tensor_name, dec.right_vectors, fits, traj.steps, dec.coefficients)


def hat_weights(steps, T, fit_kind="linear"):
    """Weights h with fitted(T) = sum_t h_t y_t for a least-squares fit over ``steps``.

    Both fits are linear smoothers, so a per-element raw-space fit over a
    whole trajectory is one weighted sum of its rows.
    """
    t = np.asarray(steps, dtype=np.float64)
    if t.size < 2:
        raise TooFewPoints("need at least 2 observed steps")
    if fit_kind == "linear":
        dt = t - t.mean()
        sxx = float(np.dot(dt, dt))
        return dt * (float(T) - t.mean()) / sxx + 1.0 / t.size
    order = int(str(fit_kind)[4:] or 3)
    if t.size < order + 1:
        raise TooFewPoints(f"order {order} needs at least {order + 1} points")
    lo, hi = float(t.min()), float(t.max())
    center, scale = 0.5 * (hi + lo), 0.5 * (hi - lo)
    V = _poly_design(t, order, center, scale)
    phi = _poly_design([float(T)], order, center, scale)[0]
    return np.linalg.solve(V.T @ V, phi) @ V.T


def extrapolate_raw(traj, base, T, fit_kind="linear"):
    """Fit every element's own curve over all observed steps, evaluate at T."""
    if traj.n_steps < 2:
        raise TooFewPoints(f"{traj.tensor_name}: need at least 2 observed steps")
    base = _check_base(base, traj.d)
    h = hat_weights(traj.steps, T, fit_kind)
    out = base.copy()
    for start, stop, block in traj.iter_column_chunks():
        out[start:stop] += h @ block
    return out


def iter_raw_prediction(traj, T, fit_kind="linear"):
    """Streaming form of ``extrapolate_raw`` for a series-backed trajectory."""
    h = hat_weights(traj.steps, T, fit_kind)
    for _, _, block, base in traj.iter_column_chunks(with_base=True):
        yield base + h @ block


# -- two-endpoint baselines ----------------------------------------------------------

def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"shapes differ: {x.shape} vs {y.shape}")
    return x, y


def expo(base, theta_cut, alpha):
    """theta_cut + alpha (theta_cut - theta_0).

    Evaluated as ``(1 + alpha) theta_cut - alpha theta_0`` so that alpha = 0
    and alpha = -1 return the endpoints bit for bit.
    """
    base, theta_cut = _pair(base, theta_cut)
    alpha = float(alpha)
    return (1.0 + alpha) * theta_cut - alpha * base


def weight_extrapolate(theta_t0, theta_cut, t0, t_cut, T):
    """Straight line through two checkpoints, evaluated at step T.

    Written as ``(1 - w) theta_t0 + w theta_cut`` with
    ``w = (T - t0) / (t_cut - t0)``, which is exact at both endpoints.
    """
    theta_t0, theta_cut = _pair(theta_t0, theta_cut)
    if t_cut == t0:
        raise DegenerateInterval("t_cut must differ from t0")
    w = (T - t0) / (t_cut - t0)
    return (1.0 - w) * theta_t0 + w * theta_cut


# -- per-checkpoint rank-1 baseline ---------------------------------------------------------

def top_singular_triple(D, max_iter=1000, tol=1e-10):
    """Dominant (sigma, u, v) of a matrix by power iteration on D^T D."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise NotAMatrix(f"expected a 2-D matrix, got {D.ndim}-D")
    row_norms = np.einsum("ij,ij->i", D, D)
    if not row_norms.any():
        return 0.0, np.zeros(D.shape[0]), np.zeros(D.shape[1])
    v = D[int(np.argmax(row_norms))].copy()
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = D @ v
        new_sigma = float(np.linalg.norm(u))
        u /= new_sigma
        v = D.T @ u
        v /= np.linalg.norm(v)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    else:
        raise PowerIterationStall(f"power iteration did not converge in {max_iter} iterations")
    u = D @ v
    sigma = float(np.linalg.norm(u))
    return sigma, u / sigma, v


def alpharl_extrapolate(series, name, t_cut, target=None):
    """Per-checkpoint rank-1 baseline.

    Every observed delta matrix gets its own top singular triple; right
    vectors are sign-aligned to the one at ``t_cut`` and the scaled left
    factors ``sigma_t u_t`` are regressed (one-component PLS) on the
    progress ``t / t_cut``. The factor predicted at progress
    ``target / t_cut`` (1 by default) is recombined with the ``t_cut``
    right vector.
    """
    spec = series.spec(name)
    if len(spec.shape) != 2:
        raise NotAMatrix(f"{name} has shape {list(spec.shape)}; per-checkpoint SVD needs a matrix")
    steps = series.steps_upto(t_cut)
    if not steps:
        raise EmptyWindow(f"no observed step <= {t_cut}")
    if len(steps) < 2:
        raise TooFewPoints(f"{name}: need at least 2 observed steps, have {len(steps)}")
    base = series.read_tensor(series.base.step, name)
    triples = []
    for s in steps:
        delta = (series.read_tensor(s, name) - base).reshape(spec.shape)
        triples.append(top_singular_triple(delta))
    v_ref = triples[-1][2]
    X, y = [], []
    for s, (sigma, u, v) in zip(steps, triples):
        if np.dot(v, v_ref) < 0:
            u = -u
        X.append(sigma * u)
        y.append(s / t_cut)
    model = pls1_fit(np.array(X), np.array(y))
    progress = 1.0 if target is None else float(target) / t_cut
    left = model.invert(progress)
    return base + np.outer(left, v_ref).reshape(-1)
