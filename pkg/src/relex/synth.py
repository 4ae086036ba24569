"""Planted trajectories with known ground truth, and an independent SVD oracle.

Random numbers come from a counter-based SplitMix64 so that any slice of any
random vector can be regenerated without replaying the stream:

    x_i   = (seed + (i + 1) * 0x9E3779B97F4A7C15) mod 2**64
    out_i = mix(x_i)   with the standard SplitMix64 finaliser
    u_i   = (out_i >> 11) * 2**-53                       uniform in [0, 1)
    z_i   = sqrt(-2 ln(1 - u_2i)) * cos(2 pi u_(2i+1))   standard normal

Sub-streams are keyed by ``derive_seed(seed, *tags)``, which folds each
integer tag into the seed through the same finaliser.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import store
from .errors import ConfigError, SizeExceeded, ValidationError

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

NOISE_KINDS = ("none", "orthogonal_iid", "full_iid", "extra_components")
CHUNK = 1 << 18


# -- RNG -----------------------------------------------------------------------------

def mix64(z):
    """SplitMix64 finaliser on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed, *tags):
    s = int(seed) & MASK64
    for tag in tags:
        s = mix64(s + (int(tag) + 1) * GOLDEN)
    return s


def _mix64_array(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64; ``uniform``/``normal`` accept an offset."""

    def __init__(self, seed):
        self.seed = int(seed) & MASK64

    def u64(self, start, n):
        idx = np.arange(start + 1, start + n + 1, dtype=np.uint64)
        return _mix64_array(np.uint64(self.seed) + idx * np.uint64(GOLDEN))

    def uniform(self, start, n):
        return (self.u64(start, n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, start, n):
        u = self.uniform(2 * start, 2 * n)
        return np.sqrt(-2.0 * np.log1p(-u[0::2])) * np.cos(2.0 * np.pi * u[1::2])

    def integers(self, start, n, low, high):
        """Integers in [low, high) (floor of a scaled uniform)."""
        return low + np.floor(self.uniform(start, n) * (high - low)).astype(np.int64)


# -- configuration ------------------------------------------------------------------------

@dataclass
class TensorPlant:
    name: str
    shape: list
    dtype: str = "f32"
    slope: float = None
    intercept: float = None
    noise_scale: float = None
    coefficient_noise: float = None


@dataclass
class PlantConfig:
    """Synthetic series description.

    Each tensor's delta at step t is ``(a t + b + eps_t) v + noise_t`` with a
    unit direction v. ``noise_scale`` is relative: for the iid kinds the
    expected noise norm is ``noise_scale * rho`` with rho the RMS signal
    norm over the steps; for ``extra_components`` it is the energy of the
    extra components relative to the signal energy, with the random-walk
    coefficients made orthogonal (over the steps) to the planted
    coefficients. ``coefficient_noise`` is the standard deviation of eps_t
    relative to rho. ``lossless`` snaps
    everything to a dyadic grid so storage in the tensor dtype is exact.
    """

    tensors: list
    t_values: list
    slope: float = 1.0
    intercept: float = 0.0
    planted_direction_seed: int = 0
    noise_kind: str = "none"
    noise_scale: float = 0.0
    coefficient_noise: float = 0.0
    extra_component_count: int = 4
    rng_seed: int = 0
    base_step: int = 0
    base_scale: float = 0.02
    lossless: bool = False

    def __post_init__(self):
        self.tensors = [t if isinstance(t, TensorPlant) else TensorPlant(**t) for t in self.tensors]
        self.t_values = [int(t) for t in self.t_values]
        if not self.tensors:
            raise ConfigError("config needs at least one tensor")
        if not self.t_values or any(b <= a for a, b in zip(self.t_values, self.t_values[1:])):
            raise ConfigError("t_values must be non-empty and strictly increasing")
        if self.t_values[0] <= self.base_step:
            raise ConfigError("t_values must exceed base_step")
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"noise_kind must be one of {NOISE_KINDS}")
        for t in self.tensors:
            for value in (self.noise_scale if t.noise_scale is None else t.noise_scale,
                          self.coefficient_noise if t.coefficient_noise is None else t.coefficient_noise):
                if value < 0:
                    raise ConfigError(f"{t.name}: noise amplitudes must be >= 0")
        if self.noise_kind == "extra_components" and self.extra_component_count < 1:
            raise ConfigError("extra_components needs extra_component_count >= 1")
        if self.lossless and (self.noise_kind != "none" or self.coefficient_noise
                              or any(t.coefficient_noise for t in self.tensors)):
            raise ConfigError("lossless plants cannot carry noise")
        try:
            self.schema()
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    def schema(self):
        return [store.TensorSpec(t.name, tuple(t.shape), t.dtype) for t in self.tensors]

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(obj)


# -- per-tensor generator -------------------------------------------------------------------

class TensorGenerator:
    """Regenerates any slice of one planted tensor's base, directions and noise."""

    def __init__(self, cfg, index):
        tp = cfg.tensors[index]
        self.cfg = cfg
        self.name = tp.name
        self.spec = cfg.schema()[index]
        self.d = self.spec.element_count
        self.t = np.asarray(cfg.t_values, dtype=np.float64)
        self.kind = cfg.noise_kind
        self.k_extra = cfg.extra_component_count if self.kind == "extra_components" else 0
        slope = cfg.slope if tp.slope is None else tp.slope
        intercept = cfg.intercept if tp.intercept is None else tp.intercept
        self.noise_scale = cfg.noise_scale if tp.noise_scale is None else tp.noise_scale
        self.coefficient_noise = cfg.coefficient_noise if tp.coefficient_noise is None else tp.coefficient_noise

        self._dir_streams = [SplitMix64(derive_seed(cfg.planted_direction_seed, index, 1 + k))
                             for k in range(1 + self.k_extra)]
        self._base_stream = SplitMix64(derive_seed(cfg.rng_seed, index, 100))
        self._noise_seed = derive_seed(cfg.rng_seed, index, 102)

        # Gram of [w, g_1..g_K] -> R, so that Q = W R^-1 is orthonormal with q_0 = v
        gram = np.zeros((1 + self.k_extra, 1 + self.k_extra))
        for start in range(0, self.d, CHUNK):
            W = self._raw_directions(start, min(start + CHUNK, self.d))
            gram += W @ W.T
        self.w_norm = math.sqrt(gram[0, 0])
        R = np.linalg.cholesky(gram).T
        self._r_inv = np.linalg.inv(R)

        if cfg.lossless:
            q = 2.0 ** -8
            self.slope_grid = round(slope / self.w_norm / q) * q
            self.intercept_grid = round(intercept / self.w_norm / q) * q
            if self.slope_grid == 0:
                raise ConfigError(f"{self.name}: slope too small for the lossless grid")
            self.slope = self.slope_grid * self.w_norm
            self.intercept = self.intercept_grid * self.w_norm
        else:
            self.slope, self.intercept = float(slope), float(intercept)

        self.signal = self.slope * self.t + self.intercept
        self.rho = float(np.sqrt(np.mean(self.signal ** 2)))
        eps_stream = SplitMix64(derive_seed(cfg.rng_seed, index, 101))
        self.eps = self.coefficient_noise * self.rho * eps_stream.normal(0, self.t.size)
        self.coefficients = self.signal + self.eps

        self.extra = np.zeros((self.t.size, self.k_extra))
        if self.k_extra:
            walk_stream = SplitMix64(derive_seed(cfg.rng_seed, index, 103))
            steps = walk_stream.normal(0, self.t.size * self.k_extra).reshape(self.t.size, self.k_extra)
            walks = np.cumsum(steps, axis=0)
            # keep the walks out of the planted coefficient profile so their
            # energy lands in components 2+ rather than leaking into the first
            norm = float(np.linalg.norm(self.coefficients))
            if norm > 0:
                c_hat = self.coefficients / norm
                walks -= np.outer(c_hat, c_hat @ walks)
            energy = float(np.sum(walks ** 2))
            if energy > 0:
                walks *= math.sqrt(self.noise_scale * float(np.sum(self.signal ** 2)) / energy)
            self.extra = walks

        self.noise_std = self.noise_scale * self.rho / math.sqrt(self.d)
        self.noise_dots = np.zeros(self.t.size)
        if self.kind == "orthogonal_iid" and self.noise_scale > 0:
            for start in range(0, self.d, CHUNK):
                stop = min(start + CHUNK, self.d)
                v = self.direction(start, stop)
                for i in range(self.t.size):
                    self.noise_dots[i] += float(np.dot(self._raw_noise(i, start, stop), v))

    def _raw_directions(self, start, stop):
        n = stop - start
        if self.cfg.lossless:
            k = self._dir_streams[0].integers(start, n, 0, 14)
            w = np.where(k < 7, k - 7, k - 6).astype(np.float64)
            rows = [w] + [s.normal(start, n) for s in self._dir_streams[1:]]
        else:
            rows = [s.normal(start, n) for s in self._dir_streams]
        return np.vstack(rows)

    def _orthonormal(self, start, stop):
        return self._r_inv.T @ self._raw_directions(start, stop)

    def base(self, start, stop):
        n = stop - start
        if self.cfg.lossless:
            return self._base_stream.integers(start, n, -256, 257).astype(np.float64) * 2.0 ** -8
        return self.cfg.base_scale * self._base_stream.normal(start, n)

    def direction(self, start=0, stop=None):
        stop = self.d if stop is None else stop
        if self.cfg.lossless:
            return self._raw_directions(start, stop)[0] / self.w_norm
        return self._orthonormal(start, stop)[0]

    def extra_directions(self, start=0, stop=None):
        stop = self.d if stop is None else stop
        return self._orthonormal(start, stop)[1:]

    def _raw_noise(self, i, start, stop):
        return SplitMix64(derive_seed(self._noise_seed, i)).normal(start, stop - start)

    def noise(self, i, start=0, stop=None):
        """Noise vector added at the i-th observed step (excluding eps_i v)."""
        stop = self.d if stop is None else stop
        if self.kind in ("orthogonal_iid", "full_iid") and self.noise_scale > 0:
            g = self._raw_noise(i, start, stop)
            if self.kind == "orthogonal_iid":
                g = g - self.noise_dots[i] * self.direction(start, stop)
            return self.noise_std * g
        if self.kind == "extra_components":
            return self.extra[i] @ self.extra_directions(start, stop)
        return np.zeros(stop - start)

    def delta(self, i, start=0, stop=None):
        stop = self.d if stop is None else stop
        if self.cfg.lossless:
            c = self.slope_grid * self.t[i] + self.intercept_grid
            return c * self._raw_directions(start, stop)[0]
        return self.coefficients[i] * self.direction(start, stop) + self.noise(i, start, stop)

    def write_chunks(self, writers):
        """Stream base + deltas into ``writers`` (base first, then each step)."""
        for start in range(0, self.d, CHUNK):
            stop = min(start + CHUNK, self.d)
            base = self.base(start, stop)
            if self.cfg.lossless:
                w = self._raw_directions(start, stop)[0]
            else:
                Q = self._orthonormal(start, stop)
                v = Q[0]
            writers[0].write(base)
            for i in range(self.t.size):
                if self.cfg.lossless:
                    theta = base + (self.slope_grid * self.t[i] + self.intercept_grid) * w
                    if not np.array_equal(store.round_trip(theta, self.spec.dtype), theta):
                        raise ConfigError(f"{self.name}: lossless plant is not exactly "
                                          f"representable in {self.spec.dtype}")
                else:
                    theta = base + self.coefficients[i] * v
                    if self.kind == "extra_components":
                        theta += self.extra[i] @ Q[1:]
                    elif self.kind in ("orthogonal_iid", "full_iid") and self.noise_scale > 0:
                        g = self._raw_noise(i, start, stop)
                        if self.kind == "orthogonal_iid":
                            g = g - self.noise_dots[i] * v
                        theta += self.noise_std * g
                writers[1 + i].write(theta)

    def truth(self):
        r2 = line_r_squared(self.t, self.coefficients) if self.t.size >= 2 else None
        return {
            "name": self.name,
            "shape": list(self.spec.shape),
            "dtype": self.spec.dtype,
            "slope": self.slope,
            "intercept": self.intercept,
            "noise_scale": self.noise_scale,
            "coefficient_noise": self.coefficient_noise,
            "coefficients": [float(x) for x in self.coefficients],
            "coefficient_eps": [float(x) for x in self.eps],
            "extra_coefficients": [[float(x) for x in row] for row in self.extra],
            "noise_dots": [float(x) for x in self.noise_dots],
            "noise_std": self.noise_std,
            "oracle_r_squared": r2,
        }


def line_r_squared(t, c):
    """R^2 of a least-squares line through (t, c), via numpy's polyfit."""
    t = np.asarray(t, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    resid = c - np.polyval(np.polyfit(t, c, 1), t)
    ss_tot = float(np.sum((c - c.mean()) ** 2))
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0


# -- ground truth ------------------------------------------------------------------------------

@dataclass
class GroundTruth:
    config: PlantConfig
    tensors: dict = field(default_factory=dict)   # name -> truth dict

    def generator(self, name):
        for i, t in enumerate(self.config.tensors):
            if t.name == name:
                return TensorGenerator(self.config, i)
        raise KeyError(name)

    def direction(self, name):
        return self.generator(name).direction()

    def slope(self, name):
        return self.tensors[name]["slope"]

    def intercept(self, name):
        return self.tensors[name]["intercept"]

    def signal_delta(self, name, T):
        """Noise-free delta (a T + b) v at any step."""
        return (self.slope(name) * T + self.intercept(name)) * self.direction(name)

    def analytic_checkpoint(self, series, name, T):
        """Stored base plus the noise-free planted delta at step ``T``."""
        return series.read_tensor(series.base.step, name) + self.signal_delta(name, T)

    def noise(self, name, step):
        gen = self.generator(name)
        return gen.noise(self.config.t_values.index(step))

    def oracle_r_squared(self, name, upto=None):
        """R^2 of the planted coefficients over the steps <= ``upto``."""
        if upto is None:
            return self.tensors[name]["oracle_r_squared"]
        t = np.asarray(self.config.t_values, dtype=np.float64)
        keep = t <= upto
        if keep.sum() < 2:
            raise ValidationError(f"need at least 2 planted steps <= {upto}")
        return line_r_squared(t[keep], np.asarray(self.tensors[name]["coefficients"])[keep])

    def oracle_fraction_above(self, threshold=0.98, upto=None):
        r2 = [self.oracle_r_squared(name, upto) for name in self.tensors]
        return sum(x > threshold for x in r2) / len(r2)

    def to_json(self):
        return {"config": self.config.to_json(), "tensors": [self.tensors[k] for k in sorted(self.tensors)]}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            obj = json.load(fh)
        return cls(PlantConfig.from_json(obj["config"]), {t["name"]: t for t in obj["tensors"]})


def plant_series(cfg, out_path):
    """Write a planted series to ``out_path``; returns (series, ground truth).

    Output depends only on the config, so equal configs give identical bytes.
    """
    out = Path(out_path)
    schema = cfg.schema()
    steps = [cfg.base_step, *cfg.t_values]
    sums = {s: {} for s in steps}
    truth = GroundTruth(cfg)
    for d in steps:
        store.step_dir(out, d).mkdir(parents=True, exist_ok=True)
    for index, spec in enumerate(schema):
        gen = TensorGenerator(cfg, index)
        writers = [store.BlobWriter(store.blob_path(out, s, spec.name), spec) for s in steps]
        try:
            gen.write_chunks(writers)
        except BaseException:
            for w in writers:
                w.abort()
            raise
        for s, w in zip(steps, writers):
            sums[s][spec.name] = w.close()
        truth.tensors[spec.name] = gen.truth()
    for s in steps:
        store.write_manifest(out, s, schema, sums[s])
    store.write_index(out, cfg.base_step, cfg.t_values, schema)
    truth.save(out / "ground_truth.json")
    return store.open_series(out), truth


# -- one-sided Jacobi SVD oracle ------------------------------------------------------------------

@dataclass
class FullSVD:
    singular_values: np.ndarray   # (T,), descending
    left_vectors: np.ndarray      # (T, T)
    right_vectors: np.ndarray     # (T, d); rows for zero singular values are zero


def jacobi_svd_oracle(M, tol=1e-15, max_sweeps=60):
    """Full SVD of a small T x d matrix by one-sided (Hestenes) Jacobi.

    Works on A = M^T and rotates pairs of its columns until they are
    mutually orthogonal; the rotations accumulate into U. Shares no code
    with the Gram/eigen path.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValidationError("oracle needs a 2-D matrix")
    T, d = M.shape
    if T > 64 or d > 4096:
        raise SizeExceeded(f"oracle is limited to 64 x 4096, got {T} x {d}")
    A = M.T.copy()
    U = np.eye(T)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(T - 1):
            for j in range(i + 1, T):
                alpha = float(A[:, i] @ A[:, i])
                beta = float(A[:, j] @ A[:, j])
                gamma = float(A[:, i] @ A[:, j])
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                ai, aj = A[:, i].copy(), A[:, j].copy()
                A[:, i] = c * ai - s * aj
                A[:, j] = s * ai + c * aj
                ui, uj = U[:, i].copy(), U[:, j].copy()
                U[:, i] = c * ui - s * uj
                U[:, j] = s * ui + c * uj
        if not rotated:
            break
    sigma = np.sqrt(np.einsum("ij,ij->j", A, A))
    order = np.argsort(-sigma, kind="stable")
    sigma, A, U = sigma[order], A[:, order], U[:, order]
    V = np.zeros((T, d))
    nz = sigma > 0
    V[nz] = (A[:, nz] / sigma[nz]).T
    return FullSVD(sigma, U, V)
