"""On-disk checkpoint series: one index file plus raw little-endian blobs.

Layout of a series rooted at ``root``::

    root/series.json                 index: base step, observed steps, schema
    root/step_<t>/manifest.json      per-checkpoint schema + CRC32C per blob
    root/step_<t>/<tensor>.bin       raw little-endian elements, row-major

Values are always handed to callers as float64. Narrowing back to the stored
dtype uses round-to-nearest-even.
"""

import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import crc32c
import numpy as np

from .errors import (
    CorruptBlob,
    IoFailure,
    MissingIndex,
    SchemaMismatch,
    SeriesOrderError,
    ShapeMismatch,
    UnknownStep,
    UnknownTensor,
    ValidationError,
)

FORMAT_VERSION = 1
INDEX_NAME = "series.json"
MANIFEST_NAME = "manifest.json"

# storage dtype of each element, as little-endian numpy dtypes
_STORAGE = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2"), "bf16": np.dtype("<u2")}
DTYPES = tuple(_STORAGE)


def itemsize(dtype):
    return _STORAGE[dtype].itemsize


# -- dtype conversion ----------------------------------------------------------

def _f64_to_bf16_bits(x):
    # Going through float32 with plain RNE would double-round. Rounding to odd
    # at float32 precision (24 bits >= 8 + 2) first makes the final RNE exact.
    with np.errstate(over="ignore"):
        f = x.astype(np.float32)
    bits = f.view(np.uint32).copy()
    back = f.astype(np.float64)
    inexact = (back != x) & np.isfinite(f) & ~np.isnan(x)
    away = inexact & (np.abs(back) > np.abs(x))
    bits[away] -= np.uint32(1)
    bits[inexact] |= np.uint32(1)

    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    out = ((bits + np.uint32(0x7FFF) + lsb) >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(x)
    if nan.any():
        out[nan] = ((bits[nan] >> np.uint32(16)).astype(np.uint16) & np.uint16(0x8000)) | np.uint16(0x7FC0)
    return out


def narrow(values, dtype):
    """Convert float64 values to the storage representation of ``dtype``."""
    x = np.asarray(values, dtype=np.float64)
    if dtype == "bf16":
        return _f64_to_bf16_bits(x).astype("<u2", copy=False)
    if dtype in _STORAGE:
        with np.errstate(over="ignore"):
            return x.astype(_STORAGE[dtype])
    raise ValidationError(f"unknown dtype {dtype!r}")


def widen(raw, dtype):
    """Convert stored elements (as read from a blob) to float64."""
    if dtype == "bf16":
        bits = np.asarray(raw, dtype="<u2").astype(np.uint32) << np.uint32(16)
        return bits.view(np.float32).astype(np.float64)
    return np.asarray(raw, dtype=_STORAGE[dtype]).astype(np.float64)


def round_trip(values, dtype):
    """Values as they would read back after being written with ``dtype``."""
    return widen(narrow(values, dtype), dtype)


# -- schema types -------------------------------------------------------------

@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple
    dtype: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not self.name or "/" in self.name or os.sep in self.name or self.name.startswith("."):
            raise ValidationError(f"invalid tensor name {self.name!r}")
        if not self.shape or any(s <= 0 for s in self.shape):
            raise ValidationError(f"tensor {self.name!r}: shape must be positive, got {self.shape}")
        if self.dtype not in _STORAGE:
            raise ValidationError(f"tensor {self.name!r}: dtype must be one of {DTYPES}")

    @property
    def element_count(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbytes(self):
        return self.element_count * itemsize(self.dtype)

    def to_json(self):
        return {"name": self.name, "shape": list(self.shape), "dtype": self.dtype}

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(obj["name"], tuple(obj["shape"]), obj["dtype"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed tensor spec {obj!r}") from exc


def _check_unique(schema):
    names = [s.name for s in schema]
    if not names:
        raise ValidationError("tensor schema is empty")
    if len(set(names)) != len(names):
        raise ValidationError("duplicate tensor names in schema")


@dataclass(frozen=True)
class CheckpointManifest:
    step: int
    tensors: tuple
    format_version: int = FORMAT_VERSION
    checksums: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tensors", tuple(self.tensors))
        if int(self.step) < 0:
            raise ValidationError("checkpoint step must be non-negative")
        _check_unique(self.tensors)

    @property
    def names(self):
        return [t.name for t in self.tensors]

    def spec(self, name):
        for t in self.tensors:
            if t.name == name:
                return t
        raise UnknownTensor(name)

    def to_json(self):
        return {
            "format_version": self.format_version,
            "step": self.step,
            "tensors": [
                dict(t.to_json(), crc32c=self.checksums.get(t.name), nbytes=t.nbytes)
                for t in self.tensors
            ],
        }

    @classmethod
    def from_json(cls, obj):
        tensors = [TensorSpec.from_json(t) for t in obj["tensors"]]
        sums = {t["name"]: t.get("crc32c") for t in obj["tensors"]}
        return cls(int(obj["step"]), tensors, int(obj.get("format_version", 1)), sums)


def step_dir(root, step):
    return Path(root) / f"step_{int(step)}"


def blob_path(root, step, name):
    return step_dir(root, step) / f"{name}.bin"


class CheckpointSeries:
    """A validated, immutable view of a series on disk.

    ``base`` is the reference checkpoint (theta_0); ``observed`` are the
    later checkpoints in strictly increasing step order.
    """

    def __init__(self, base, observed, root_path):
        self.base = base
        self.observed = tuple(observed)
        self.root_path = Path(root_path)
        self._by_step = {m.step: m for m in (base, *self.observed)}

    def __repr__(self):
        return (f"CheckpointSeries({str(self.root_path)!r}, base={self.base.step}, "
                f"observed={list(self.observed_steps)})")

    @property
    def schema(self):
        return self.base.tensors

    @property
    def names(self):
        return self.base.names

    @property
    def observed_steps(self):
        return tuple(m.step for m in self.observed)

    @property
    def steps(self):
        return (self.base.step, *self.observed_steps)

    def spec(self, name):
        return self.base.spec(name)

    def manifest(self, step):
        try:
            return self._by_step[int(step)]
        except KeyError:
            raise UnknownStep(f"step {step} not in series {self.root_path}") from None

    def steps_upto(self, upto_step):
        return [s for s in self.observed_steps if s <= upto_step]

    def _locate(self, step, name):
        manifest = self.manifest(step)
        spec = manifest.spec(name)
        return spec, blob_path(self.root_path, step, name), manifest.checksums.get(name)

    def read_tensor(self, step, name):
        """Whole tensor at ``step`` as a flat float64 vector (row-major)."""
        spec, path, expected = self._locate(step, name)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        if len(raw) != spec.nbytes:
            raise CorruptBlob(path, f"expected {spec.nbytes} bytes, found {len(raw)}")
        if expected is not None and crc32c.crc32c(raw) != expected:
            raise CorruptBlob(path)
        return widen(np.frombuffer(raw, dtype=_STORAGE[spec.dtype]), spec.dtype)

    def iter_chunks(self, step, name, chunk):
        """Yield consecutive float64 chunks of a tensor, verifying its checksum.

        The CRC is checked when the final chunk is read, so a consumer that
        exhausts the iterator has read verified data.
        """
        spec, path, expected = self._locate(step, name)
        sdt = _STORAGE[spec.dtype]
        n = spec.element_count
        crc = 0
        try:
            with open(path, "rb") as fh:
                start = 0
                while start < n:
                    count = min(chunk, n - start)
                    raw = fh.read(count * sdt.itemsize)
                    if len(raw) != count * sdt.itemsize:
                        raise CorruptBlob(path, "truncated blob")
                    crc = crc32c.crc32c(raw, crc)
                    start += count
                    if start >= n:
                        if fh.read(1):
                            raise CorruptBlob(path, "trailing bytes")
                        if expected is not None and crc != expected:
                            raise CorruptBlob(path)
                    yield widen(np.frombuffer(raw, dtype=sdt), spec.dtype)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def verify(self):
        """Check every blob checksum; raises CorruptBlob on the first failure."""
        for step in self.steps:
            for name in self.names:
                for _ in self.iter_chunks(step, name, 1 << 22):
                    pass


def read_tensor(series, step, name):
    return series.read_tensor(step, name)


# -- reading ------------------------------------------------------------------

def _load_json(path, missing_exc):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise missing_exc(f"missing {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def open_series(root_path, verify=False):
    """Open and validate the series stored at ``root_path``.

    Every manifest must carry exactly the schema recorded in the index. Blob
    sizes are checked eagerly; checksums are checked on read, or for every
    blob up front when ``verify`` is true.
    """
    root = Path(root_path)
    index = _load_json(root / INDEX_NAME, MissingIndex)
    try:
        version = int(index["format_version"])
        base_step = int(index["base_step"])
        observed_steps = [int(s) for s in index["observed_steps"]]
        schema = [TensorSpec.from_json(t) for t in index["tensor_schema"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{root / INDEX_NAME}: malformed index ({exc})") from exc
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {version}")
    _check_unique(schema)

    prev = base_step
    for s in observed_steps:
        if s <= prev:
            raise SeriesOrderError(
                f"observed steps must strictly increase past base step {base_step}: {observed_steps}")
        prev = s

    by_name = {t.name: t for t in schema}
    manifests = []
    for step in [base_step, *observed_steps]:
        obj = _load_json(step_dir(root, step) / MANIFEST_NAME, MissingIndex)
        try:
            m = CheckpointManifest.from_json(obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"step {step}: malformed manifest ({exc})") from exc
        if m.step != step:
            raise ValidationError(f"manifest in step_{step} claims step {m.step}")
        seen = {t.name: t for t in m.tensors}
        for name, spec in by_name.items():
            if name not in seen:
                raise SchemaMismatch(name, step, "tensor missing")
            if seen[name] != spec:
                raise SchemaMismatch(name, step, f"{seen[name]} != {spec}")
        for name in seen:
            if name not in by_name:
                raise SchemaMismatch(name, step, "tensor not in series schema")
        for spec in schema:
            path = blob_path(root, step, spec.name)
            try:
                size = path.stat().st_size
            except FileNotFoundError:
                raise CorruptBlob(path, "blob missing") from None
            if size != spec.nbytes:
                raise CorruptBlob(path, f"expected {spec.nbytes} bytes, found {size}")
        # keep the index's tensor order
        manifests.append(CheckpointManifest(step, schema, version, m.checksums))

    series = CheckpointSeries(manifests[0], manifests[1:], root)
    if verify:
        series.verify()
    return series


# -- writing ------------------------------------------------------------------

def _as_chunks(values):
    if isinstance(values, (np.ndarray, list, tuple)) or np.isscalar(values):
        yield np.asarray(values, dtype=np.float64).reshape(-1)
    else:
        for chunk in values:
            yield np.asarray(chunk, dtype=np.float64).reshape(-1)


class BlobWriter:
    """Incremental writer for one tensor blob.

    Chunks are narrowed to the spec's dtype on the way out; ``close``
    checks the element count and returns the CRC32C of the bytes written.
    """

    def __init__(self, path, spec):
        self.path = Path(path)
        self.spec = spec
        self.count = 0
        self.crc = 0
        self._tmp = Path(str(path) + ".tmp")
        try:
            self._fh = open(self._tmp, "wb")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def write(self, chunk):
        chunk = np.asarray(chunk, dtype=np.float64).reshape(-1)
        self.count += chunk.size
        if self.count > self.spec.element_count:
            self.abort()
            raise ShapeMismatch(
                f"tensor {self.spec.name!r}: more than {self.spec.element_count} values "
                f"for shape {list(self.spec.shape)}")
        raw = narrow(chunk, self.spec.dtype).tobytes()
        self.crc = crc32c.crc32c(raw, self.crc)
        try:
            self._fh.write(raw)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def abort(self):
        self._fh.close()
        self._tmp.unlink(missing_ok=True)

    def close(self):
        if self.count != self.spec.element_count:
            self.abort()
            raise ShapeMismatch(
                f"tensor {self.spec.name!r}: got {self.count} values for shape {list(self.spec.shape)}")
        try:
            self._fh.close()
            os.replace(self._tmp, self.path)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return self.crc


def write_blob(path, spec, values):
    """Write one tensor blob; ``values`` is a flat vector or an iterable of chunks.

    Returns the CRC32C of the bytes written.
    """
    writer = BlobWriter(path, spec)
    try:
        for chunk in _as_chunks(values):
            writer.write(chunk)
    except BaseException:
        if not writer._fh.closed:
            writer.abort()
        raise
    return writer.close()


def write_manifest(root_path, step, schema, checksums):
    manifest = CheckpointManifest(int(step), schema, FORMAT_VERSION, dict(checksums))
    _write_json(step_dir(root_path, step) / MANIFEST_NAME, manifest.to_json())
    return manifest


def write_checkpoint(schema, tensors, step, root_path):
    """Write one checkpoint (all tensors in ``schema``) under ``root_path``.

    ``tensors`` maps tensor name to a flat vector or to an iterable of
    flat chunks whose concatenation is the tensor.
    """
    schema = [s if isinstance(s, TensorSpec) else TensorSpec.from_json(s) for s in schema]
    _check_unique(schema)
    missing = [s.name for s in schema if s.name not in tensors]
    if missing:
        raise ShapeMismatch(f"no values supplied for {missing}")
    d = step_dir(root_path, step)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    sums = {s.name: write_blob(blob_path(root_path, step, s.name), s, tensors[s.name]) for s in schema}
    return write_manifest(root_path, step, schema, sums)


def write_index(root_path, base_step, observed_steps, schema):
    observed_steps = [int(s) for s in observed_steps]
    prev = int(base_step)
    for s in observed_steps:
        if s <= prev:
            raise SeriesOrderError(f"observed steps must strictly increase: {observed_steps}")
        prev = s
    obj = {
        "format_version": FORMAT_VERSION,
        "base_step": int(base_step),
        "observed_steps": observed_steps,
        "tensor_schema": [s.to_json() for s in schema],
    }
    _write_json(Path(root_path) / INDEX_NAME, obj)


def copy_checkpoint(series, step, root_path, new_step=None):
    """Byte-copy one checkpoint of ``series`` into another series directory."""
    new_step = step if new_step is None else new_step
    src = series.manifest(step)
    dst = step_dir(root_path, new_step)
    dst.mkdir(parents=True, exist_ok=True)
    try:
        for spec in src.tensors:
            shutil.copyfile(blob_path(series.root_path, step, spec.name), dst / f"{spec.name}.bin")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return write_manifest(root_path, new_step, src.tensors, src.checksums)


def _write_json(path, obj):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
