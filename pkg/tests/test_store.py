import json
import struct

import crc32c
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relex import store
from relex.errors import (
    CorruptBlob,
    MissingIndex,
    SchemaMismatch,
    SeriesOrderError,
    ShapeMismatch,
    UnknownStep,
    UnknownTensor,
    ValidationError,
)

from conftest import write_series


# -- bf16 oracle: nearest representable value by table lookup, ties to even ------------

def _bf16_table():
    bits = np.arange(1 << 16, dtype=np.uint32)
    with np.errstate(invalid="ignore"):
        vals = (bits << 16).view(np.float32).astype(np.float64)
    keep = np.isfinite(vals) & ~((vals == 0) & (bits >= 0x8000))   # drop -0 and non-finite
    order = np.argsort(vals[keep], kind="stable")
    return vals[keep][order], bits[keep][order]


_BF16_VALS, _BF16_BITS = _bf16_table()
_BF16_MAX = float(_BF16_VALS[-1])


def bf16_oracle(x):
    if np.isnan(x):
        return x
    if abs(x) > _BF16_MAX:
        # halfway to the next binade step rounds up to infinity
        step = 2.0 ** (127 - 7)
        return np.copysign(np.inf if abs(x) >= _BF16_MAX + step / 2 else _BF16_MAX, x)
    i = int(np.searchsorted(_BF16_VALS, x))
    if i < len(_BF16_VALS) and _BF16_VALS[i] == x:
        return x
    lo, hi = _BF16_VALS[i - 1], _BF16_VALS[i]
    if x - lo < hi - x:
        out = lo
    elif hi - x < x - lo:
        out = hi
    else:
        out = lo if _BF16_BITS[i - 1] % 2 == 0 else hi
    if out == 0:
        return np.copysign(0.0, x)
    return out


class TestConversion:
    def test_f16_exact_value(self):
        assert store.round_trip(np.array([1.5]), "f16")[0] == 1.5

    def test_f32_third_is_nearest_float32(self):
        out = store.round_trip(np.array([1 / 3]), "f32")[0]
        assert out == float(np.float32(1 / 3))
        assert out != 1 / 3

    def test_bf16_avoids_double_rounding(self):
        # 1 + 2^-8 + 2^-40 is just above the bf16 midpoint; rounding through
        # float32 with RNE would land exactly on the midpoint and go down to 1
        x = 1 + 2.0 ** -8 + 2.0 ** -40
        assert store.round_trip(np.array([x]), "bf16")[0] == 1 + 2.0 ** -7

    def test_bf16_ties_to_even(self):
        x = np.array([1 + 2.0 ** -8, 1 + 3 * 2.0 ** -8])
        np.testing.assert_array_equal(store.round_trip(x, "bf16"), [1.0, 1 + 2 * 2.0 ** -7])

    def test_bf16_matches_table_oracle(self, rng):
        x = np.concatenate([
            rng.standard_normal(3000) * 10.0 ** rng.integers(-40, 39, 3000),
            rng.standard_normal(500),
            [0.0, -0.0, 1e-45, -3e-40, 3.3e38, 3.4e38, -3.5e38, 1e300],
        ])
        got = store.round_trip(x, "bf16")
        want = np.array([bf16_oracle(v) for v in x])
        np.testing.assert_array_equal(got, want)

    def test_bf16_nan_stays_nan(self):
        assert np.isnan(store.round_trip(np.array([np.nan]), "bf16")[0])

    @pytest.mark.parametrize("dtype", store.DTYPES)
    def test_round_trip_idempotent(self, rng, dtype):
        x = rng.standard_normal(1000) * 100
        once = store.round_trip(x, dtype)
        np.testing.assert_array_equal(store.round_trip(once, dtype), once)

    def test_unknown_dtype(self):
        with pytest.raises(ValidationError):
            store.narrow(np.zeros(2), "f64")


class TestSpecs:
    def test_element_count(self):
        spec = store.TensorSpec("layers.0.q_proj", (3, 4, 5), "bf16")
        assert spec.element_count == 60
        assert spec.nbytes == 120

    @pytest.mark.parametrize("kw", [
        dict(name="", shape=(2,)),
        dict(name="a/b", shape=(2,)),
        dict(name="w", shape=()),
        dict(name="w", shape=(2, 0)),
        dict(name="w", shape=(2,), dtype="float32"),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            store.TensorSpec(**kw)

    def test_duplicate_names(self):
        spec = store.TensorSpec("w", (2,))
        with pytest.raises(ValidationError):
            store.CheckpointManifest(0, [spec, spec])


class TestSeries:
    def test_open_well_formed(self, tmp_path):
        base = {"w": np.zeros(4)}
        s = write_series(tmp_path, base, {10: {"w": np.ones(4)}, 20: {"w": 2 * np.ones(4)}})
        assert s.base.step == 0
        assert s.observed_steps == (10, 20)
        assert s.steps_upto(15) == [10]

    def test_row_major_flatten(self, tmp_path):
        s = write_series(tmp_path, {"m": [1, 2, 3, 4]}, {1: {"m": [0, 0, 0, 0]}}, shapes={"m": (2, 2)})
        np.testing.assert_array_equal(s.read_tensor(0, "m"), [1.0, 2.0, 3.0, 4.0])
        assert s.spec("m").shape == (2, 2)

    def test_bf16_zeros(self, tmp_path):
        s = write_series(tmp_path, {"z": np.zeros(8)}, {1: {"z": np.zeros(8)}}, dtype="bf16")
        np.testing.assert_array_equal(s.read_tensor(1, "z"), np.zeros(8))

    def test_blob_is_raw_little_endian(self, tmp_path):
        write_series(tmp_path, {"w": [1.0, -2.5]}, {1: {"w": [0.5, 0.25]}})
        raw = (tmp_path / "step_1" / "w.bin").read_bytes()
        assert raw == struct.pack("<2f", 0.5, 0.25)
        manifest = json.loads((tmp_path / "step_1" / "manifest.json").read_text())
        assert manifest["tensors"][0]["crc32c"] == crc32c.crc32c(raw)
        index = json.loads((tmp_path / "series.json").read_text())
        assert index == {"format_version": 1, "base_step": 0, "observed_steps": [1],
                         "tensor_schema": [{"name": "w", "shape": [2], "dtype": "f32"}]}

    def test_missing_tensor_in_step(self, tmp_path):
        schema = [store.TensorSpec("a", (2,)), store.TensorSpec("layers.0.q_proj", (2,))]
        full = {"a": np.zeros(2), "layers.0.q_proj": np.zeros(2)}
        store.write_checkpoint(schema, full, 0, tmp_path)
        store.write_checkpoint(schema, full, 10, tmp_path)
        store.write_checkpoint(schema[:1], full, 20, tmp_path)
        store.write_index(tmp_path, 0, [10, 20], schema)
        with pytest.raises(SchemaMismatch) as err:
            store.open_series(tmp_path)
        assert err.value.tensor == "layers.0.q_proj"
        assert err.value.step == 20

    def test_dtype_mismatch(self, tmp_path):
        write_series(tmp_path, {"w": np.zeros(2)}, {1: {"w": np.ones(2)}})
        store.write_checkpoint([store.TensorSpec("w", (2,), "f16")], {"w": np.ones(2)}, 1, tmp_path)
        with pytest.raises(SchemaMismatch):
            store.open_series(tmp_path)

    def test_repeated_step_rejected(self, tmp_path):
        write_series(tmp_path, {"w": np.zeros(2)}, {10: {"w": np.ones(2)}})
        index = json.loads((tmp_path / "series.json").read_text())
        index["observed_steps"] = [10, 10]
        (tmp_path / "series.json").write_text(json.dumps(index))
        with pytest.raises(SeriesOrderError):
            store.open_series(tmp_path)

    def test_write_index_rejects_disorder(self, tmp_path):
        with pytest.raises(SeriesOrderError):
            store.write_index(tmp_path, 0, [10, 10], [store.TensorSpec("w", (1,))])

    def test_missing_index(self, tmp_path):
        with pytest.raises(MissingIndex):
            store.open_series(tmp_path / "nothing")

    def test_unknown_step_and_tensor(self, tmp_path):
        s = write_series(tmp_path, {"w": np.zeros(2)}, {1: {"w": np.ones(2)}})
        with pytest.raises(UnknownStep):
            s.read_tensor(5, "w")
        with pytest.raises(UnknownTensor):
            s.read_tensor(1, "nope")

    def test_shape_mismatch_on_write(self, tmp_path):
        with pytest.raises(ShapeMismatch):
            store.write_checkpoint([store.TensorSpec("w", (2, 2))], {"w": np.zeros(3)}, 0, tmp_path)
        with pytest.raises(ShapeMismatch):
            store.write_checkpoint([store.TensorSpec("w", (2, 2))], {"w": np.zeros(5)}, 0, tmp_path)
        assert not list(tmp_path.glob("**/*.tmp"))


class TestCorruption:
    def _series(self, tmp_path):
        return write_series(tmp_path, {"w": np.arange(100.0)}, {1: {"w": np.arange(100.0) * 2}})

    def test_flipped_bit_detected(self, tmp_path):
        self._series(tmp_path)
        path = tmp_path / "step_1" / "w.bin"
        raw = bytearray(path.read_bytes())
        raw[37] ^= 0x10
        path.write_bytes(bytes(raw))
        s = store.open_series(tmp_path)
        with pytest.raises(CorruptBlob):
            s.read_tensor(1, "w")
        with pytest.raises(CorruptBlob):
            list(s.iter_chunks(1, "w", 7))
        with pytest.raises(CorruptBlob):
            store.open_series(tmp_path, verify=True)
        np.testing.assert_array_equal(s.read_tensor(0, "w"), np.arange(100.0))

    def test_truncated_blob_detected_on_open(self, tmp_path):
        self._series(tmp_path)
        path = tmp_path / "step_1" / "w.bin"
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CorruptBlob):
            store.open_series(tmp_path)

    def test_every_single_bit_flip_detected(self, tmp_path):
        s = write_series(tmp_path, {"w": np.arange(4.0)}, {1: {"w": np.ones(4)}})
        path = tmp_path / "step_1" / "w.bin"
        good = path.read_bytes()
        for byte in range(len(good)):
            for bit in range(8):
                raw = bytearray(good)
                raw[byte] ^= 1 << bit
                path.write_bytes(bytes(raw))
                with pytest.raises(CorruptBlob):
                    s.read_tensor(1, "w")
        path.write_bytes(good)
        s.read_tensor(1, "w")


def test_crc32c_check_value():
    assert crc32c.crc32c(b"123456789") == 0xE3069283


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 300), chunk=st.integers(1, 64), dtype=st.sampled_from(store.DTYPES),
       seed=st.integers(0, 2 ** 32 - 1))
def test_chunked_read_matches_full_read(tmp_path_factory, n, chunk, dtype, seed):
    root = tmp_path_factory.mktemp("chunks")
    x = np.random.default_rng(seed).standard_normal(n)
    s = write_series(root, {"w": x}, {1: {"w": x + 1}}, dtype=dtype)
    parts = list(s.iter_chunks(1, "w", chunk))
    assert all(p.size <= chunk for p in parts)
    np.testing.assert_array_equal(np.concatenate(parts), s.read_tensor(1, "w"))
    np.testing.assert_array_equal(s.read_tensor(1, "w"), store.round_trip(x + 1, dtype))


def test_copy_checkpoint(tmp_path):
    s = write_series(tmp_path / "a", {"w": np.arange(5.0)}, {3: {"w": np.ones(5)}})
    store.copy_checkpoint(s, 3, tmp_path / "b", new_step=7)
    m = json.loads((tmp_path / "b" / "step_7" / "manifest.json").read_text())
    assert m["step"] == 7
    assert (tmp_path / "b" / "step_7" / "w.bin").read_bytes() == (tmp_path / "a" / "step_3" / "w.bin").read_bytes()
