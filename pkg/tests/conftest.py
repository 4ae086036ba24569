import numpy as np
import pytest

from relex import store
from relex.synth import PlantConfig, plant_series


def write_series(root, base, steps, dtype="f32", shapes=None, base_step=0):
    """Write a series from {name: flat array} dicts.

    ``steps`` maps step -> {name: array}. Returns the opened series.
    """
    shapes = shapes or {}
    schema = [store.TensorSpec(name, shapes.get(name, (np.asarray(v).size,)), dtype)
              for name, v in sorted(base.items())]
    store.write_checkpoint(schema, base, base_step, root)
    for step, tensors in sorted(steps.items()):
        store.write_checkpoint(schema, tensors, step, root)
    store.write_index(root, base_step, sorted(steps), schema)
    return store.open_series(root)


def rank1_series(root, v, coeffs, base=None, dtype="f32", name="w", shape=None):
    """Series with deltas ``coeffs[t] * v`` at steps 1..T (or the dict keys)."""
    v = np.asarray(v, dtype=np.float64)
    base = np.zeros_like(v) if base is None else np.asarray(base, dtype=np.float64)
    if not isinstance(coeffs, dict):
        coeffs = {i + 1: c for i, c in enumerate(coeffs)}
    steps = {t: {name: base + c * v} for t, c in coeffs.items()}
    return write_series(root, {name: base}, steps, dtype, {name: shape} if shape else None)


def make_plant(**kw):
    kw.setdefault("tensors", [{"name": "w", "shape": [64]}])
    kw.setdefault("t_values", list(range(1, 11)))
    return PlantConfig(**kw)


@pytest.fixture
def plant(tmp_path):
    def _plant(subdir="series", **kw):
        return plant_series(make_plant(**kw), tmp_path / subdir)
    return _plant


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
