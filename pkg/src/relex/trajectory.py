"""Per-tensor delta trajectories, dense or streamed from disk."""

import numpy as np

from .errors import EmptyWindow, UnknownTensor, ValidationError

# column block of the Gram kernel; streaming chunks are multiples of it
BLOCK = 4096

# T_cut * d above which rows stay on disk and are streamed by column chunk
DENSE_THRESHOLD = 1 << 24


def chunk_width(n_rows, d, budget=None):
    """Column chunk so that one resident chunk holds about ``budget`` values.

    The default budget is a quarter of one tensor, which keeps the streaming
    kernels (chunk, padded copy, base chunk, products) under one tensor.
    """
    if budget is None:
        budget = max(d // 4, BLOCK)
    width = (budget // max(n_rows, 1)) // BLOCK * BLOCK
    return int(max(BLOCK, width))


class TrajectoryMatrix:
    """Rows m_t = flatten(theta_t - theta_0) for the observed steps of one tensor.

    Either holds the dense ``T x d`` array or streams rows from a series.
    Instances are immutable; ``prefix`` returns a new view.
    """

    def __init__(self, tensor_name, steps, rows=None, *, series=None, base_step=None):
        self.tensor_name = tensor_name
        self.steps = tuple(int(s) for s in steps)
        if not self.steps:
            raise EmptyWindow(f"{tensor_name}: trajectory has no rows")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValidationError("trajectory steps must strictly increase")
        if rows is not None:
            rows = np.array(rows, dtype=np.float64, ndmin=2)
            if rows.ndim != 2 or rows.shape[0] != len(self.steps):
                raise ValidationError(
                    f"{tensor_name}: {rows.shape} rows for {len(self.steps)} steps")
            rows.setflags(write=False)
            self.d = rows.shape[1]
        else:
            if series is None:
                raise ValidationError("need rows or a series")
            self.d = series.spec(tensor_name).element_count
        self._rows = rows
        self._series = series
        self._base_step = series.base.step if base_step is None and series is not None else base_step

    @classmethod
    def from_rows(cls, rows, steps=None, tensor_name="tensor"):
        rows = np.asarray(rows, dtype=np.float64)
        if steps is None:
            steps = range(1, rows.shape[0] + 1)
        return cls(tensor_name, steps, rows)

    def __repr__(self):
        kind = "dense" if self.is_dense else "streamed"
        return f"TrajectoryMatrix({self.tensor_name!r}, T={self.n_steps}, d={self.d}, {kind})"

    @property
    def n_steps(self):
        return len(self.steps)

    @property
    def is_dense(self):
        return self._rows is not None

    @property
    def base_step(self):
        return self._base_step

    @property
    def series(self):
        return self._series

    def row(self, i):
        if self._rows is not None:
            return self._rows[i]
        step = self.steps[i]
        return (self._series.read_tensor(step, self.tensor_name)
                - self._series.read_tensor(self._base_step, self.tensor_name))

    def dense(self):
        if self._rows is not None:
            return self._rows
        out = np.empty((self.n_steps, self.d))
        base = self._series.read_tensor(self._base_step, self.tensor_name)
        for i, step in enumerate(self.steps):
            out[i] = self._series.read_tensor(step, self.tensor_name)
            out[i] -= base
        return out

    def chunk_width(self):
        return chunk_width(self.n_steps, self.d)

    def iter_column_chunks(self, width=None, with_base=False):
        """Yield ``(start, stop, block)`` with ``block = M[:, start:stop]``.

        ``width`` must be a multiple of BLOCK so that chunk edges never split
        a Gram block. With ``with_base`` the base chunk (or None for dense
        trajectories) is yielded as a fourth item.
        """
        width = self.chunk_width() if width is None else int(width)
        if width % BLOCK:
            raise ValueError("chunk width must be a multiple of BLOCK")
        if self._rows is not None:
            for start in range(0, self.d, width):
                stop = min(start + width, self.d)
                block = self._rows[:, start:stop]
                yield (start, stop, block, None) if with_base else (start, stop, block)
            return

        name = self.tensor_name
        base_it = self._series.iter_chunks(self._base_step, name, width)
        row_its = [self._series.iter_chunks(s, name, width) for s in self.steps]
        start = 0
        for base in base_it:
            stop = start + base.size
            block = np.empty((self.n_steps, base.size))
            for i, it in enumerate(row_its):
                block[i] = next(it)
                block[i] -= base
            yield (start, stop, block, base) if with_base else (start, stop, block)
            start = stop
        for it in row_its:
            # drain so the final checksum comparison runs
            for _ in it:
                pass

    def prefix(self, upto_step):
        """Trajectory restricted to steps <= ``upto_step``."""
        keep = [i for i, s in enumerate(self.steps) if s <= upto_step]
        if not keep:
            raise EmptyWindow(f"{self.tensor_name}: no observed step <= {upto_step}")
        steps = [self.steps[i] for i in keep]
        if self._rows is not None:
            return TrajectoryMatrix(self.tensor_name, steps, self._rows[: len(keep)])
        return TrajectoryMatrix(self.tensor_name, steps, series=self._series, base_step=self._base_step)


def build_trajectory(series, name, upto_step, dense_threshold=DENSE_THRESHOLD):
    """Trajectory of tensor ``name`` over the observed steps <= ``upto_step``.

    Rows are materialized when ``T_cut * d`` is at most ``dense_threshold``;
    otherwise they are streamed from the series on demand.
    """
    if name not in series.names:
        raise UnknownTensor(name)
    steps = series.steps_upto(upto_step)
    if not steps:
        raise EmptyWindow(f"no observed step <= {upto_step} in {series.root_path}")
    traj = TrajectoryMatrix(name, steps, series=series)
    if len(steps) * traj.d <= dense_threshold:
        return TrajectoryMatrix(name, steps, traj.dense())
    return traj


def delta_norms(traj):
    """Euclidean norm of each row, in step order."""
    if traj.is_dense:
        return [float(x) for x in np.sqrt(np.einsum("ij,ij->i", traj.dense(), traj.dense()))]
    acc = np.zeros(traj.n_steps)
    for _, _, block in traj.iter_column_chunks():
        acc += np.einsum("ij,ij->i", block, block)
    return [float(x) for x in np.sqrt(acc)]
