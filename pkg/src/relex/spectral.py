"""Truncated SVD of trajectory matrices through their T x T Gram matrix.

The trajectory matrix M is short and extremely wide (T rows, d up to 1e8
columns), so everything that touches d is a streaming pass over column
chunks; everything else is T x T dense algebra.
"""

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import (
    DegenerateAbscissa,
    DegenerateDirection,
    NearZeroSingularValue,
    NotSymmetric,
    RankOutOfRange,
    SingularSystem,
    TooFewPoints,
    ZeroTrajectory,
)
from .trajectory import BLOCK

# rows per Gram tile; entry (i, j) only ever sees tile-aligned copies of rows
# i and j, so it is bitwise independent of how many rows the trajectory has
TILE = 8

JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 30
NEAR_ZERO_RATIO = 1e-12


# -- Gram matrix ----------------------------------------------------------------

class _PairwiseSum:
    """Binary-counter pairwise summation of equally shaped arrays.

    The reduction tree depends only on how many terms were added, never on
    how callers batched them.
    """

    def __init__(self):
        self._stack = []  # (level, partial)

    def add(self, x):
        level = 0
        while self._stack and self._stack[-1][0] == level:
            _, prev = self._stack.pop()
            x = prev + x
            level += 1
        self._stack.append((level, x))

    def total(self):
        if not self._stack:
            return None
        acc = self._stack[-1][1]
        for _, x in reversed(self._stack[:-1]):
            acc = x + acc
        return acc


def _block_grams(block, tile_start=0):
    """Per-BLOCK partial Gram matrices of a column chunk (upper tiles only)."""
    t, n = block.shape
    nt = -(-t // TILE)
    tp = nt * TILE
    nb = -(-n // BLOCK)
    padded = np.zeros((tp, nb * BLOCK))
    padded[:t, :n] = block
    padded = padded.reshape(nt, TILE, nb, BLOCK)
    tiles = [np.ascontiguousarray(padded[a].transpose(1, 0, 2)) for a in range(nt)]
    del padded
    out = np.zeros((nb, tp, tp))
    for b in range(tile_start, nt):
        right = tiles[b].transpose(0, 2, 1)
        for a in range(b + 1):
            out[:, a * TILE:(a + 1) * TILE, b * TILE:(b + 1) * TILE] = np.matmul(tiles[a], right)
    return out


def _mirror_upper(g):
    upper = np.triu(g)
    return upper + np.triu(g, 1).T


def _accumulate_gram(traj, tile_start=0):
    acc = _PairwiseSum()
    for _, _, block in traj.iter_column_chunks():
        for partial in _block_grams(block, tile_start):
            acc.add(partial)
    t = traj.n_steps
    return acc.total()[:t, :t]


def gram_matrix(traj):
    """G[i, j] = <row_i, row_j>, accumulated blockwise with pairwise summation.

    Only the upper triangle is computed; the lower one is its mirror, so G
    is exactly symmetric.
    """
    return _mirror_upper(_accumulate_gram(traj))


class GramCache:
    """Gram matrix of one tensor's trajectory, reusable across cutoffs.

    The Gram matrix of a prefix trajectory is the leading block of the
    full one, and the tiled kernel makes that relation exact: ``gram_for``
    returns bitwise the same matrix as recomputing from scratch.
    ``extend`` adds rows by computing only the new bordered tiles.
    """

    def __init__(self, traj=None):
        self.steps = ()
        self._upper = None
        if traj is not None:
            self.extend(traj)

    def extend(self, traj):
        if self.steps and traj.steps[: len(self.steps)] != self.steps:
            raise ValueError("new trajectory must extend the cached steps")
        old = len(self.steps)
        if old == traj.n_steps:
            return self
        tile_start = old // TILE
        fresh = _accumulate_gram(traj, tile_start)
        if self._upper is not None:
            keep = tile_start * TILE
            fresh[:keep, :keep] = self._upper[:keep, :keep]
        self._upper = fresh
        self.steps = traj.steps
        return self

    def gram_for(self, traj):
        t = traj.n_steps
        if traj.steps != self.steps[:t]:
            raise KeyError("trajectory is not a prefix of the cached one")
        return _mirror_upper(self._upper[:t, :t])


# -- symmetric eigensolver -------------------------------------------------------

def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair exactly once."""
    players = list(range(n + (n % 2)))
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        if pairs:
            rounds.append(np.array(pairs).T)
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def sym_eigendecomp(G, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Pairs are visited in round-robin order so that each round is a set of
    disjoint rotations applied at once. Stops when the off-diagonal
    Frobenius norm is at most ``tol * ||G||_F`` or after ``max_sweeps``.

    Returns
    -------
    eigenvalues : (n,) array, descending
    eigenvectors : (n, n) array, orthonormal columns
    """
    A = np.array(G, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {A.shape}")
    n = A.shape[0]
    norm = np.linalg.norm(A)
    if np.linalg.norm(A - A.T) > 1e-10 * norm:
        raise NotSymmetric("matrix is not symmetric within 1e-10 relative")
    A = 0.5 * (A + A.T)
    Q = np.eye(n)
    eye = np.eye(n, dtype=bool)
    rounds = _round_robin(n)

    for _ in range(max_sweeps):
        # summed directly: ||A||^2 - ||diag||^2 cancels catastrophically
        off = np.linalg.norm(A[~eye])
        if off <= tol * norm:
            break
        for p, q in rounds:
            apq = A[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            with np.errstate(over="ignore"):
                # theta = inf just gives t = 0
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c

            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = c * Ap - s * Aq
            A[:, q] = s * Ap + c * Aq
            Ap, Aq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            A[p, q] = 0.0
            A[q, p] = 0.0

            Qp, Qq = Q[:, p].copy(), Q[:, q].copy()
            Q[:, p] = c * Qp - s * Qq
            Q[:, q] = s * Qp + c * Qq

    lam = np.diag(A).copy()
    order = np.argsort(-lam, kind="stable")
    return lam[order], Q[:, order]


# -- truncated SVD -------------------------------------------------------------

@dataclass
class SpectralDecomposition:
    """Top-r factors of a trajectory matrix.

    ``right_vectors`` has one unit row per component; ``coefficients`` is
    ``left_vectors * singular_values`` (C_r = U_r Sigma_r).
    """

    rank: int
    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray
    coefficients: np.ndarray
    steps: tuple = ()

    def reconstruct_row(self, i):
        return self.coefficients[i] @ self.right_vectors

    def flip(self, k):
        """Negate component ``k`` (left vector, right vector, coefficients)."""
        self.left_vectors[:, k] *= -1.0
        self.right_vectors[k] *= -1.0
        self.coefficients[:, k] *= -1.0


SLOPE_ZERO_RATIO = 1e-12


def _orient(decomp, steps):
    # slope >= 0, else last coefficient >= 0; a slope within rounding of zero
    # counts as zero so the tie rule is not decided by noise
    t = np.asarray(steps, dtype=np.float64)
    dt = t - t.mean()
    for k in range(decomp.rank):
        c = decomp.coefficients[:, k]
        slope = float(np.dot(dt, c - c.mean()))
        if abs(slope) <= SLOPE_ZERO_RATIO * float(np.linalg.norm(dt)) * float(np.linalg.norm(c)):
            slope = 0.0
        if slope < 0 or (slope == 0 and c[-1] < 0):
            decomp.flip(k)


def project_columns(traj, U):
    """B = M^T U computed by streaming over column chunks; shape (d, k)."""
    U = np.asarray(U, dtype=np.float64)
    B = np.empty((traj.d, U.shape[1]))
    for start, stop, block in traj.iter_column_chunks():
        B[start:stop] = block.T @ U
    return B


def truncated_svd(traj, r, gram=None, strict=True):
    """Top-``r`` singular triples of the trajectory matrix via its Gram matrix.

    G = M M^T is eigendecomposed; each left vector u_k is mapped back with
    one streaming pass, b_k = M^T u_k, and sigma_k = ||b_k||, v_k = b_k /
    sigma_k. Taking sigma_k from ||M^T u_k|| rather than sqrt(lambda_k)
    keeps v_k exactly unit-norm and preserves small singular values that
    the squared conditioning of G would otherwise blur.

    Components are oriented so each coefficient series has non-negative
    slope over the steps (ties broken by the last coefficient).

    With ``strict`` a trailing component with sigma_r < 1e-12 sigma_1 raises
    NearZeroSingularValue; otherwise such components are returned as-is
    (with zero right vectors when sigma is exactly zero).
    """
    T = traj.n_steps
    if not 1 <= r <= T:
        raise RankOutOfRange(f"rank {r} outside [1, {T}]")
    G = gram_matrix(traj) if gram is None else np.asarray(gram)
    if not np.any(np.diag(G) > 0):
        raise ZeroTrajectory(f"{traj.tensor_name}: trajectory is identically zero")
    _, Q = sym_eigendecomp(G)
    U = Q[:, :r].copy()
    B = project_columns(traj, U)
    sigma = np.sqrt(np.einsum("ij,ij->j", B, B))
    order = np.argsort(-sigma, kind="stable")
    if np.any(order != np.arange(r)):
        # fancy indexing copies B, so only pay for it when the order changes
        sigma, U, B = sigma[order], U[:, order], B[:, order]
    if sigma[0] == 0:
        raise ZeroTrajectory(f"{traj.tensor_name}: trajectory is identically zero")
    if strict and sigma[-1] < NEAR_ZERO_RATIO * sigma[0]:
        raise NearZeroSingularValue(
            f"{traj.tensor_name}: sigma_{r} = {sigma[-1]:.3e} is degenerate (sigma_1 = {sigma[0]:.3e})")
    safe = np.where(sigma > 0, sigma, 1.0)
    B /= safe
    B[:, sigma == 0] = 0.0
    decomp = SpectralDecomposition(
        rank=r,
        singular_values=sigma,
        left_vectors=U,
        right_vectors=B.T,
        coefficients=U * sigma,
        steps=traj.steps,
    )
    _orient(decomp, traj.steps)
    return decomp


# -- curve fits ----------------------------------------------------------------

@dataclass(frozen=True)
class LinearFit:
    a: float
    b: float
    r_squared: float

    def __call__(self, t):
        return self.a * np.asarray(t, dtype=np.float64) + self.b


def _r_squared(ss_res, ss_tot):
    if ss_tot == 0:
        return 1.0 if ss_res <= 1e-24 else 0.0
    return float(min(1.0, max(0.0, 1.0 - ss_res / ss_tot)))


def linear_fit(ts, cs):
    """Least-squares line c = a t + b with a = Cov(t, c) / Var(t)."""
    t = np.asarray(ts, dtype=np.float64)
    c = np.asarray(cs, dtype=np.float64)
    if t.shape != c.shape or t.ndim != 1:
        raise TooFewPoints("ts and cs must be 1-D and of equal length")
    if t.size < 2:
        raise TooFewPoints(f"need at least 2 points, got {t.size}")
    tbar, cbar = t.mean(), c.mean()
    dt = t - tbar
    sxx = float(np.dot(dt, dt))
    if sxx == 0:
        raise DegenerateAbscissa("all abscissae are equal")
    if np.ptp(c) == 0:
        # exact answer; the rounded mean would leave a spurious slope
        return LinearFit(0.0, float(c[0]), 1.0)
    a = float(np.dot(dt, c - cbar)) / sxx
    b = float(cbar - a * tbar)
    resid = c - (a * t + b)
    dc = c - cbar
    return LinearFit(a, b, _r_squared(float(np.dot(resid, resid)), float(np.dot(dc, dc))))


@dataclass(frozen=True)
class PolyFit:
    """Polynomial in t; ``coeffs`` are ascending powers of t itself.

    Evaluation goes through the centred, scaled basis the fit was solved
    in, which is far better conditioned than the expanded monomials.
    """

    order: int
    coeffs: tuple
    center: float = 0.0
    scale: float = 1.0
    scaled_coeffs: tuple = ()

    def __call__(self, t):
        s = (np.asarray(t, dtype=np.float64) - self.center) / self.scale
        return np.polynomial.polynomial.polyval(s, self.scaled_coeffs)


def _poly_design(ts, order, center, scale):
    s = (np.asarray(ts, dtype=np.float64) - center) / scale
    return np.vander(s, order + 1, increasing=True)


def poly_fit(ts, cs, order):
    """Least-squares polynomial of degree ``order`` via normal equations.

    The abscissae are mapped onto [-1, 1] before forming the normal
    equations; the reported coefficients are converted back to t.
    """
    t = np.asarray(ts, dtype=np.float64)
    c = np.asarray(cs, dtype=np.float64)
    order = int(order)
    if order < 1:
        raise ValueError("order must be >= 1")
    if t.size < order + 1 or t.shape != c.shape:
        raise TooFewPoints(f"order {order} needs at least {order + 1} points")
    lo, hi = float(t.min()), float(t.max())
    if hi == lo:
        raise SingularSystem("all abscissae are equal")
    center, scale = 0.5 * (hi + lo), 0.5 * (hi - lo)
    V = _poly_design(t, order, center, scale)
    N = V.T @ V
    if np.linalg.cond(N) > 1e13:
        raise SingularSystem(f"normal equations are singular (too few distinct abscissae for order {order})")
    p = np.linalg.solve(N, V.T @ c)
    # p_k ((t - center)/scale)^k expanded in powers of t
    coeffs = [
        sum(p[k] * comb(k, j) * (-center) ** (k - j) / scale ** k for k in range(j, order + 1))
        for j in range(order + 1)
    ]
    return PolyFit(order, tuple(float(x) for x in coeffs), center, scale, tuple(float(x) for x in p))


def fit_curve(ts, cs, fit_kind="linear"):
    """Dispatch on a fit name: ``"linear"`` or ``"polyN"``."""
    if fit_kind == "linear":
        return linear_fit(ts, cs)
    if isinstance(fit_kind, str) and fit_kind.startswith("poly"):
        return poly_fit(ts, cs, int(fit_kind[4:] or 3))
    raise ValueError(f"unknown fit kind {fit_kind!r}")


# -- single-component PLS --------------------------------------------------------

@dataclass(frozen=True)
class PLS1:
    weights: np.ndarray      # w, unit norm
    loadings: np.ndarray     # p = X_c^T s / <s, s>
    q: float                 # y_c ~ q * s
    x_mean: np.ndarray
    y_mean: float

    def scores(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) @ self.weights

    def predict(self, X):
        return self.y_mean + self.q * self.scores(X)

    def invert(self, y):
        """Point in X-space whose predicted response is ``y``."""
        s = (float(y) - self.y_mean) / self.q
        return self.x_mean + s * self.loadings


def pls1_fit(X, y):
    """One-component PLS1 of a response ``y`` on rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise TooFewPoints("X must be n x p with n == len(y)")
    if X.shape[0] < 2:
        raise TooFewPoints("PLS needs at least two observations")
    x_mean, y_mean = X.mean(axis=0), float(y.mean())
    Xc, yc = X - x_mean, y - y_mean
    w = Xc.T @ yc
    wn = float(np.linalg.norm(w))
    if wn < 1e-14 * max(1.0, float(np.linalg.norm(Xc)) * float(np.linalg.norm(yc))):
        raise DegenerateDirection("X and y have no covariance direction")
    w = w / wn
    s = Xc @ w
    ss = float(np.dot(s, s))
    return PLS1(w, Xc.T @ s / ss, float(np.dot(s, yc)) / ss, x_mean, y_mean)
