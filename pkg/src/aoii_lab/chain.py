"""Finite discrete-time Markov chain sources.

States are 1-based at every public entry point; the stored matrix is an
ordinary 0-based numpy array.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

ROW_TOL = 1e-12


class ChainError(ValueError):
    pass


class RowNotStochastic(ChainError):
    def __init__(self, row: int, deviation: float):
        super().__init__(f"row {row} sums to 1{deviation:+.3g}")
        self.row = row
        self.deviation = deviation


class NegativeEntry(ChainError):
    def __init__(self, row: int, col: int, value: float):
        super().__init__(f"entry ({row}, {col}) is negative: {value}")
        self.row, self.col, self.value = row, col, value


class TooFewStates(ChainError):
    pass


class NoConvergence(RuntimeError):
    """An iterative fixed-point search did not settle."""


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    rows: np.ndarray
    _cumulative: tuple = field(init=False, repr=False)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1]:
            raise ChainError(f"transition matrix must be square, got shape {rows.shape}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        cum = []
        for r in rows:
            c = list(np.cumsum(r))
            c[-1] = float("inf")  # absorbs rounding at the top of the row
            cum.append(tuple(c))
        object.__setattr__(self, "_cumulative", tuple(cum))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def __eq__(self, other):
        return isinstance(other, TransitionMatrix) and np.array_equal(self.rows, other.rows)

    def __hash__(self):
        return hash(self.rows.tobytes())

    def tolist(self) -> list[list[float]]:
        return self.rows.tolist()


def validate(matrix: TransitionMatrix) -> TransitionMatrix:
    """Raise a :class:`ChainError` unless ``matrix`` is a proper stochastic matrix.

    Returns the matrix so calls can be chained.
    """
    rows = matrix.rows
    if matrix.n < 2:
        raise TooFewStates(f"need at least 2 states, got {matrix.n}")
    neg = np.argwhere(rows < 0)
    if len(neg):
        i, j = neg[0]
        raise NegativeEntry(int(i) + 1, int(j) + 1, float(rows[i, j]))
    for i, s in enumerate(rows.sum(axis=1)):
        if abs(s - 1.0) > ROW_TOL:
            raise RowNotStochastic(i + 1, float(s - 1.0))
    return matrix


def step(matrix: TransitionMatrix, current: int, rng: np.random.Generator) -> int:
    """Draw the successor of 1-based state ``current`` using one uniform draw."""
    u = rng.random()
    return bisect.bisect_right(matrix._cumulative[current - 1], u) + 1


def power(matrix: TransitionMatrix, k: int) -> np.ndarray:
    if k < 0:
        raise ValueError("k must be nonnegative")
    return np.linalg.matrix_power(matrix.rows, k)


def stationary(matrix: TransitionMatrix, max_iter: int = 10**6, tol: float = 1e-12) -> np.ndarray:
    """Stationary distribution by power iteration on the full matrix.

    Iterating every row at once exposes reducible chains: the iterate settles
    with rows that still disagree. Periodic chains never settle and run into
    ``max_iter``.
    """
    P = matrix.rows
    M = P.copy()
    for _ in range(max_iter):
        nxt = M @ P
        moved = np.max(np.abs(nxt - M))
        M = nxt
        if moved < tol:
            spread = np.max(np.abs(M - M[0]))
            if spread > 1e-6:
                raise NoConvergence(f"rows of P^k settle to different limits (spread {spread:.3g}); chain is not ergodic")
            if spread < 1e-10:
                p = M.mean(axis=0)
                return p / p.sum()
    raise NoConvergence(f"power iteration did not converge in {max_iter} iterations")


P1 = TransitionMatrix([[0.85, 0.15], [0.25, 0.75]])
P2 = TransitionMatrix([[0.70, 0.25, 0.05], [0.05, 0.90, 0.05], [0.10, 0.30, 0.60]])

NAMED = {"P1": P1, "P2": P2}
