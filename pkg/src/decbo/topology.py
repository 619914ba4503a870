"""Communication graphs and their doubly stochastic gossip matrices.

Workers exchange state along the edges of an undirected graph. The mixing
weights form a symmetric doubly stochastic matrix; the magnitude of its
second-largest eigenvalue (``lambda2``) controls how fast gossip averaging
contracts disagreement between workers, via the spectral gap ``1 - lambda2``.

Regular graphs (ring, torus) use uniform weights 1/(deg+1); random graphs use
the Metropolis rule, which keeps the matrix symmetric and doubly stochastic
for irregular degrees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MixingMatrix",
    "MixingDiagnostics",
    "GraphConstructionError",
    "build_ring",
    "build_torus",
    "build_random",
    "spectral_lambda",
    "validate_mixing",
]

ROW_SUM_TOL = 1e-12
CONNECTIVITY_TOL = 1e-12


class GraphConstructionError(RuntimeError):
    """Raised when a random graph cannot be made connected within the retry budget."""


def spectral_lambda(weights: np.ndarray) -> float:
    """Second-largest eigenvalue magnitude of a symmetric stochastic matrix.

    Returns ``max(|lambda_2|, ..., |lambda_K|)`` after discarding one copy of
    the leading eigenvalue. A disconnected graph yields 1.0. For a single node
    there is no second eigenvalue and the result is 0.0.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape[0] == 1:
        return 0.0
    eigenvalues = np.linalg.eigvalsh(w)
    order = np.argsort(np.abs(eigenvalues))[::-1]
    return float(abs(eigenvalues[order[1]]))


@dataclass(frozen=True)
class MixingDiagnostics:
    """Defect report for a candidate mixing matrix."""

    symmetry_defect: float
    row_sum_defect: float
    col_sum_defect: float
    min_entry: float
    lambda2: float
    passed: bool

    def failures(self) -> list[str]:
        out = []
        if self.symmetry_defect > 0.0:
            out.append(f"symmetry defect {self.symmetry_defect:.3g}")
        if self.row_sum_defect > ROW_SUM_TOL:
            out.append(f"row sum defect {self.row_sum_defect:.3g}")
        if self.col_sum_defect > ROW_SUM_TOL:
            out.append(f"column sum defect {self.col_sum_defect:.3g}")
        if self.min_entry < 0.0:
            out.append(f"negative entry {self.min_entry:.3g}")
        if self.lambda2 > 1.0 - CONNECTIVITY_TOL:
            out.append(f"lambda2 {self.lambda2:.12g} (graph not connected)")
        return out


def validate_mixing(weights: np.ndarray) -> MixingDiagnostics:
    """Diagnose whether an arbitrary square matrix is a valid mixing matrix.

    Symmetry must be exact (builders construct it, they do not round into it);
    row and column sums must be 1 within ``ROW_SUM_TOL``; entries must be
    nonnegative; the second eigenvalue magnitude must be strictly below 1.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"mixing matrix must be square, got shape {w.shape}")
    symmetry = float(np.max(np.abs(w - w.T))) if w.size else 0.0
    row_defect = float(np.max(np.abs(w.sum(axis=1) - 1.0)))
    col_defect = float(np.max(np.abs(w.sum(axis=0) - 1.0)))
    min_entry = float(w.min())
    # eigvalsh assumes symmetry; fall back to general eigenvalues otherwise
    if symmetry == 0.0:
        lam = spectral_lambda(w)
    else:
        eigenvalues = np.linalg.eigvals(w)
        mags = np.sort(np.abs(eigenvalues))[::-1]
        lam = float(mags[1]) if len(mags) > 1 else 0.0
    passed = (
        symmetry == 0.0
        and row_defect <= ROW_SUM_TOL
        and col_defect <= ROW_SUM_TOL
        and min_entry >= 0.0
        and lam < 1.0 - CONNECTIVITY_TOL
    )
    return MixingDiagnostics(symmetry, row_defect, col_defect, min_entry, lam, passed)


@dataclass(frozen=True)
class MixingMatrix:
    """Validated gossip weights over a connected undirected graph.

    Attributes:
        size: worker count K.
        weights: (K, K) symmetric doubly stochastic matrix, read-only.
        lambda2: second-largest eigenvalue magnitude, in [0, 1).
        degree: per-node neighbor count, self-loop excluded.
    """

    size: int
    weights: np.ndarray
    lambda2: float
    degree: np.ndarray

    @classmethod
    def from_weights(cls, weights: np.ndarray) -> "MixingMatrix":
        w = np.array(weights, dtype=float)
        diag = validate_mixing(w)
        if not diag.passed:
            raise ValueError("invalid mixing matrix: " + "; ".join(diag.failures()))
        off = w.copy()
        np.fill_diagonal(off, 0.0)
        degree = np.count_nonzero(off, axis=1)
        w.setflags(write=False)
        degree.setflags(write=False)
        return cls(size=w.shape[0], weights=w, lambda2=diag.lambda2, degree=degree)

    @classmethod
    def single(cls) -> "MixingMatrix":
        """Degenerate one-worker topology: no communication at all."""
        w = np.ones((1, 1))
        w.setflags(write=False)
        deg = np.zeros(1, dtype=int)
        deg.setflags(write=False)
        return cls(size=1, weights=w, lambda2=0.0, degree=deg)

    @property
    def directed_edges(self) -> int:
        """Number of directed communication links, sum of all degrees."""
        return int(self.degree.sum())

    def validate(self) -> MixingDiagnostics:
        return validate_mixing(self.weights)


def build_ring(k: int) -> MixingMatrix:
    """Cyclic ring: each node linked to its two cyclic neighbors.

    Weights are uniform 1/(deg+1): 1/3 on self and each neighbor for K >= 3.
    For K=2 the two cyclic neighbors coincide, so the single edge gets 1/2.
    """
    if k < 2:
        raise ValueError(f"ring topology needs at least 2 workers, got {k}")
    w = np.zeros((k, k))
    for i in range(k):
        neighbors = {(i - 1) % k, (i + 1) % k}
        share = 1.0 / (len(neighbors) + 1)
        w[i, i] = share
        for j in neighbors:
            w[i, j] = share
    return MixingMatrix.from_weights(w)


def build_torus(rows: int, cols: int) -> MixingMatrix:
    """2-D grid with wrap-around; weight 1/5 on self and each of 4 directions.

    When rows == 2 (or cols == 2) the up/down (left/right) wrap-around edges
    point at the same node and their weights merge to 2/5.
    """
    if rows < 2 or cols < 2:
        raise ValueError(
            f"torus needs rows >= 2 and cols >= 2 (rows*cols >= 4), got {rows}x{cols}"
        )
    k = rows * cols
    w = np.zeros((k, k))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            w[i, i] = 0.2
            for rr, cc in (
                ((r - 1) % rows, c),
                ((r + 1) % rows, c),
                (r, (c - 1) % cols),
                (r, (c + 1) % cols),
            ):
                w[i, rr * cols + cc] += 0.2
    return MixingMatrix.from_weights(w)


def build_random(k: int, p: float, seed: int, max_retries: int = 1000) -> MixingMatrix:
    """Erdos-Renyi graph with Metropolis weights, resampled until connected.

    A pure function of (k, p, seed): the same arguments always produce the
    same matrix. Disconnected draws are discarded and redrawn from the same
    seeded stream, up to ``max_retries`` attempts.
    """
    if k < 2:
        raise ValueError(f"random topology needs at least 2 workers, got {k}")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"edge probability must be in (0, 1], got {p}")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        draw = rng.random((k, k))
        adjacency = np.triu(draw < p, 1)
        adjacency = adjacency | adjacency.T
        if _is_connected(adjacency):
            return MixingMatrix.from_weights(_metropolis_weights(adjacency))
    raise GraphConstructionError(
        f"no connected graph with K={k}, p={p} after {max_retries} samples"
    )


def _is_connected(adjacency: np.ndarray) -> bool:
    k = adjacency.shape[0]
    reached = np.zeros(k, dtype=bool)
    reached[0] = True
    frontier = reached.copy()
    while frontier.any():
        frontier = (adjacency[frontier].any(axis=0)) & ~reached
        reached |= frontier
    return bool(reached.all())


def _metropolis_weights(adjacency: np.ndarray) -> np.ndarray:
    k = adjacency.shape[0]
    degree = adjacency.sum(axis=1)
    w = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            if adjacency[i, j]:
                w[i, j] = w[j, i] = 1.0 / (1.0 + max(degree[i], degree[j]))
    for i in range(k):
        w[i, i] = 1.0 - w[i].sum()
    return w
