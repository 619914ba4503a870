"""Bilevel problem oracle interface.

A bilevel problem couples an upper-level objective f(x, y) with a lower-level
objective g(x, y) that is strongly convex in y. Each worker holds its own data
and exposes stochastic first-order evaluations plus two second-order products
(Jacobian-vector and Hessian-vector of g), which is all the optimizer needs.

Every stochastic evaluation takes an explicit point and an explicit batch, and
is a deterministic function of both. Variance-reduced estimators re-evaluate
the same batch at the previous iterate, so batches must be replayable.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

__all__ = ["SampleBatch", "BilevelOracle", "sample_batch"]


@dataclass(frozen=True)
class SampleBatch:
    """A minibatch of local sample indices on one worker."""

    worker: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size < 1:
            raise ValueError("batch needs at least one index")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)


def sample_batch(rng: np.random.Generator, worker: int, n_local: int, size: int) -> SampleBatch:
    """Draw ``size`` indices uniformly with replacement from a worker's data."""
    if n_local < 1:
        raise ValueError(f"worker {worker} has an empty local dataset")
    if size < 1:
        raise ValueError(f"batch size must be positive, got {size}")
    return SampleBatch(worker=worker, indices=rng.integers(0, n_local, size=size))


class BilevelOracle(ABC):
    """Per-worker stochastic evaluations of a decentralized bilevel problem.

    Concrete problems must set ``dim_x``, ``dim_y``, ``num_workers`` and the
    constants ``mu`` (lower-level strong convexity), ``ell_g_y`` (lower-level
    gradient smoothness) and ``c_f_y`` (bound on the upper gradient in y, which
    fixes the projection radius ``c_f_y / mu`` for the auxiliary variable).

    ``x_min_bound`` is an optional elementwise lower bound the optimizer clips
    x to after each update; problems whose strong convexity depends on x
    (the logistic hyperparameter problem) use it to keep ``mu`` valid.
    """

    dim_x: int
    dim_y: int
    num_workers: int
    mu: float
    ell_g_y: float
    c_f_y: float
    x_min_bound: float | None = None

    @property
    def radius(self) -> float:
        """Default projection radius for the auxiliary variable."""
        return self.c_f_y / self.mu

    # --- local dataset sizes ------------------------------------------------

    @abstractmethod
    def lower_size(self, worker: int) -> int:
        """Number of lower-level (training) samples held by a worker."""

    @abstractmethod
    def upper_size(self, worker: int) -> int:
        """Number of upper-level (validation) samples held by a worker."""

    # --- stochastic evaluations ----------------------------------------------

    @abstractmethod
    def upper_grad_x(self, x, y, batch: SampleBatch) -> np.ndarray:
        """Stochastic gradient of f in x, shape (dim_x,)."""

    @abstractmethod
    def upper_grad_y(self, x, y, batch: SampleBatch) -> np.ndarray:
        """Stochastic gradient of f in y, shape (dim_y,)."""

    @abstractmethod
    def lower_grad_y(self, x, y, batch: SampleBatch) -> np.ndarray:
        """Stochastic gradient of g in y, shape (dim_y,)."""

    @abstractmethod
    def jacobian_vec(self, x, y, z, batch: SampleBatch) -> np.ndarray:
        """Stochastic mixed second derivative of g applied to z, shape (dim_x,)."""

    @abstractmethod
    def hessian_vec(self, x, y, z, batch: SampleBatch) -> np.ndarray:
        """Stochastic Hessian of g in y applied to z, shape (dim_y,)."""

    # --- full-data evaluations -----------------------------------------------

    @abstractmethod
    def upper_grad_x_full(self, worker: int, x, y) -> np.ndarray: ...

    @abstractmethod
    def upper_grad_y_full(self, worker: int, x, y) -> np.ndarray: ...

    @abstractmethod
    def lower_grad_y_full(self, worker: int, x, y) -> np.ndarray: ...

    @abstractmethod
    def jacobian_vec_full(self, worker: int, x, y, z) -> np.ndarray: ...

    @abstractmethod
    def hessian_vec_full(self, worker: int, x, y, z) -> np.ndarray: ...

    # --- losses ---------------------------------------------------------------

    @abstractmethod
    def upper_loss(self, worker: int, x, y) -> float:
        """Upper-level loss on the worker's full local dataset."""

    @abstractmethod
    def lower_loss(self, worker: int, x, y) -> float:
        """Lower-level loss on the worker's full local dataset."""

    # --- optional extras -------------------------------------------------------

    def exact_hypergradient(self, x) -> np.ndarray | None:
        """Exact total gradient of the upper objective, when closed forms exist."""
        return None

    def test_accuracy(self, y) -> float | None:
        """Held-out classification accuracy, when the problem carries a test set."""
        return None

    # --- aggregates used by telemetry ------------------------------------------

    def global_upper_loss(self, x, y) -> float:
        return float(
            np.mean([self.upper_loss(k, x, y) for k in range(self.num_workers)])
        )

    def hypergradient_estimate(self, x, y, z) -> np.ndarray:
        """Full-data hypergradient assembly at an arbitrary point (x, y, z)."""
        parts = [
            self.upper_grad_x_full(k, x, y) - self.jacobian_vec_full(k, x, y, z)
            for k in range(self.num_workers)
        ]
        return np.mean(parts, axis=0)
