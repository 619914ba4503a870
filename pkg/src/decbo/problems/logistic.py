"""Binary logistic regression with per-feature regularization hyperparameters.

The lower level fits a linear classifier y on each worker's training shard
under an elementwise penalty (1/d) sum_q exp(x_q) y_q^2; the upper level
scores y on the worker's validation shard with plain logistic loss. The
hyperparameter vector x only enters through the penalty, so the upper gradient
in x is zero and the mixed second derivative is diagonal, giving closed-form
Jacobian- and Hessian-vector products with no autodiff.

The penalty makes the lower level strongly convex with modulus at least
(2/d) exp(min_q x_q). Clipping x at ``x_min_bound`` (done by the optimizer
after every update) keeps that modulus, and with it the projection radius,
valid throughout a run.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .base import BilevelOracle, SampleBatch
from .data import Dataset, PartitionPlan, partition_even, partition_heterogeneous, split_dataset

__all__ = ["LogisticHyperoptProblem"]


class LogisticHyperoptProblem(BilevelOracle):
    def __init__(
        self,
        train_shards: list[Dataset],
        validation_shards: list[Dataset],
        test: Dataset | None = None,
        x_min_bound: float = -5.0,
    ):
        if len(train_shards) != len(validation_shards):
            raise ValueError("need one training and one validation shard per worker")
        self.train = train_shards
        self.validation = validation_shards
        self.test = test
        self.num_workers = len(train_shards)
        dims = {d.dim for d in train_shards} | {d.dim for d in validation_shards}
        if test is not None:
            dims.add(test.dim)
        if len(dims) != 1:
            raise ValueError(f"shards disagree on feature dimension: {sorted(dims)}")
        self.dim = dims.pop()
        self.dim_x = self.dim_y = self.dim
        self.x_min_bound = float(x_min_bound)

        self.mu = (2.0 / self.dim) * float(np.exp(self.x_min_bound))
        max_sq_norm = 0.0
        for shard in self.train:
            sq = np.asarray(shard.features.multiply(shard.features).sum(axis=1)).ravel()
            max_sq_norm = max(max_sq_norm, float(sq.max()) if sq.size else 0.0)
        # smoothness bound for hyperparameters x <= 0; grows like exp(max x) above
        self.ell_g_y = 0.25 * max_sq_norm + 2.0 / self.dim
        val_norm = 0.0
        for shard in self.validation:
            sq = np.asarray(shard.features.multiply(shard.features).sum(axis=1)).ravel()
            val_norm = max(val_norm, float(sq.max()) if sq.size else 0.0)
        self.c_f_y = float(np.sqrt(val_norm))

    @classmethod
    def from_single_dataset(
        cls,
        dataset: Dataset,
        num_workers: int,
        imbalance_ratios=None,
        seed: int = 0,
        x_min_bound: float = -5.0,
    ) -> "LogisticHyperoptProblem":
        """Standard pipeline: split 10/70/rest, then shard across workers.

        Training shards are skewed to ``imbalance_ratios`` when given,
        otherwise sharded evenly; validation is always sharded evenly; the
        test split stays global for accuracy evaluation.
        """
        train, validation, test = split_dataset(dataset, seed)
        if imbalance_ratios is not None:
            plan = PartitionPlan(num_workers, tuple(imbalance_ratios), seed=seed)
            train_shards = partition_heterogeneous(train, plan)
        else:
            train_shards = partition_even(train, num_workers, seed=seed)
        validation_shards = partition_even(validation, num_workers, seed=seed + 1)
        return cls(train_shards, validation_shards, test, x_min_bound=x_min_bound)

    # --- dataset sizes -----------------------------------------------------

    def lower_size(self, worker: int) -> int:
        return len(self.train[worker])

    def upper_size(self, worker: int) -> int:
        return len(self.validation[worker])

    # --- stochastic evaluations ----------------------------------------------

    def upper_grad_x(self, x, y, batch: SampleBatch) -> np.ndarray:
        self._vec(x, "x")
        return np.zeros(self.dim)

    def upper_grad_y(self, x, y, batch: SampleBatch) -> np.ndarray:
        feats, labels = self._rows(self.validation[batch.worker], batch.indices)
        return self._logistic_grad(feats, labels, self._vec(y, "y"))

    def lower_grad_y(self, x, y, batch: SampleBatch) -> np.ndarray:
        x = self._vec(x, "x")
        y = self._vec(y, "y")
        feats, labels = self._rows(self.train[batch.worker], batch.indices)
        return self._logistic_grad(feats, labels, y) + (2.0 / self.dim) * np.exp(x) * y

    def hessian_vec(self, x, y, z, batch: SampleBatch) -> np.ndarray:
        x = self._vec(x, "x")
        y = self._vec(y, "y")
        z = self._vec(z, "z")
        feats, labels = self._rows(self.train[batch.worker], batch.indices)
        margin = labels * (feats @ y)
        sig = expit(margin)
        curvature = sig * (1.0 - sig)
        data_term = np.asarray(feats.T @ (curvature * (feats @ z))).ravel() / len(labels)
        return data_term + (2.0 / self.dim) * np.exp(x) * z

    def jacobian_vec(self, x, y, z, batch: SampleBatch) -> np.ndarray:
        x = self._vec(x, "x")
        y = self._vec(y, "y")
        z = self._vec(z, "z")
        return (2.0 / self.dim) * np.exp(x) * y * z

    # --- full-data evaluations --------------------------------------------------

    def upper_grad_x_full(self, worker: int, x, y) -> np.ndarray:
        return np.zeros(self.dim)

    def upper_grad_y_full(self, worker: int, x, y) -> np.ndarray:
        shard = self.validation[worker]
        return self._logistic_grad(shard.features, shard.labels, self._vec(y, "y"))

    def lower_grad_y_full(self, worker: int, x, y) -> np.ndarray:
        x = self._vec(x, "x")
        y = self._vec(y, "y")
        shard = self.train[worker]
        grad = self._logistic_grad(shard.features, shard.labels, y)
        return grad + (2.0 / self.dim) * np.exp(x) * y

    def hessian_vec_full(self, worker: int, x, y, z) -> np.ndarray:
        shard = self.train[worker]
        batch = SampleBatch(worker, np.arange(len(shard)))
        return self.hessian_vec(x, y, z, batch)

    def jacobian_vec_full(self, worker: int, x, y, z) -> np.ndarray:
        x = self._vec(x, "x")
        return (2.0 / self.dim) * np.exp(x) * self._vec(y, "y") * self._vec(z, "z")

    # --- losses --------------------------------------------------------------------

    def upper_loss(self, worker: int, x, y) -> float:
        shard = self.validation[worker]
        return self._logistic_loss(shard.features, shard.labels, self._vec(y, "y"))

    def lower_loss(self, worker: int, x, y) -> float:
        x = self._vec(x, "x")
        y = self._vec(y, "y")
        shard = self.train[worker]
        penalty = float(np.sum(np.exp(x) * y * y)) / self.dim
        return self._logistic_loss(shard.features, shard.labels, y) + penalty

    # --- extras -----------------------------------------------------------------------

    def test_accuracy(self, y) -> float | None:
        if self.test is None or len(self.test) == 0:
            return None
        scores = self.test.features @ self._vec(y, "y")
        predicted = np.where(scores >= 0.0, 1, -1)
        return float(np.mean(predicted == self.test.labels))

    # --- internals ----------------------------------------------------------------------

    def _vec(self, v, name):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"{name} must have shape ({self.dim},), got {v.shape}")
        return v

    @staticmethod
    def _rows(shard: Dataset, indices) -> tuple[sp.csr_matrix, np.ndarray]:
        if indices.size and (indices.min() < 0 or indices.max() >= len(shard)):
            raise ValueError("batch indices out of range for shard")
        return shard.features[indices], shard.labels[indices]

    @staticmethod
    def _logistic_grad(feats, labels, y) -> np.ndarray:
        margins = feats @ y
        coeff = -labels * expit(-labels * margins)
        return np.asarray(feats.T @ coeff).ravel() / len(labels)

    @staticmethod
    def _logistic_loss(feats, labels, y) -> float:
        margins = feats @ y
        return float(np.mean(np.logaddexp(0.0, -labels * margins)))
