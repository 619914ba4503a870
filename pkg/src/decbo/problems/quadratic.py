"""Synthetic quadratic bilevel family with closed-form solutions.

Worker k holds
    lower:  g_k(x, y) = 0.5 y'A_k y - y'(B_k x + c_k)
    upper:  f_k(x, y) = 0.5 ||y - d_k||^2 + 0.5 rho ||x||^2
with A_k symmetric positive definite. Distinct A_k across workers give the
family unbounded gradient heterogeneity, which is exactly what makes it a
useful stress case; the closed forms below make it the verification oracle.

Stochasticity is simulated: each "sample" index carries a fixed Gaussian
perturbation drawn from a seeded stream keyed by (seed, worker, stream,
index), independent of the evaluation point. Re-evaluating one batch at two
different points therefore adds the same noise realization to both, which is
what recursive variance-reduced estimators assume. Second-order products get
matrix-shaped perturbations so they stay exactly linear in z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .base import BilevelOracle, SampleBatch

__all__ = [
    "QuadraticBilevelProblem",
    "ExactSolution",
    "generate_instance",
    "save_instance",
    "load_instance",
]

# noise stream tags, one per stochastic evaluation
_S_UPPER_X = 0
_S_UPPER_Y = 1
_S_LOWER_Y = 2
_S_JACOBIAN = 3
_S_HESSIAN = 4


@dataclass(frozen=True)
class ExactSolution:
    """Closed-form lower solution, auxiliary solution, and hypergradient at x."""

    y_star: np.ndarray
    z_star: np.ndarray
    hypergrad: np.ndarray


class QuadraticBilevelProblem(BilevelOracle):
    def __init__(
        self,
        a_mats,
        b_mats,
        c_vecs,
        d_vecs,
        rho: float = 1.0,
        noise_sigma: float = 0.0,
        n_virtual: int = 100_000,
        seed: int = 0,
        x_ref_radius: float = 10.0,
    ):
        self.a = [np.array(m, dtype=float) for m in a_mats]
        self.b = [np.array(m, dtype=float) for m in b_mats]
        self.c = [np.array(v, dtype=float) for v in c_vecs]
        self.d = [np.array(v, dtype=float) for v in d_vecs]
        self.rho = float(rho)
        self.noise_sigma = float(noise_sigma)
        self.n_virtual = int(n_virtual)
        self.seed = int(seed)
        self.x_ref_radius = float(x_ref_radius)

        self.num_workers = len(self.a)
        if not (len(self.b) == len(self.c) == len(self.d) == self.num_workers):
            raise ValueError("per-worker matrix lists must have equal length")
        self.dim_y, self.dim_x = self.b[0].shape
        for k in range(self.num_workers):
            if self.a[k].shape != (self.dim_y, self.dim_y):
                raise ValueError(f"worker {k}: A must be ({self.dim_y},{self.dim_y})")
            if self.b[k].shape != (self.dim_y, self.dim_x):
                raise ValueError(f"worker {k}: B must be ({self.dim_y},{self.dim_x})")
            if self.c[k].shape != (self.dim_y,) or self.d[k].shape != (self.dim_y,):
                raise ValueError(f"worker {k}: c and d must be ({self.dim_y},)")
            if np.max(np.abs(self.a[k] - self.a[k].T)) != 0.0:
                raise ValueError(f"worker {k}: A must be symmetric")

        eigs = [np.linalg.eigvalsh(m) for m in self.a]
        self.mu = float(min(e[0] for e in eigs))
        self.ell_g_y = float(max(e[-1] for e in eigs))
        if self.mu <= 0.0:
            raise ValueError("every A must be positive definite")

        self.a_bar = np.mean(self.a, axis=0)
        self.b_bar = np.mean(self.b, axis=0)
        self.c_bar = np.mean(self.c, axis=0)
        self.d_bar = np.mean(self.d, axis=0)

        # c_f_y bounds ||grad_y f_k|| = ||y*(x) - d_k|| over ||x|| <= x_ref_radius,
        # which guarantees ||z*(x)|| <= c_f_y / mu on that region.
        gain = np.linalg.solve(self.a_bar, self.b_bar)
        base = np.linalg.solve(self.a_bar, self.c_bar)
        self.c_f_y = float(
            np.linalg.norm(gain, 2) * self.x_ref_radius
            + max(np.linalg.norm(base - dk) for dk in self.d)
        )

    # --- closed forms ---------------------------------------------------------

    def exact(self, x) -> ExactSolution:
        """Noise-free lower/auxiliary solutions and the exact hypergradient."""
        x = self._vec(x, self.dim_x, "x")
        y_star = np.linalg.solve(self.a_bar, self.b_bar @ x + self.c_bar)
        z_star = np.linalg.solve(self.a_bar, y_star - self.d_bar)
        hypergrad = self.rho * x + self.b_bar.T @ z_star
        return ExactSolution(y_star=y_star, z_star=z_star, hypergrad=hypergrad)

    def exact_hypergradient(self, x):
        return self.exact(x).hypergrad

    # --- dataset sizes ----------------------------------------------------------

    def lower_size(self, worker: int) -> int:
        return self.n_virtual

    def upper_size(self, worker: int) -> int:
        return self.n_virtual

    # --- stochastic evaluations ---------------------------------------------------

    def upper_grad_x(self, x, y, batch: SampleBatch) -> np.ndarray:
        g = self._upper_grad_x_clean(batch.worker, x, y)
        return g + self._vector_noise(batch, _S_UPPER_X, self.dim_x)

    def upper_grad_y(self, x, y, batch: SampleBatch) -> np.ndarray:
        g = self._upper_grad_y_clean(batch.worker, x, y)
        return g + self._vector_noise(batch, _S_UPPER_Y, self.dim_y)

    def lower_grad_y(self, x, y, batch: SampleBatch) -> np.ndarray:
        g = self._lower_grad_y_clean(batch.worker, x, y)
        return g + self._vector_noise(batch, _S_LOWER_Y, self.dim_y)

    def hessian_vec(self, x, y, z, batch: SampleBatch) -> np.ndarray:
        z = self._vec(z, self.dim_y, "z")
        out = self.a[batch.worker] @ z
        if self.noise_sigma > 0.0:
            out = out + self._batch_noise(batch, _S_HESSIAN, (self.dim_y,)) * z
        return out

    def jacobian_vec(self, x, y, z, batch: SampleBatch) -> np.ndarray:
        z = self._vec(z, self.dim_y, "z")
        out = -(self.b[batch.worker].T @ z)
        if self.noise_sigma > 0.0:
            out = out + self._batch_noise(batch, _S_JACOBIAN, (self.dim_x, self.dim_y)) @ z
        return out

    # --- full-data evaluations (exact expectations) ----------------------------------

    def upper_grad_x_full(self, worker: int, x, y) -> np.ndarray:
        return self._upper_grad_x_clean(worker, x, y)

    def upper_grad_y_full(self, worker: int, x, y) -> np.ndarray:
        return self._upper_grad_y_clean(worker, x, y)

    def lower_grad_y_full(self, worker: int, x, y) -> np.ndarray:
        return self._lower_grad_y_clean(worker, x, y)

    def hessian_vec_full(self, worker: int, x, y, z) -> np.ndarray:
        return self.a[worker] @ self._vec(z, self.dim_y, "z")

    def jacobian_vec_full(self, worker: int, x, y, z) -> np.ndarray:
        return -(self.b[worker].T @ self._vec(z, self.dim_y, "z"))

    # --- losses ------------------------------------------------------------------------

    def upper_loss(self, worker: int, x, y) -> float:
        x = self._vec(x, self.dim_x, "x")
        y = self._vec(y, self.dim_y, "y")
        diff = y - self.d[worker]
        return float(0.5 * diff @ diff + 0.5 * self.rho * x @ x)

    def lower_loss(self, worker: int, x, y) -> float:
        x = self._vec(x, self.dim_x, "x")
        y = self._vec(y, self.dim_y, "y")
        return float(0.5 * y @ (self.a[worker] @ y) - y @ (self.b[worker] @ x + self.c[worker]))

    # --- internals -----------------------------------------------------------------------

    def _upper_grad_x_clean(self, worker, x, y):
        return self.rho * self._vec(x, self.dim_x, "x")

    def _upper_grad_y_clean(self, worker, x, y):
        return self._vec(y, self.dim_y, "y") - self.d[worker]

    def _lower_grad_y_clean(self, worker, x, y):
        x = self._vec(x, self.dim_x, "x")
        y = self._vec(y, self.dim_y, "y")
        return self.a[worker] @ y - (self.b[worker] @ x + self.c[worker])

    @staticmethod
    def _vec(v, dim, name):
        v = np.asarray(v, dtype=float)
        if v.shape != (dim,):
            raise ValueError(f"{name} must have shape ({dim},), got {v.shape}")
        return v

    def _vector_noise(self, batch: SampleBatch, stream: int, dim: int) -> float | np.ndarray:
        if self.noise_sigma == 0.0:
            return 0.0
        return self._batch_noise(batch, stream, (dim,))

    def _batch_noise(self, batch: SampleBatch, stream: int, shape) -> np.ndarray:
        acc = np.zeros(shape)
        for index in batch.indices:
            acc += self._index_noise(batch.worker, stream, int(index), shape)
        return acc * (self.noise_sigma / len(batch))

    def _index_noise(self, worker: int, stream: int, index: int, shape) -> np.ndarray:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(worker, stream, index))
        return np.random.Generator(np.random.PCG64(ss)).standard_normal(shape)


def generate_instance(
    dim_x: int,
    dim_y: int,
    num_workers: int,
    seed: int = 0,
    eig_range: tuple[float, float] = (0.5, 2.0),
    coupling_scale: float = 1.0,
    offset_scale: float = 1.0,
    rho: float = 1.0,
    noise_sigma: float = 0.0,
    n_virtual: int = 100_000,
    x_ref_radius: float = 10.0,
) -> QuadraticBilevelProblem:
    """Random heterogeneous instance: every worker gets its own spectrum.

    A_k is drawn as Q diag(u) Q' with u uniform in ``eig_range`` and Q a random
    orthogonal matrix, so the strong convexity and smoothness constants are
    controlled exactly.
    """
    lo, hi = eig_range
    if not 0.0 < lo <= hi:
        raise ValueError(f"eigenvalue range must satisfy 0 < lo <= hi, got {eig_range}")
    rng = np.random.default_rng(seed)
    a_mats, b_mats, c_vecs, d_vecs = [], [], [], []
    for _ in range(num_workers):
        q, _ = np.linalg.qr(rng.standard_normal((dim_y, dim_y)))
        eigs = rng.uniform(lo, hi, size=dim_y)
        a_mats.append((q * eigs) @ q.T)
        b_mats.append(
            coupling_scale * rng.standard_normal((dim_y, dim_x)) / np.sqrt(max(dim_x, dim_y))
        )
        c_vecs.append(offset_scale * rng.standard_normal(dim_y))
        d_vecs.append(offset_scale * rng.standard_normal(dim_y))
    # exact symmetry is part of the contract; QR output is only symmetric up to
    # rounding, so symmetrize explicitly
    a_mats = [(m + m.T) / 2.0 for m in a_mats]
    return QuadraticBilevelProblem(
        a_mats,
        b_mats,
        c_vecs,
        d_vecs,
        rho=rho,
        noise_sigma=noise_sigma,
        n_virtual=n_virtual,
        seed=seed,
        x_ref_radius=x_ref_radius,
    )


def save_instance(problem: QuadraticBilevelProblem, path) -> None:
    """Serialize an instance to JSON with matrices as row-major lists.

    Floats are written with full precision, so load(save(p)) reproduces the
    instance bit-exactly.
    """
    payload = {
        "dim_x": problem.dim_x,
        "dim_y": problem.dim_y,
        "num_workers": problem.num_workers,
        "rho": problem.rho,
        "noise_sigma": problem.noise_sigma,
        "n_virtual": problem.n_virtual,
        "seed": problem.seed,
        "x_ref_radius": problem.x_ref_radius,
        "workers": [
            {
                "a": problem.a[k].ravel().tolist(),
                "b": problem.b[k].ravel().tolist(),
                "c": problem.c[k].tolist(),
                "d": problem.d[k].tolist(),
            }
            for k in range(problem.num_workers)
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_instance(path) -> QuadraticBilevelProblem:
    payload = json.loads(Path(path).read_text())
    dx, dy = payload["dim_x"], payload["dim_y"]
    return QuadraticBilevelProblem(
        a_mats=[np.array(w["a"]).reshape(dy, dy) for w in payload["workers"]],
        b_mats=[np.array(w["b"]).reshape(dy, dx) for w in payload["workers"]],
        c_vecs=[np.array(w["c"]) for w in payload["workers"]],
        d_vecs=[np.array(w["d"]) for w in payload["workers"]],
        rho=payload["rho"],
        noise_sigma=payload["noise_sigma"],
        n_virtual=payload["n_virtual"],
        seed=payload["seed"],
        x_ref_radius=payload["x_ref_radius"],
    )
