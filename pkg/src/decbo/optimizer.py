"""Single-loop decentralized bilevel optimizer with variance reduction.

Simulates K workers that each maintain three variables: the upper-level
decision x, the lower-level solution estimate y, and the auxiliary vector z
approximating the Hessian-inverse-vector product that appears in the
hypergradient. Per iteration each worker

  1. refreshes a recursive variance-reduced estimator for each of the three
     gradients, re-evaluating the current minibatch at both the current and
     the previous point,
  2. folds the estimator into a gradient tracker that gossips with neighbors
     so its worker-mean always equals the mean local estimator, and
  3. takes a mixed gossip/descent step, with z projected onto a norm ball.

Two update orders are supported. The simultaneous order evaluates all three
estimators at the iteration-start point. The alternating order updates y
first, evaluates the z estimator at the fresh y, updates z, and evaluates the
x estimator at the fresh (y, z); its "previous point" bookkeeping therefore
stores the post-update y and z, not the iteration-start ones.

Everything is deterministic in the seeds: worker minibatch streams are
independent, so results do not depend on the degree of worker parallelism.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .problems.base import BilevelOracle, sample_batch
from .telemetry import IterationRecord, record
from .topology import MixingMatrix

__all__ = [
    "RunConfig",
    "WorkerState",
    "DivergenceError",
    "storm_update",
    "tracking_step",
    "project_columns",
    "variable_step",
    "Runner",
    "run",
]

MODES = ("simultaneous", "alternating")


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, worker: int, variable: str):
        self.iteration = iteration
        self.worker = worker
        self.variable = variable
        super().__init__(
            f"non-finite value in {variable} at iteration {iteration}, worker {worker}"
        )


@dataclass(frozen=True)
class RunConfig:
    """All scalars of one run.

    ``alpha_i * eta**2`` is the forgetting factor of the i-th variance-reduced
    estimator; at exactly 1 the estimator degenerates to the plain stochastic
    gradient (the sgd-baseline mode). ``beta1`` may be zero to freeze x, which
    turns the run into a pure inner solver for (y, z).
    """

    mode: str = "simultaneous"
    eta: float = 0.1
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    t_iterations: int = 2000
    batch_b0: int = 100
    batch_b: int = 100
    radius: float | None = None
    seed: int = 0
    eval_every: int = 10
    parallel_workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        for name in ("alpha1", "alpha2", "alpha3"):
            a = getattr(self, name)
            if a <= 0.0:
                raise ValueError(f"{name} must be positive, got {a}")
            if a * self.eta**2 > 1.0 + 1e-12:
                raise ValueError(f"{name} * eta^2 must not exceed 1, got {a * self.eta ** 2}")
        if self.beta1 < 0.0:
            raise ValueError(f"beta1 must be nonnegative, got {self.beta1}")
        if self.beta2 <= 0.0 or self.beta3 <= 0.0:
            raise ValueError("beta2 and beta3 must be positive")
        if self.t_iterations < 0:
            raise ValueError("iteration count must be nonnegative")
        if not self.batch_b0 >= self.batch_b >= 1:
            raise ValueError(
                f"need batch_b0 >= batch_b >= 1, got {self.batch_b0}, {self.batch_b}"
            )
        if self.radius is not None and self.radius <= 0.0:
            raise ValueError(f"projection radius must be positive, got {self.radius}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.parallel_workers < 1:
            raise ValueError("parallel_workers must be at least 1")

    @classmethod
    def corollary_defaults(
        cls, num_workers: int, lambda2: float, epsilon: float, **overrides
    ) -> "RunConfig":
        """Theory-guided defaults with unit constants.

        alpha_i = 1/K, beta_1 = beta_3 = (1-lambda)^4, beta_2 = (1-lambda)^2,
        eta = K sqrt(eps) capped at 1, first batch ceil(1/sqrt(eps)), then
        batch size 1. Any field can be overridden.
        """
        gap = 1.0 - lambda2
        b0 = max(1, math.ceil(1.0 / math.sqrt(epsilon)))
        base = dict(
            alpha1=1.0 / num_workers,
            alpha2=1.0 / num_workers,
            alpha3=1.0 / num_workers,
            beta1=gap**4,
            beta2=gap**2,
            beta3=gap**4,
            eta=min(1.0, num_workers * math.sqrt(epsilon)),
            batch_b0=b0,
            batch_b=1,
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class WorkerState:
    """Read-only snapshot of one worker's column of the shared state."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    grad_upper: np.ndarray
    grad_lower: np.ndarray
    grad_aux: np.ndarray
    track_upper: np.ndarray
    track_lower: np.ndarray
    track_aux: np.ndarray


def storm_update(prev_estimate, grad_new, grad_old, a: float) -> np.ndarray:
    """Recursive variance-reduced estimate: (1-a)(prev - old) + new.

    ``a`` is the forgetting factor in [0, 1]; a=1 returns the raw new gradient
    and a=0 gives the pure difference recursion. Callers bypass this at t=0
    and seed the estimate with the first (large-batch) gradient directly.
    """
    if not 0.0 <= a <= 1.0 + 1e-12:
        raise ValueError(f"forgetting factor must lie in [0, 1], got {a}")
    prev_estimate, grad_new, grad_old = (
        np.asarray(prev_estimate), np.asarray(grad_new), np.asarray(grad_old)
    )
    if not prev_estimate.shape == grad_new.shape == grad_old.shape:
        raise ValueError("estimator operands must share a shape")
    return (1.0 - a) * (prev_estimate - grad_old) + grad_new


def tracking_step(tracker_prev, weights, est_new, est_old) -> np.ndarray:
    """Gossip the tracker and fold in the estimator increment.

    Column k of the result mixes the neighbors' previous tracker columns by
    the k-th column of the mixing matrix, then adds est_new - est_old. With
    zero initialization this keeps mean_k(tracker) == mean_k(estimator)
    identically.
    """
    tracker_prev, est_new, est_old = map(np.asarray, (tracker_prev, est_new, est_old))
    if not tracker_prev.shape == est_new.shape == est_old.shape:
        raise ValueError("tracker and estimator matrices must share a shape")
    return tracker_prev @ weights + est_new - est_old


def project_columns(matrix: np.ndarray, radius: float | None) -> tuple[np.ndarray, int]:
    """Project each column onto the origin-centered ball; report clip count."""
    if radius is None or math.isinf(radius):
        return matrix, 0
    norms = np.linalg.norm(matrix, axis=0)
    over = norms > radius
    if not over.any():
        return matrix, 0
    scale = np.where(over, radius / np.where(over, norms, 1.0), 1.0)
    return matrix * scale, int(over.sum())


def variable_step(
    vars_all, weights, tracker_all, beta: float, eta: float, radius: float | None = None
) -> np.ndarray:
    """One mixed gossip/descent move: vars + eta * (half_step - vars).

    The half step is vars @ E - beta * tracker, optionally projected onto the
    ball of the given radius. Because the final point is a convex combination,
    it stays inside the ball whenever vars started inside.
    """
    vars_all, tracker_all = np.asarray(vars_all), np.asarray(tracker_all)
    if vars_all.shape != tracker_all.shape:
        raise ValueError("variables and tracker must share a shape")
    half = vars_all @ weights - beta * tracker_all
    half, _ = project_columns(half, radius)
    return vars_all + eta * (half - vars_all)


class Runner:
    """Mutable optimization state over K workers, advanced one step at a time.

    State matrices have one column per worker. ``comm_floats`` counts every
    float sent over a directed edge by the six gossip multiplications of each
    iteration; it is an accounting path independent of the analytic formula in
    :mod:`decbo.telemetry`. ``projection_events`` counts columns clipped by
    the z projection.
    """

    def __init__(
        self,
        config: RunConfig,
        oracle: BilevelOracle,
        mixing: MixingMatrix,
        init_x=None,
        init_y=None,
        init_z=None,
    ):
        if mixing.size != oracle.num_workers:
            raise ValueError(
                f"topology has {mixing.size} nodes but oracle has {oracle.num_workers} workers"
            )
        self.config = config
        self.oracle = oracle
        self.mixing = mixing
        self.k = mixing.size
        self.radius = config.radius if config.radius is not None else oracle.radius

        dx, dy = oracle.dim_x, oracle.dim_y
        self.x = self._tile(init_x, dx)
        self.y = self._tile(init_y, dy)
        self.z, clipped = project_columns(self._tile(init_z, dy), self.radius)
        self.projection_events = int(clipped)

        self.grad_upper = np.zeros((dx, self.k))
        self.grad_lower = np.zeros((dy, self.k))
        self.grad_aux = np.zeros((dy, self.k))
        self.track_upper = np.zeros((dx, self.k))
        self.track_lower = np.zeros((dy, self.k))
        self.track_aux = np.zeros((dy, self.k))
        # points at which each estimator last saw its "new" evaluation
        self.point_lower: tuple[np.ndarray, ...] | None = None
        self.point_aux: tuple[np.ndarray, ...] | None = None
        self.point_upper: tuple[np.ndarray, ...] | None = None

        self.t = 0
        self.comm_floats = 0
        self._rngs = [
            np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(k,)))
            for k in range(self.k)
        ]
        self._pool = (
            ThreadPoolExecutor(max_workers=config.parallel_workers)
            if config.parallel_workers > 1
            else None
        )

    def _tile(self, init, dim) -> np.ndarray:
        if init is None:
            return np.zeros((dim, self.k))
        init = np.asarray(init, dtype=float)
        if init.shape == (dim,):
            return np.tile(init[:, None], (1, self.k))
        if init.shape == (dim, self.k):
            return init.copy()
        raise ValueError(f"initial point must have shape ({dim},) or ({dim},{self.k})")

    def worker_state(self, k: int) -> WorkerState:
        return WorkerState(
            x=self.x[:, k].copy(),
            y=self.y[:, k].copy(),
            z=self.z[:, k].copy(),
            grad_upper=self.grad_upper[:, k].copy(),
            grad_lower=self.grad_lower[:, k].copy(),
            grad_aux=self.grad_aux[:, k].copy(),
            track_upper=self.track_upper[:, k].copy(),
            track_lower=self.track_lower[:, k].copy(),
            track_aux=self.track_aux[:, k].copy(),
        )

    # --- per-worker evaluation fan-out ------------------------------------------

    def _map_workers(self, fn) -> None:
        if self._pool is None:
            for k in range(self.k):
                fn(k)
        else:
            list(self._pool.map(fn, range(self.k)))

    def _eval_lower(self, x, y, zeta) -> np.ndarray:
        out = np.empty((self.oracle.dim_y, self.k))

        def one(k):
            out[:, k] = self.oracle.lower_grad_y(x[:, k], y[:, k], zeta[k])

        self._map_workers(one)
        return out

    def _eval_aux(self, x, y, z, zeta, xi) -> np.ndarray:
        out = np.empty((self.oracle.dim_y, self.k))

        def one(k):
            out[:, k] = self.oracle.hessian_vec(
                x[:, k], y[:, k], z[:, k], zeta[k]
            ) - self.oracle.upper_grad_y(x[:, k], y[:, k], xi[k])

        self._map_workers(one)
        return out

    def _eval_upper(self, x, y, z, zeta, xi) -> np.ndarray:
        out = np.empty((self.oracle.dim_x, self.k))

        def one(k):
            out[:, k] = self.oracle.upper_grad_x(
                x[:, k], y[:, k], xi[k]
            ) - self.oracle.jacobian_vec(x[:, k], y[:, k], z[:, k], zeta[k])

        self._map_workers(one)
        return out

    # --- the iteration -------------------------------------------------------------

    def step(self) -> None:
        cfg = self.config
        t = self.t
        size = cfg.batch_b0 if t == 0 else cfg.batch_b
        zeta, xi = [], []
        for k in range(self.k):
            zeta.append(sample_batch(self._rngs[k], k, self.oracle.lower_size(k), size))
            xi.append(sample_batch(self._rngs[k], k, self.oracle.upper_size(k), size))

        if cfg.mode == "simultaneous":
            self._step_simultaneous(t, zeta, xi)
        else:
            self._step_alternating(t, zeta, xi)

        if self.oracle.x_min_bound is not None:
            np.maximum(self.x, self.oracle.x_min_bound, out=self.x)
        self.t = t + 1
        self._check_finite(t)

    def _estimate(self, t, prev_est, new_grad, eval_old, a) -> np.ndarray:
        if t == 0:
            return new_grad
        return storm_update(prev_est, new_grad, eval_old(), a * self.config.eta**2)

    def _step_simultaneous(self, t, zeta, xi) -> None:
        cfg, E = self.config, self.mixing.weights
        x, y, z = self.x, self.y, self.z

        v = self._estimate(
            t, self.grad_lower,
            self._eval_lower(x, y, zeta),
            lambda: self._eval_lower(*self.point_lower, zeta),
            cfg.alpha2,
        )
        w = self._estimate(
            t, self.grad_aux,
            self._eval_aux(x, y, z, zeta, xi),
            lambda: self._eval_aux(*self.point_aux, zeta, xi),
            cfg.alpha3,
        )
        u = self._estimate(
            t, self.grad_upper,
            self._eval_upper(x, y, z, zeta, xi),
            lambda: self._eval_upper(*self.point_upper, zeta, xi),
            cfg.alpha1,
        )
        self.point_lower = (x.copy(), y.copy())
        self.point_aux = (x.copy(), y.copy(), z.copy())
        self.point_upper = (x.copy(), y.copy(), z.copy())

        self._move_lower(v, E)
        self._move_aux(w, E)
        self._move_upper(u, E)

    def _step_alternating(self, t, zeta, xi) -> None:
        cfg, E = self.config, self.mixing.weights

        v = self._estimate(
            t, self.grad_lower,
            self._eval_lower(self.x, self.y, zeta),
            lambda: self._eval_lower(*self.point_lower, zeta),
            cfg.alpha2,
        )
        self.point_lower = (self.x.copy(), self.y.copy())
        self._move_lower(v, E)

        # z estimator sees the freshly updated y; its "previous point" for the
        # next iteration is therefore this post-update y, not the start-of-
        # iteration one
        w = self._estimate(
            t, self.grad_aux,
            self._eval_aux(self.x, self.y, self.z, zeta, xi),
            lambda: self._eval_aux(*self.point_aux, zeta, xi),
            cfg.alpha3,
        )
        self.point_aux = (self.x.copy(), self.y.copy(), self.z.copy())
        self._move_aux(w, E)

        u = self._estimate(
            t, self.grad_upper,
            self._eval_upper(self.x, self.y, self.z, zeta, xi),
            lambda: self._eval_upper(*self.point_upper, zeta, xi),
            cfg.alpha1,
        )
        self.point_upper = (self.x.copy(), self.y.copy(), self.z.copy())
        self._move_upper(u, E)

    # --- tracking + variable moves ---------------------------------------------------

    def _move_lower(self, v, E) -> None:
        dy = self.oracle.dim_y
        self.track_lower = tracking_step(self.track_lower, E, v, self.grad_lower)
        self.grad_lower = v
        self.y = variable_step(self.y, E, self.track_lower, self.config.beta2, self.config.eta)
        self.comm_floats += 2 * self.mixing.directed_edges * dy

    def _move_aux(self, w, E) -> None:
        dy = self.oracle.dim_y
        self.track_aux = tracking_step(self.track_aux, E, w, self.grad_aux)
        self.grad_aux = w
        half = self.z @ E - self.config.beta3 * self.track_aux
        half, clipped = project_columns(half, self.radius)
        self.projection_events += clipped
        self.z = self.z + self.config.eta * (half - self.z)
        self.comm_floats += 2 * self.mixing.directed_edges * dy

    def _move_upper(self, u, E) -> None:
        dx = self.oracle.dim_x
        self.track_upper = tracking_step(self.track_upper, E, u, self.grad_upper)
        self.grad_upper = u
        self.x = variable_step(self.x, E, self.track_upper, self.config.beta1, self.config.eta)
        self.comm_floats += 2 * self.mixing.directed_edges * dx

    def _check_finite(self, t: int) -> None:
        for name, mat in (
            ("x", self.x), ("y", self.y), ("z", self.z),
            ("grad_upper", self.grad_upper), ("grad_lower", self.grad_lower),
            ("grad_aux", self.grad_aux),
        ):
            finite = np.isfinite(mat).all(axis=0)
            if not finite.all():
                raise DivergenceError(t, int(np.argmin(finite)), name)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()


def run(
    config: RunConfig,
    oracle: BilevelOracle,
    mixing: MixingMatrix,
    init_x=None,
    init_y=None,
    init_z=None,
    on_iteration=None,
) -> list[IterationRecord]:
    """Execute all configured iterations and collect one telemetry row each.

    Rows describe the state after the corresponding iteration. The trajectory
    is a pure function of the seeds in the config, the oracle, and the
    topology; in particular it does not depend on ``parallel_workers``.
    """
    runner = Runner(config, oracle, mixing, init_x=init_x, init_y=init_y, init_z=init_z)
    records: list[IterationRecord] = []
    try:
        for t in range(config.t_iterations):
            runner.step()
            rec = record(
                runner.x, runner.y, runner.z, oracle, mixing, t,
                prev_floats=records[-1].comm_floats_cum if records else 0,
                with_accuracy=(t % config.eval_every == 0),
            )
            records.append(rec)
            if on_iteration is not None:
                on_iteration(t, runner, rec)
    finally:
        runner.close()
    return records
