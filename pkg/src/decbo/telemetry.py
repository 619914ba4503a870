"""Per-iteration measurements and CSV serialization.

One record per iteration: global upper loss and squared hypergradient norm at
the mean iterates, consensus errors (sum over workers of squared deviation
from the mean), and cumulative communication cost. The float accounting here
is analytic; the optimizer keeps its own per-message counter, and the two must
agree exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

import numpy as np

from .problems.base import BilevelOracle
from .topology import MixingMatrix

__all__ = [
    "IterationRecord",
    "account_communication",
    "record",
    "write_csv",
    "read_csv",
    "run_filename",
]

BYTES_PER_FLOAT = 8
MEGABYTE = 2**20


@dataclass(frozen=True)
class IterationRecord:
    """State summary after one iteration.

    ``test_accuracy`` is only populated for problems that carry a test set,
    and only on evaluation iterations; otherwise it is None.
    """

    t: int
    upper_loss: float
    hypergrad_sq: float
    consensus_x: float
    consensus_y: float
    consensus_z: float
    comm_floats_cum: int
    comm_mb_cum: float
    test_accuracy: float | None = None


def account_communication(mixing: MixingMatrix, dim_x: int, dim_y: int) -> int:
    """Floats transmitted per iteration.

    Each worker sends its x and x-tracker (2 dx floats), y and y-tracker, and
    z and z-tracker (4 dy floats total) to every neighbor; self-loops in the
    mixing matrix are local and free.
    """
    return int(mixing.directed_edges * (2 * dim_x + 4 * dim_y))


def _consensus(matrix: np.ndarray) -> float:
    mean = matrix.mean(axis=1, keepdims=True)
    return float(((matrix - mean) ** 2).sum())


def record(
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    oracle: BilevelOracle,
    mixing: MixingMatrix,
    t: int,
    prev_floats: int = 0,
    with_accuracy: bool = True,
) -> IterationRecord:
    """Measure the current state matrices and extend the cumulative cost.

    The hypergradient is exact when the problem has closed forms, otherwise
    the full-data estimator assembly at the mean point (x_bar, y_bar, z_bar).
    """
    x_bar = x.mean(axis=1)
    y_bar = y.mean(axis=1)
    z_bar = z.mean(axis=1)
    hyper = oracle.exact_hypergradient(x_bar)
    if hyper is None:
        hyper = oracle.hypergradient_estimate(x_bar, y_bar, z_bar)
    floats_cum = prev_floats + account_communication(mixing, oracle.dim_x, oracle.dim_y)
    accuracy = oracle.test_accuracy(y_bar) if with_accuracy else None
    return IterationRecord(
        t=t,
        upper_loss=oracle.global_upper_loss(x_bar, y_bar),
        hypergrad_sq=float(hyper @ hyper),
        consensus_x=_consensus(x),
        consensus_y=_consensus(y),
        consensus_z=_consensus(z),
        comm_floats_cum=floats_cum,
        comm_mb_cum=floats_cum * BYTES_PER_FLOAT / MEGABYTE,
        test_accuracy=accuracy,
    )


_COLUMNS = [f.name for f in fields(IterationRecord)]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_csv(trajectory: list[IterationRecord], sink) -> int:
    """Write records to a path or text file object; returns bytes written.

    Floats carry 17 significant digits so a read round-trips exactly. An empty
    trajectory still gets the header row.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(_COLUMNS)
    for rec in trajectory:
        writer.writerow([_fmt(getattr(rec, name)) for name in _COLUMNS])
    text = buffer.getvalue()
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w") as fh:
            fh.write(text)
    return len(text.encode())


def read_csv(source) -> list[IterationRecord]:
    """Inverse of :func:`write_csv`."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != _COLUMNS:
        raise ValueError(f"unexpected CSV header: {header}")
    out = []
    for row in reader:
        values = dict(zip(_COLUMNS, row))
        out.append(
            IterationRecord(
                t=int(values["t"]),
                upper_loss=float(values["upper_loss"]),
                hypergrad_sq=float(values["hypergrad_sq"]),
                consensus_x=float(values["consensus_x"]),
                consensus_y=float(values["consensus_y"]),
                consensus_z=float(values["consensus_z"]),
                comm_floats_cum=int(values["comm_floats_cum"]),
                comm_mb_cum=float(values["comm_mb_cum"]),
                test_accuracy=(
                    float(values["test_accuracy"]) if values["test_accuracy"] else None
                ),
            )
        )
    return out


def run_filename(problem: str, topology: str, mode: str, seed: int) -> str:
    return f"{problem}_{topology}_{mode}_seed{seed}.csv"
