from .base import BilevelOracle, SampleBatch, sample_batch
from .data import (
    Dataset,
    LibsvmParseError,
    PartitionError,
    PartitionPlan,
    parse_libsvm,
    partition_even,
    partition_heterogeneous,
    split_dataset,
    write_libsvm,
)
from .logistic import LogisticHyperoptProblem
from .quadratic import (
    ExactSolution,
    QuadraticBilevelProblem,
    generate_instance,
    load_instance,
    save_instance,
)

__all__ = [
    "BilevelOracle",
    "SampleBatch",
    "sample_batch",
    "Dataset",
    "LibsvmParseError",
    "PartitionError",
    "PartitionPlan",
    "parse_libsvm",
    "partition_even",
    "partition_heterogeneous",
    "split_dataset",
    "write_libsvm",
    "LogisticHyperoptProblem",
    "ExactSolution",
    "QuadraticBilevelProblem",
    "generate_instance",
    "load_instance",
    "save_instance",
]
