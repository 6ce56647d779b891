"""Alternating least squares matrix factorization with tiled Hermitian
kernels, grid partitioning and topology-aware parallel reduction."""

from .errors import (
    AlsError,
    CapacityError,
    ConfigError,
    InputError,
    IntegrityError,
    NumericalError,
    ParseError,
)
from .kernels import BACKEND
from .parallel import (
    PartitionPlan,
    ReduceSchedule,
    ScaleUpUpdater,
    Topology,
    build_reduce_schedule,
    local_hermitian,
    parallel_reduce,
    plan_partition,
    su_als_update_x,
)
from .solver import (
    HermitianBatch,
    SolverConfig,
    als_train,
    batch_solve,
    get_hermitian_base,
    get_hermitian_mo,
    loss,
    rmse,
    update_theta,
    update_x,
)
from .sparse import (
    CscMatrix,
    CsrMatrix,
    GridPartition,
    Triplets,
    csc_to_csr,
    csr_from_arrays,
    csr_from_triplets,
    csr_to_csc,
    grid_partition,
)

__version__ = "0.1.0"
