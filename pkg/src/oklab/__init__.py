"""Desk-scale lab for the O(k) sparse allreduce, Ok-Topk SGD and baseline allreduces."""

from .collectives import (
    AlgoResult,
    dense_allreduce,
    gaussiank_allreduce,
    gtopk_allreduce,
    topka_allreduce,
    topkdsa_allreduce,
)
from .cost import ALGORITHMS, CostModelParams, cost_predict
from .harness import ExperimentConfig, emit_metrics, run_experiment
from .kernels import BACKEND
from .oktopk import (
    OkState,
    ThresholdState,
    balance_and_allgatherv,
    ok_sparse_allreduce,
    space_repartition,
    split_and_reduce,
    th_re_evaluate,
)
from .sparse import (
    SparseGrad,
    gaussian_threshold,
    select_by_threshold,
    sparse_sum,
    topk_exact,
    wire_decode,
    wire_encode,
)
from .trainer import (
    DriftingProcess,
    ModelState,
    Residual,
    dense_sgd_step,
    drifting_gradient_process,
    measure_xi,
    oktopk_sgd_step,
)
from .transport import InProcTransport, TrafficLedger, WorkerCtx, run_workers, small_allreduce_avg

__version__ = "0.1.0"
