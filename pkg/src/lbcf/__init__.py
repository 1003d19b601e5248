"""Budget-constrained multi-treatment allocation with a unified causal forest.

Pipeline: :class:`UnifiedCausalForest` estimates a length-K uplift vector
per user from RCT data, :func:`allocate_dgb` picks at most one treatment
per user under a global budget via Lagrangian dual bisection, and
:func:`evaluate_pmg` scores the resulting policy offline.
"""

__version__ = "0.1.0"

from .dataset import (
    ColumnSchema,
    GroundTruth,
    ParseError,
    RCTDataset,
    SchemaError,
    ValidationError,
    load_rct_csv,
    load_truth_csv,
    split_train_test,
)
from .dgb import (
    AllocationProblem,
    Assignment,
    DGBResult,
    allocate_dgb,
    brute_force_mckp,
    dual_derivative,
    dual_value,
    max_uplift_greedy,
    roi_greedy,
    select_treatments,
    solve_dgb,
)
from .evaluation import (
    PolicyEvaluation,
    UndefinedMetricError,
    UnevaluablePolicyError,
    budget_sweep,
    evaluate_ite,
    evaluate_pmg,
)
from .pipeline import LBCF
from .synthgen import SynthConfig, generate_synthetic, redraw_treatment
from .udcf import (
    DegenerateNodeError,
    MultipleBinaryCausalForest,
    TrainParams,
    UDCFModel,
    UnifiedCausalForest,
    compute_node_stats,
    predict_cate,
    train_forest,
)

__all__ = [name for name in dir() if not name.startswith("_")]
