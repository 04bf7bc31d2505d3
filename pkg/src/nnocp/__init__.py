"""Optimal control of semilinear PDEs with neural-network surrogate reaction
terms, a-priori error budgets for surrogate-driven control, and qMRI
parameter mapping through a learned magnetization-response model.
"""

from .exceptions import ConfigError, DivergenceError, SolverError, TrainingError
from .grid import Grid2D, laplacian_apply, laplacian_matrix, norms, l2_norm, hminus1_norm
from .mlp import Mlp, MinMaxScaler, dof_count, forward, forward_batch, load_network, save_network
from .train import Dataset, TrainOptions, TrainReport, nguyen_widrow_init, split, train_lm_bayes
from .pde import (
    AllenCahnNonlinearity,
    AnalyticNonlinearity,
    NetworkNonlinearity,
    operator_error_sample,
    smallness_indicator,
    solve_linearized,
    solve_state,
)
from .ocp import (
    BoxConstraints,
    History,
    KktPoint,
    OcpProblem,
    SolverParams,
    kkt_residual,
    reduced_gradient,
    solve_hybrid,
    solve_qp_pdas,
    solve_sqp,
    ssn_step,
    write_history,
)
from .errbound import ErrorBudget, RateReport, estimate_budget, verify_rate, write_error_report
from .bloch import (
    Dictionary,
    ExactBlochModel,
    SequenceSpec,
    bloch_derivative,
    bloch_series,
    build_dictionary,
    dictionary_grid,
)
from .qmri import (
    Drnn,
    KSpaceData,
    QmriImage,
    QmriSqpParams,
    RegWeights,
    dictionary_match_init,
    forward_operator,
    qmri_gradient,
    qmri_objective,
    solve_qmri_sqp,
    synth_phantom,
    train_drnn,
)

__version__ = "0.1.0"
