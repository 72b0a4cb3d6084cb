# -*- coding: utf-8 -*-
__version__ = '0.1.0'

from .exceptions import (
    FimAlchemyError,
    ConfigError,
    DomainError,
    DegenerateRegimeError,
    CenteredNetworkError,
    PreconditionError,
    DegenerateNormalizationError,
    NumericalError,
)
from .gaussq import (
    QuadratureGrid,
    build_grid,
    expect1,
    expect2,
)
from .meanfield import (
    Activation,
    NetSpec,
    OrderParams,
    KappaPair,
    TheoryPrediction,
    BatchNormOrderParams,
    arccos_kernel,
    forward_order_params,
    backward_order_params,
    layernorm_order_params,
    order_params,
    kappas,
    kernel_matrix,
    predict_unnormalized,
    predict_bn_last_meansub,
    predict_bn_last_full,
    bn_middle_order_params,
    predict_bn_middle_lower_bound,
    predict_layernorm,
)
from .netlab import (
    Params,
    Batch,
    ForwardTrace,
    JacobianBlock,
    init_params,
    make_batch,
    forward,
    jacobian,
    loss_gradient,
    empirical_backward_order_params,
    finite_diff_check,
)
from .fimlab import (
    ReversedFIM,
    SpectrumStats,
    AlignmentReport,
    reversed_fim,
    project_mean_subtraction,
    apply_variance_projector,
    project_layernorm_mean,
    apply_layernorm_projector,
    spectrum,
    top_eigvec_alignment,
    hessian_fim_consistency,
    measure_normalization_stats,
)
from .experiments import (
    ExperimentConfig,
    EnsembleResult,
    PhaseDiagram,
    LossTrajectory,
    gd_train,
    make_teacher_labels,
    run_fig1,
    run_convrate,
    run_phase_diagram,
    predict_only,
    spectrum_once,
    write_results,
    load_results,
    verify_theory_overlays,
)
from .parsers import (
    NetSpecParser,
    ExperimentConfigParser,
    OrderParamsParser,
    KappaPairParser,
    TheoryPredictionParser,
    SpectrumStatsParser,
    AlignmentReportParser,
)
