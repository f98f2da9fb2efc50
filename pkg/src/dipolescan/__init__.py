"""Dipole scanning in weighted inner products, standardized (sLORETA-style)
reconstructions, minimum-variance beamformers, and numerical certification
of the equivalence and bias claims connecting them."""

from .beamformers import (
    BeamformerWeights,
    DerivedConstants,
    attach_beamformer_powers,
    derived_constants,
    filter_weights,
    nai_sam_transform,
    nai_tilde,
    power_nai_scalar,
    power_nai_vector,
    power_sam_scalar,
    power_sam_vector,
    power_ug,
    pseudo_z,
    theorem4_f,
    theorem4_g,
)
from .certify import (
    BalancedSpectrumError,
    BiasConstruction,
    ExpectedScanObjective,
    NecessityWitness,
    SufficiencyReport,
    Theorem4Report,
    central_difference_gradient,
    expected_data_power,
    expected_power_terms,
    expected_residual_variance,
    kernel_invariance_check,
    noise_distortion,
    noise_distortion_gradient,
    theorem2_necessity_witness,
    theorem2_sufficiency_experiment,
    theorem4_certification,
    theorem5_bias_construction,
)
from .forward import (
    Candidate,
    CandidateGrid,
    CovariancePair,
    SampleCovariance,
    SourceScenario,
    analytic_covariance,
    random_grid,
    random_leadfield,
    random_scenario,
    random_spd,
    random_unit_vector,
    recover_source_direction,
    sample_covariance,
    simulate_samples,
)
from .linalg import (
    Metric,
    MetricRangeError,
    RankOneUpdate,
    identity_metric,
    invert_spd,
    metric_inner,
    metric_norm_sq,
    psd_power,
    sherman_morrison_inverse,
)
from .matio import read_matrix, write_matrix
from .scanning import (
    DegenerateCandidateError,
    DipoleFit,
    ELoretaWeights,
    MetricRecipe,
    ScanReport,
    ScanRow,
    ZeroDataError,
    build_metric,
    centering_projection,
    gof,
    residual_variance,
    scan,
    sloreta_power,
    sloreta_reconstruction,
    solve_eloreta_weights,
    weighted_ls_fit,
)

__version__ = "0.1.0"
