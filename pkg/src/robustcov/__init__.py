"""Robust, affine-equivariant estimation of multivariate location and scatter.

Estimator families: S (bisquare and "optimal" rho), Rocke (biflat band
weight), MM, tau, and Stahel-Donoho; starting estimators: subsampled MVE
and the kurtosis-plus-specific-directions (KSD) procedure. A Monte Carlo
harness evaluates estimators by mean Kullback-Leibler divergence under
shift contamination, and a CLI exposes estimation, QQ export, simulation,
weight-function sampling and tuning calibration.
"""

from .errors import (
    DataError,
    DegenerateScaleError,
    DegenerateScatterError,
    EstimationError,
    RobustcovError,
    ScaleConvergenceError,
    SingularScatterError,
    StartFailureError,
    TunabilityError,
)
from .estimators import (
    EstimatorConfig,
    Family,
    FitResult,
    classical_estimate,
    fit,
    mm_estimate,
    reweighted_step,
    rocke_estimate,
    s_estimate,
    size_correct,
    stahel_donoho,
    tau_estimate,
)
from .linalg import (
    LocationScatter,
    chi2_median,
    chi2_quantile,
    mahalanobis,
    normalize_shape,
    rng_stream,
    validate_data,
)
from .rho import (
    RhoFamily,
    RhoSpec,
    bisquare,
    optimal,
    rho,
    rho_prime,
    rocke_biflat,
    rocke_gamma,
    scaled,
    weight,
)
from .scales import MScaleParams, breakdown_delta, median_scale, mscale, tau_scale
from .simulate import (
    DivergenceReport,
    Scenario,
    contaminate,
    kl_location,
    kl_scatter,
    run_scenario,
)
from .starts import (
    DirectionSet,
    StartConfig,
    kurtosis_directions,
    ksd_start,
    mve_start,
    outlyingness,
    subsampling_directions,
)
from .tuning import CalibrationResult, approx_constant, calibrate_efficiency

__version__ = "0.1.0"
