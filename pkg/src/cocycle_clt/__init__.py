"""Markov-driven SL_d cocycles: simulation and statistical verification.

Subpackages by concern: markov_sft (the driving chain), lie_sl (matrix
geometry), cocycle_engine (stable product accumulation), kakutani
(first-return analysis), stationary (flag-fiber measures and centering),
clt_harness (the Monte Carlo CLT experiment), cli (orchestration).
"""

from .cocycle_engine import (
    KappaAccumulator,
    LyapunovEstimate,
    SigmaAccumulator,
    accumulate_kappa,
    accumulate_sigma,
    estimate_lyapunov,
    simplicity_margin,
)
from .clt_harness import (
    CltSampleSet,
    CovarianceTensor,
    covariance_estimate,
    kappa_sigma_gap,
    lindeberg_statistic,
    normality_report,
    phi_integral_estimate,
    run_clt,
)
from .kakutani import (
    InducedLaw,
    ReturnLoop,
    enumerate_first_returns,
    exponential_moment_probe,
    induced_lyapunov,
    kac_statistic,
    tail_decay_fit,
)
from .lie_sl import (
    EdgeCocycle,
    Flag,
    busemann_H,
    cartan_kappa,
    flag_distance,
    general_position_delta,
    iwasawa_step,
    opposition_iota,
    wedge_power,
)
from .markov_sft import (
    GraphSpec,
    MarkovChain,
    Trajectory,
    cylinder_probability,
    reverse_kernel,
    sample_trajectory,
    stationary_vector,
    validate_graph,
)
from .stationary import (
    CenteringData,
    FiberMeasure,
    build_centering,
    estimate_L0,
    estimate_fiber_measures,
    estimate_h0,
    martingale_residual,
    potential_decomposition,
    regularity_probe,
    stationarity_residual,
)

__version__ = "0.1.0"
