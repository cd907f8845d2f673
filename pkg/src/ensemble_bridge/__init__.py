"""Stochastic bridges for ensembles of parameter-perturbed linear systems."""

from .bridge import (
    BridgeProblem,
    ControllerGains,
    MarkovBridge,
    ZeroControl,
    continuous_feedforward,
    continuous_gains,
    markov_bridge_control,
    synthesize_discrete,
)
from .ensemble import (
    EnsembleSpec,
    MatrixFamilySample,
    averaged_flow,
    build_uniform_ensemble,
    ensemble_from_dict,
    is_brownian,
    load_ensemble,
    make_family,
    mat_exp,
    phi,
    phi_lags,
)
from .errors import ControllabilityError, DivergenceError, InvalidInputError
from .gramian import (
    ControllabilityReport,
    DeterministicSteer,
    GramianTable,
    check_avg_controllability,
    density_brownian,
    density_gramian,
    deterministic_steer,
    gramian,
    gramian_table,
    transport_cost,
)
from .sim import (
    ConvergenceReport,
    EndpointStats,
    NoisePath,
    SimulationRecord,
    convergence_study,
    evaluate_cost,
    make_noise,
    noise_batch,
    simulate_average,
    simulate_ensemble,
    verify_endpoint,
)

__version__ = "0.1.0"
