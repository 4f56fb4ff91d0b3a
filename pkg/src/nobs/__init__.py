"""Backstepping PDE observers and Fourier-neural-operator surrogates."""

from .errors import NobsError
from .pde import (
    ArzParams,
    Grid,
    MeasurementKind,
    MeasurementSeries,
    ReactionDiffusionParams,
    Scheme,
    Trajectory,
    extract_measurements,
    lambda_profile,
    simulate_arz,
    simulate_reaction_diffusion,
)
from .observers import (
    ExponentialGain,
    PrescribedTimeGain,
    TrafficObserverGains,
    gain_exponential,
    gain_prescribed_time,
    run_observer_arz,
    run_observer_prescribed_time,
    run_observer_reaction_diffusion,
)

__version__ = "0.1.0"
