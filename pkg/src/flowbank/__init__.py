"""Training-free flow-matching forecasts from a memory bank of observed transitions."""
from .bank import (Trajectory, Transition, TransitionBank, extract_transitions, load_bank,
                   read_trajectories, read_trajectory_csv, save_bank, write_trajectory_csv)
from .errors import (ConfigError, DimensionMismatch, DivergedTrajectory, FlowbankError,
                     InsufficientScaling, IoError, NoData, NonFiniteInput, NumericalBlowup,
                     ParseError, RangeError, TimeDomainError, UnsupportedFamily)
from .metrics import correlation_dimension, crps, crps_ensemble, kl_divergence, smape, vpt
from .sampler import ForecastEnsemble, SolverConfig, ensemble, forecast_batch, one_step, rollout
from .systems import (SamplingPlan, SystemSpec, estimate_lyapunov, generate_benchmark,
                      integrate_system)
from .velocity import (GaussianBridge, RectifiedFlow, responsibilities, velocity_dense,
                       velocity_jacobian, velocity_topR)

__version__ = "0.1.0"
