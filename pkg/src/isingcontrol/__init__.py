"""Traffic signal control by model-predictive Ising optimization.

The controller predicts each intersection's vehicle bias with a linear
model, compiles the receding-horizon objective into an Ising problem, and
minimizes it with an exact, greedy or annealing solver.  A link-queue
simulator, flow estimators, baselines and an experiment harness are included.
"""

from .control import CONTROLLER_KINDS, Controller, ControllerConfig, SignalPlan
from .flowstats import FlowStats, compute_inflow, compute_turning_probs, init_stats, update_outflow
from .ising import (InternalModel, IsingInstance, build_internal_model, compile_ising,
                    compute_bias_vector, horizon_objective, predict_bias, read_instance,
                    write_instance)
from .mesosim import SimConfig, Simulator, StepMetrics, TrafficSnapshot
from .network import (Intersection, InvalidGeometryError, NetworkFormatError, Road, RoadNetwork,
                      generate_lattice, load_network, save_network)
from .solvers import SolveResult, SolverConfig, SolverSizeError, solve

__version__ = "0.1.0"

__all__ = [
    "CONTROLLER_KINDS", "Controller", "ControllerConfig", "SignalPlan",
    "FlowStats", "compute_inflow", "compute_turning_probs", "init_stats", "update_outflow",
    "InternalModel", "IsingInstance", "build_internal_model", "compile_ising",
    "compute_bias_vector", "horizon_objective", "predict_bias", "read_instance", "write_instance",
    "SimConfig", "Simulator", "StepMetrics", "TrafficSnapshot",
    "Intersection", "InvalidGeometryError", "NetworkFormatError", "Road", "RoadNetwork",
    "generate_lattice", "load_network", "save_network",
    "SolveResult", "SolverConfig", "SolverSizeError", "solve",
]
