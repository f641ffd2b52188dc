"""Control-augmented spectral submanifold models for soft robots."""

__version__ = "0.1.0"

from .baselines import OSSM, Koopman, KoopmanModel, OSSMModel, load_model, save_model
from .control import (FeedbackDesign, MpcConfig, MpcController, closed_loop_run, design_feedback,
                      solve_box_qp)
from .exceptions import (ActuatorBandwidthError, CalibrationError, ConfigurationError,
                         DivergenceError, IntegrationError, NumericalError, RankError)
from .features import PolynomialFeatureMap, RandomFourierFeatures
from .manifold import (CaSSM, ManifoldModel, identify_lambda, invariance_residual,
                       spectral_diagnostic)
from .pipeline import DecayProtocol, Trajectory, collect_decays, simulate
from .plant import PlantConfig

__all__ = [
    "CaSSM", "ManifoldModel", "OSSM", "OSSMModel", "Koopman", "KoopmanModel",
    "PolynomialFeatureMap", "RandomFourierFeatures", "PlantConfig", "Trajectory",
    "DecayProtocol", "collect_decays", "simulate", "identify_lambda", "invariance_residual",
    "spectral_diagnostic", "MpcConfig", "MpcController", "closed_loop_run", "FeedbackDesign",
    "design_feedback", "solve_box_qp", "load_model", "save_model", "ConfigurationError",
    "IntegrationError", "DivergenceError", "RankError", "CalibrationError",
    "ActuatorBandwidthError", "NumericalError",
]
