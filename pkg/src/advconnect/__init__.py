"""Adversarial mode connectivity along Bezier paths and a Bezier-crossover evolutionary attack."""

from .bezier import BezierPath, CurveObjective, OptimizeConfig, eval_curve, linear_path, optimize_control
from .evolution import EaConfig, FitnessScore, run_ea
from .geometry import Budget, Norm, clip_box, norm_p, project
from .ledger import QueryLedger
from .model import DefenseWrapper, Mlp, load_model, save_model
from .pgd import PgdConfig, pgd

__all__ = [
    "BezierPath",
    "Budget",
    "CurveObjective",
    "DefenseWrapper",
    "EaConfig",
    "FitnessScore",
    "Mlp",
    "Norm",
    "OptimizeConfig",
    "PgdConfig",
    "QueryLedger",
    "clip_box",
    "eval_curve",
    "linear_path",
    "load_model",
    "norm_p",
    "optimize_control",
    "pgd",
    "project",
    "run_ea",
    "save_model",
]

__version__ = "0.1.0"
