"""Tucker-2 compression of convolutional networks with adversarially trained low-rank regularization."""

__version__ = "0.1.0"

from .attack import AdvConfig, pgd
from .cstar_train import CstarConfig, DualState, TrainReport, evaluate, regularize_epoch, run_cstar
from .errors import BudgetError, ConfigError, CstarError, FormatError, NumericError, ShapeError
from .nn import Architecture, Model, mini_conv_net
from .rank_select import RankPlan, select
from .tucker import Tucker2Factors, decompose, project, recover

__all__ = [
    "AdvConfig", "Architecture", "BudgetError", "ConfigError", "CstarConfig", "CstarError",
    "DualState", "FormatError", "Model", "NumericError", "RankPlan", "ShapeError",
    "TrainReport", "Tucker2Factors", "decompose", "evaluate", "mini_conv_net", "pgd",
    "project", "recover", "regularize_epoch", "run_cstar", "select",
]
