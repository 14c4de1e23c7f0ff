"""Exact contrastive risks, OCE generalizations and Monte-Carlo studies on finite spaces."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .oce import (
    CVaR,
    Divergence,
    EntropyRisk,
    Exponential,
    Identity,
    Linear,
    MeanVariance,
    OceResult,
    SoftPlus,
    SquaredHinge,
    disutility,
    dro_dual_kl,
    dro_primal_grid,
    logsumexp_identity_check,
    oce_batch,
    oce_empirical,
    oce_weighted,
    pairwise_loss,
)
from .probspace import (
    ClassStructure,
    ContrastiveProblem,
    LabeledJoint,
    density_ratio,
    from_joint,
    from_labeled,
    from_multiclass,
    new_problem,
    random_problem,
    two_point_problem,
)
from .retrieval import (
    AucBreakdown,
    auc_optimum,
    auc_score,
    calibration_bound,
    excess_bounds_general,
    is_auc_maximizer,
    zero_shot_posterior,
)
from .risks import (
    RiskValue,
    empirical_scrl_risk,
    empirical_sscrl_risk,
    kl_excess_identity,
    optimal_risk,
    optimal_scorer,
    population_oce_risk,
    population_risk,
    risk_gradient,
    symmetric_sscrl_risk,
)
from .sampling import ScrlSample, SscrlSample, sample_scrl, sample_sscrl
from .scorers import LinearEmbedScorer, TabularScorer
from .trainer import Objective, TrainConfig, TrainTrace, finite_diff_certify, minimize_empirical, minimize_population
