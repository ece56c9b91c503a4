"""Mixed-effects logistic regression with a grouped Wald goodness-of-fit test.

Modules
-------
data
    Datasets, model specifications and design matrices.
estimator
    Adaptive Gauss-Hermite maximum likelihood, EB modes, predictions.
gof
    Group selection, within-cluster grouping and the Wald test.
simlab
    Simulation designs, data generation and Monte Carlo summaries.
cli
    The ``mlmgof`` command.
"""
from .data import (ClusteredDataset, DesignMatrices, LevelEffects, ModelSpec,
                   RandomEffectsSpec, build_design, cluster_sizes, from_arrays,
                   read_csv, validate_dataset, write_csv)
from .errors import MlmGofError
from .estimator import (FitOptions, FittedModel, eb_modes, fit, marginal_loglik,
                        predict_conditional)
from .gof import (GofResult, GroupAssignment, assign_groups, build_indicators,
                  chi2_survival, run_test, select_group_count, wald_statistic)
from .quadrature import QuadratureRule, gh_rule
from .simlab import (Scenario, ScenarioSummary, generate_dataset, icc_to_variance,
                     monte_carlo_bounds, run_scenario, scenario_catalog)

__version__ = "0.1.0"
