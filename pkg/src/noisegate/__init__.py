"""Deterministic simulator for DP federated learning with statistical upload filtering."""

from .aggregation import (FilterResult, FirstAggVerdict, ServerState, apply_update,
                          coordinate_median, filter_gradient, first_agg,
                          first_agg_verdict, krum, rfa_geometric_median, score_round,
                          selection_size, trimmed_mean)
from .attacks import (AttackInfeasibleError, AttackSpec, adaptive_wrap, gaussian_attack,
                      label_flip_attack, optimized_attack)
from .data import (Dataset, IdxCountMismatchError, IdxError, IdxMagicError,
                   IdxTruncatedError, PartitionPlan, get_non_iid, load_idx,
                   partition_iid, sample_auxiliary, synthetic_classes)
from .dp_engine import (ConvergenceParams, InfeasiblePrivacyError, WorkerState,
                        accountant_epsilon, honest_upload, plan_learning_rate,
                        rdp_sgm, solve_sigma, theoretical_eta)
from .harness import (ConfigError, ExperimentConfig, ExperimentResult, RoundTrace,
                      emit_metrics, load_config, round_budget, run_experiment)
from .model import MlpModel
from .numerics import gaussian_vector, inner, l2_norm, stream
from .stats import (KsVerdict, NormTestBounds, ResilienceInterval, kolmogorov_pvalue,
                    ks_statistic, ks_verdict, norm_test_bounds, normal_cdf,
                    resilience_interval)

__version__ = "0.1.0"
