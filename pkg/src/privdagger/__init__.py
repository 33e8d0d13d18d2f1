"""Desk-scale simulator for iterative imitation learning from experts with
privileged state, on exactly solvable tabular POMDPs."""

__version__ = "0.1.0"

from .analysis import (AnalysisOptions, EvalResult, MetricsReport, ReportRow,
                       check_theorem_bound, evaluate_performance, grad_check,
                       imitation_gap, measured_regret, proportion_se,
                       realizability_gap, recoverability)
from .env import (Belief, HistoryKey, PomdpSpec, PrivilegedRollout, RolloutStep,
                  belief_update, build_hidden_object_world, build_tiger,
                  enumerate_histories, history_belief, initial_belief,
                  joint_occupancy, make_fully_observed, rollout, step)
from .errors import ContractViolationError, InconsistentEvidenceError, ResourceLimitError
from .expert import (ConstrainedTeacher, CorrectionRecord, ExpertBundle,
                     ExternalTeacher, PrivilegedPolicy, PrivilegedTeacher,
                     SampledTeacher, ValueTables, constrained_expert,
                     correct_rollouts, floor_distribution, kl_divergence,
                     make_expert_bundle, make_nonprivileged_policy,
                     make_privileged_policy, records_from_jsonl, records_to_jsonl,
                     sampled_penalty_correction, solve_privileged)
from .learn import (DPO, KTO, SFT, CorrectionDataset, DemoRecord, LeapConfig,
                    SelfTeacher, collect_demonstrations, fit_dpo, fit_kto,
                    fit_privileged_student, fit_sft, fit_sft_gd, leap_run,
                    select_best, validation_success)
from .policy import PolicySnapshot, TabularHistoryPolicy
from .rng import substream
