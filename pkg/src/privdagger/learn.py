"""Dataset aggregation, the SFT / DPO / KTO update rules, and the iterative
privileged-teacher training loop.

SFT on the aggregated dataset is the follow-the-regularized-leader update
(for the tabular class the exact minimizer has a closed form); DPO and KTO
regularize to the previous iterate and are mirror-descent style updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import analysis
from .env import HistoryKey, PomdpSpec, rollout
from .expert import (ConstrainedTeacher, CorrectionRecord, ExpertBundle,
                     ExternalTeacher, PrivilegedPolicy, PrivilegedTeacher,
                     SampledTeacher, correct_rollouts, make_expert_bundle)
from .policy import PolicySnapshot, TabularHistoryPolicy, log_softmax, softmax
from .rng import substream

LOGIT_FLOOR = 1e-15  # keeps closed-form SFT logits (and later log-ratios) finite


@dataclass(frozen=True)
class DemoRecord:
    """One demonstrated timestep (state recorded for self-teaching)."""

    history: HistoryKey
    state: int
    action: int


@dataclass
class CorrectionDataset:
    """Aggregated demonstrations plus per-iteration correction batches."""

    records: list = field(default_factory=list)
    demo_records: list = field(default_factory=list)
    partitions: list = field(default_factory=list)  # (start, end) per iteration

    def add_iteration(self, iteration: int, records: Sequence[CorrectionRecord]) -> None:
        if iteration != len(self.partitions) + 1:
            raise ValueError(f"expected iteration {len(self.partitions) + 1}, got {iteration}")
        for r in records:
            if r.iteration != iteration:
                raise ValueError("record iteration does not match the batch")
        start = len(self.records)
        self.records.extend(records)
        self.partitions.append((start, len(self.records)))

    @property
    def num_iterations(self) -> int:
        return len(self.partitions)

    def iteration_records(self, iteration: int) -> list:
        start, end = self.partitions[iteration - 1]
        return self.records[start:end]

    def supervised_pairs(self, window: int) -> list:
        """(truncated key, action) labels: demos first, then all corrections."""
        pairs = [(d.history.truncate(window), d.action) for d in self.demo_records]
        pairs.extend((r.history.truncate(window), r.corrected_action) for r in self.records)
        return pairs

    def copy(self) -> "CorrectionDataset":
        return CorrectionDataset(list(self.records), list(self.demo_records),
                                 list(self.partitions))


# Update rules.

@dataclass(frozen=True)
class SFT:
    pass


@dataclass(frozen=True)
class DPO:
    beta: float


@dataclass(frozen=True)
class KTO:
    beta: float
    lambda_desirable: float = 1.0
    lambda_undesirable: float = 0.0


@dataclass(frozen=True)
class SelfTeacher:
    """Resolve each iteration to an external teacher fit from the learner's
    own aggregated data (privileged self-distillation)."""


@dataclass(frozen=True)
class LeapConfig:
    num_iterations: int
    rollouts_per_iteration: int
    update_rule: object = SFT()
    expert_kind: object = PrivilegedTeacher()
    mode: str = "failed_only"
    learning_rate: float = 0.5
    optimization_steps: int = 500
    truncation_window: int = 10 ** 9  # effectively full history
    root_seed: int = 0
    validation_seeds: tuple = ()

    def __post_init__(self):
        if self.num_iterations < 1:
            raise ValueError("num_iterations must be >= 1")
        if self.rollouts_per_iteration < 1:
            raise ValueError("rollouts_per_iteration must be >= 1")
        if self.truncation_window < 1:
            raise ValueError("truncation_window must be >= 1")
        if isinstance(self.update_rule, (DPO, KTO)) and self.update_rule.beta <= 0:
            raise ValueError("preference rules need beta > 0")
        if self.mode not in ("failed_only", "all_steps"):
            raise ValueError(f"unknown correction mode {self.mode!r}")
        object.__setattr__(self, "validation_seeds", tuple(self.validation_seeds))


def _count_table(pairs: Sequence, num_actions: int) -> dict:
    counts: dict = {}
    for key, action in pairs:
        row = counts.get(key)
        if row is None:
            row = np.zeros(num_actions)
            counts[key] = row
        row[action] += 1.0
    return counts


def _infer_num_actions(dataset: CorrectionDataset) -> int:
    for r in dataset.records:
        return len(r.corrected_distribution)
    raise ValueError("cannot infer the action count from an empty dataset")


def fit_sft(dataset: CorrectionDataset, truncation_window: int,
            num_actions: int | None = None) -> TabularHistoryPolicy:
    """Exact cross-entropy minimizer: per-key empirical action frequencies.

    Logits are log frequencies (floored so they stay finite); a key labeled
    with a single action therefore saturates to a near point mass.
    """
    if not dataset.records and not dataset.demo_records:
        raise ValueError("cannot fit on an empty dataset")
    if num_actions is None:
        num_actions = _infer_num_actions(dataset)
    pairs = dataset.supervised_pairs(truncation_window)
    policy = TabularHistoryPolicy(num_actions, truncation_window)
    for key, row in _count_table(pairs, num_actions).items():
        policy.logits[key] = np.log(row / row.sum() + LOGIT_FLOOR)
    return policy


# Flat-parameter losses. Each returns (loss, gradient) for a vector that
# concatenates one logit row per key; they back both the trainers and the
# finite-difference checks.

def _row_log_softmax(rows: np.ndarray) -> np.ndarray:
    z = rows - rows.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def sft_loss_and_grad(theta: np.ndarray, counts: np.ndarray):
    """Total cross-entropy of per-key label counts under softmax(theta)."""
    k, a = counts.shape
    rows = theta.reshape(k, a)
    logp = _row_log_softmax(rows)
    loss = -float((counts * logp).sum())
    grad = np.exp(logp) * counts.sum(axis=1, keepdims=True) - counts
    return loss, grad.ravel()


def dpo_loss_and_grad(theta: np.ndarray, pair_rows, ref_margin: np.ndarray,
                      num_actions: int, beta: float):
    """Mean preference loss -log sigmoid(beta * margin) over encoded pairs.

    pair_rows holds (key row, preferred action, dispreferred action); the
    reference margin log pi_ref(a_w) - log pi_ref(a_l) is a constant.
    """
    k = theta.size // num_actions
    rows = theta.reshape(k, num_actions)
    logp = _row_log_softmax(rows)
    idx = np.asarray([r for r, _, _ in pair_rows])
    a_w = np.asarray([w for _, w, _ in pair_rows])
    a_l = np.asarray([l for _, _, l in pair_rows])
    z = beta * ((logp[idx, a_w] - logp[idx, a_l]) - np.asarray(ref_margin))
    n = len(idx)
    loss = float(np.logaddexp(0.0, -z).sum()) / n
    # d/dz of -log sigmoid(z) is -sigmoid(-z); the softmax terms cancel in
    # the margin so the per-pair gradient touches only the two actions.
    coef = -beta / (1.0 + np.exp(z)) / n
    grad = np.zeros_like(rows)
    np.add.at(grad, (idx, a_w), coef)
    np.add.at(grad, (idx, a_l), -coef)
    return loss, grad.ravel()


def kto_loss_and_grad(theta: np.ndarray, example_rows, ref_logps: np.ndarray,
                      desirable: np.ndarray, num_actions: int, beta: float,
                      lambda_desirable: float, lambda_undesirable: float, z0: float):
    """Unpaired preference loss with the reference shift z0 held constant."""
    k = theta.size // num_actions
    rows = theta.reshape(k, num_actions)
    logp = _row_log_softmax(rows)
    probs = np.exp(logp)
    idx = np.asarray([r for r, _ in example_rows])
    actions = np.asarray([a for _, a in example_rows])
    good = np.asarray(desirable, dtype=bool)
    ratio = logp[idx, actions] - np.asarray(ref_logps)
    x = np.where(good, beta * (ratio - z0), beta * (z0 - ratio))
    s = 1.0 / (1.0 + np.exp(-x))
    lam = np.where(good, lambda_desirable, lambda_undesirable)
    n = len(idx)
    loss = float((lam * (1.0 - s)).sum()) / n
    coef = np.where(good, -1.0, 1.0) * lam * beta * s * (1.0 - s) / n
    grad = np.zeros_like(rows)
    np.add.at(grad, (idx, actions), coef)
    row_weight = np.zeros(k)
    np.add.at(row_weight, idx, coef)
    grad -= row_weight[:, None] * probs
    return loss, grad.ravel()


def _key_layout(reference: TabularHistoryPolicy, histories) -> tuple:
    keys = sorted({reference.key(h) for h in histories}, key=lambda k: k.entries)
    index = {k: i for i, k in enumerate(keys)}
    theta = np.zeros((len(keys), reference.num_actions))
    for i, k in enumerate(keys):
        row = reference.logits.get(k)
        if row is not None:
            theta[i] = row
    return keys, index, theta


def _merge(reference: TabularHistoryPolicy, keys, theta: np.ndarray) -> TabularHistoryPolicy:
    fitted = reference.copy()
    for i, k in enumerate(keys):
        fitted.logits[k] = theta[i].copy()
    return fitted


def fit_sft_gd(dataset: CorrectionDataset, truncation_window: int,
               learning_rate: float = 0.5, steps: int = 500,
               num_actions: int | None = None) -> TabularHistoryPolicy:
    """Gradient-descent route to the SFT fit (kept for parity checks with the
    preference trainers; must agree with the closed form)."""
    if num_actions is None:
        num_actions = _infer_num_actions(dataset)
    pairs = dataset.supervised_pairs(truncation_window)
    table = _count_table(pairs, num_actions)
    keys = sorted(table, key=lambda k: k.entries)
    counts = np.stack([table[k] for k in keys])
    theta = np.zeros(counts.size)
    scale = counts.sum()
    for _ in range(steps):
        _, grad = sft_loss_and_grad(theta, counts)
        theta = theta - learning_rate * grad / scale
    policy = TabularHistoryPolicy(num_actions, truncation_window)
    rows = theta.reshape(len(keys), num_actions)
    for i, k in enumerate(keys):
        policy.logits[k] = rows[i].copy()
    return policy


def fit_dpo(reference: PolicySnapshot, pairs: Sequence, beta: float,
            learning_rate: float = 0.5, steps: int = 500) -> TabularHistoryPolicy:
    """Full-batch gradient descent on the paired preference loss, starting
    from (and referenced to) the given snapshot."""
    ref = reference.policy
    if not pairs:
        return ref.copy()
    for _, a_w, a_l in pairs:
        if a_w == a_l:
            raise ValueError("preference pairs need distinct actions")
    keys, index, theta = _key_layout(ref, [h for h, _, _ in pairs])
    pair_rows = [(index[ref.key(h)], a_w, a_l) for h, a_w, a_l in pairs]
    ref_margin = np.array([
        ref.log_prob_and_grad(h, a_w)[0] - ref.log_prob_and_grad(h, a_l)[0]
        for h, a_w, a_l in pairs])
    flat = theta.ravel()
    for _ in range(steps):
        _, grad = dpo_loss_and_grad(flat, pair_rows, ref_margin, ref.num_actions, beta)
        flat = flat - learning_rate * grad
    return _merge(ref, keys, flat.reshape(len(keys), ref.num_actions))


def kto_reference_shift(theta_rows: np.ndarray, ref_rows: np.ndarray) -> float:
    """Mean KL(pi || pi_ref) over the batch's keys (one logit row per key)."""
    logp = _row_log_softmax(theta_rows)
    logq = _row_log_softmax(ref_rows)
    return float((np.exp(logp) * (logp - logq)).sum(axis=1).mean())


def fit_kto(reference: PolicySnapshot, examples: Sequence, beta: float,
            lambda_desirable: float = 1.0, lambda_undesirable: float = 0.0,
            learning_rate: float = 0.5, steps: int = 500) -> TabularHistoryPolicy:
    """Full-batch gradient descent on the unpaired preference loss. The
    reference shift z0 is recomputed each step and frozen in the gradient."""
    ref = reference.policy
    if not examples:
        return ref.copy()
    keys, index, theta = _key_layout(ref, [h for h, _, _ in examples])
    ref_rows = theta.copy()
    example_rows = [(index[ref.key(h)], a) for h, a, _ in examples]
    ref_logps = np.array([ref.log_prob_and_grad(h, a)[0] for h, a, _ in examples])
    desirable = np.array([bool(d) for _, _, d in examples])
    flat = theta.ravel()
    for _ in range(steps):
        z0 = kto_reference_shift(flat.reshape(ref_rows.shape), ref_rows)
        _, grad = kto_loss_and_grad(flat, example_rows, ref_logps, desirable,
                                    ref.num_actions, beta, lambda_desirable,
                                    lambda_undesirable, z0)
        flat = flat - learning_rate * grad
    return _merge(ref, keys, flat.reshape(len(keys), ref.num_actions))


def fit_privileged_student(dataset: CorrectionDataset, spec: PomdpSpec) -> PrivilegedPolicy:
    """Privileged self-teacher: the empirical distribution of corrected/demo
    actions conditioned on the privileged state (pooled over time); states
    never seen fall back to uniform."""
    if not dataset.records and not dataset.demo_records:
        raise ValueError("cannot fit on an empty dataset")
    T, S, A = spec.horizon, spec.num_states, spec.num_actions
    counts = np.zeros((S, A))
    for d in dataset.demo_records:
        counts[d.state, d.action] += 1.0
    for r in dataset.records:
        counts[r.state, r.corrected_action] += 1.0
    totals = counts.sum(axis=1, keepdims=True)
    rows = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / A)
    return PrivilegedPolicy(np.broadcast_to(rows, (T, S, A)).copy())


def collect_demonstrations(spec: PomdpSpec, bundle: ExpertBundle, num_episodes: int,
                           root_seed: int) -> CorrectionDataset:
    """Demonstrations from the non-privileged expert acting alone."""
    dataset = CorrectionDataset()
    for episode in range(num_episodes):
        r = rollout(spec, bundle.nonprivileged, substream(root_seed, "demo", episode))
        for s in r.steps:
            dataset.demo_records.append(DemoRecord(s.history, s.state, s.action))
    return dataset


def _dpo_pairs(records: Sequence[CorrectionRecord], window: int) -> list:
    return [(r.history.truncate(window), r.corrected_action, r.student_action)
            for r in records if r.corrected_action != r.student_action]


def _kto_examples(records: Sequence[CorrectionRecord], window: int) -> list:
    examples = [(r.history.truncate(window), r.corrected_action, True) for r in records]
    examples.extend((r.history.truncate(window), r.student_action, False)
                    for r in records if r.student_action != r.corrected_action)
    return examples


def _update_policy(config: LeapConfig, dataset: CorrectionDataset,
                   previous: PolicySnapshot, batch: Sequence[CorrectionRecord],
                   num_actions: int) -> TabularHistoryPolicy:
    rule = config.update_rule
    window = config.truncation_window
    if isinstance(rule, SFT):
        return fit_sft(dataset, window, num_actions)
    if isinstance(rule, DPO):
        return fit_dpo(previous, _dpo_pairs(batch, window), rule.beta,
                       config.learning_rate, config.optimization_steps)
    if isinstance(rule, KTO):
        return fit_kto(previous, _kto_examples(batch, window), rule.beta,
                       rule.lambda_desirable, rule.lambda_undesirable,
                       config.learning_rate, config.optimization_steps)
    raise TypeError(f"unknown update rule {rule!r}")


def validation_success(spec: PomdpSpec, policy, validation_seeds: Sequence[int]) -> float:
    """Mean success over one rollout per validation seed (reproducible from
    the policy and the seeds alone)."""
    if not validation_seeds:
        raise ValueError("need at least one validation seed")
    wins = sum(rollout(spec, policy, substream(seed, "validation")).succeeded
               for seed in validation_seeds)
    return wins / len(validation_seeds)


def select_best(snapshots: Sequence[PolicySnapshot], spec: PomdpSpec,
                validation_seeds: Sequence[int]) -> PolicySnapshot:
    """Highest mean validation success; ties go to the earliest iteration."""
    if not snapshots:
        raise ValueError("no snapshots to select from")
    best, best_score = None, -1.0
    for snap in sorted(snapshots, key=lambda s: s.iteration):
        score = validation_success(spec, snap, validation_seeds)
        if score > best_score:
            best, best_score = snap, score
    return best


def leap_run(spec: PomdpSpec, config: LeapConfig, demos: CorrectionDataset,
             analysis_options: "analysis.AnalysisOptions | None" = None,
             bundle: ExpertBundle | None = None):
    """The full iterative loop: BC on demonstrations, then per iteration roll
    out, correct with the (possibly constrained or self-fit) privileged
    teacher, aggregate, and update.

    Returns (snapshots, MetricsReport) with one report row per policy
    iterate, iteration 0 included.
    """
    if not demos.records and not demos.demo_records:
        raise ValueError("need a nonempty demonstration dataset")
    opts = analysis_options or analysis.AnalysisOptions()
    if bundle is None:
        bundle = make_expert_bundle(spec)
    window = config.truncation_window
    dataset = demos.copy()
    if dataset.partitions:
        raise ValueError("demonstration dataset must not carry correction batches")

    pi0 = fit_sft(dataset, window, spec.num_actions)
    snapshots = [PolicySnapshot(pi0, 0, "pi_0")]
    tracker = analysis.ReportTracker(spec, bundle, config, opts)
    rows = [tracker.row_for(snapshots[0], batches=[], played=[])]

    batches: list = []
    for i in range(1, config.num_iterations + 1):
        previous = snapshots[-1]
        rollouts = [rollout(spec, previous, substream(config.root_seed, "rollout", i, e))
                    for e in range(config.rollouts_per_iteration)]
        kind = config.expert_kind
        if isinstance(kind, SelfTeacher):
            kind = ExternalTeacher(fit_privileged_student(dataset, spec))
        teacher_rng = substream(config.root_seed, "teacher", i)
        batch = correct_rollouts(rollouts, bundle, config.mode, kind, i, teacher_rng)
        dataset.add_iteration(i, batch)
        batches.append([(r.history.truncate(window), r.corrected_action) for r in batch])

        policy = _update_policy(config, dataset, previous, batch, spec.num_actions)
        snapshots.append(PolicySnapshot(policy, i, f"pi_{i}"))
        rows.append(tracker.row_for(snapshots[-1], batches=batches,
                                    played=snapshots[:-1]))

    report = tracker.finish(rows)
    return snapshots, report
