"""Privileged, non-privileged, and constrained experts, plus trajectory
correction (the teacher side of the iterative loop).

The privileged expert solves the fully observed MDP by finite-horizon value
iteration. The non-privileged expert is its belief-marginalization: the
history-measurable projection pi(a|h) = sum_s P(s|h) pi(a|s). The constrained
expert projects the privileged distribution into a KL ball around the
non-privileged one along the geometric path p^(1-alpha) q^alpha, which is the
KKT solution of the constrained projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .env import HistoryKey, PomdpSpec, PrivilegedRollout, history_belief
from .errors import ContractViolationError

DIST_FLOOR = 1e-3         # applied before any KL computation
KL_RESIDUAL_TOL = 1e-8    # bisection stops when |KL - delta| is below this


@dataclass(frozen=True)
class ValueTables:
    """Optimal finite-horizon tables: q[t, s, a] and v[t, s], 0-based step
    index, terminal layer v[T] identically zero."""

    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if q.ndim != 3 or v.shape != q.shape[:2]:
            raise ValueError("q must be (T, S, A) and v its max over actions")
        q.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v", v)

    @property
    def horizon(self) -> int:
        return self.q.shape[0]

    def max_consistency_error(self, spec: PomdpSpec) -> float:
        """Worst violation of v = max_a q and of the backward recursion."""
        err = np.abs(self.v - self.q.max(axis=2)).max()
        v_next = np.zeros(spec.num_states)
        for t in range(self.horizon - 1, -1, -1):
            backup = spec.reward + np.einsum("sap,p->sa", spec.transition, v_next)
            err = max(err, np.abs(self.q[t] - backup).max())
            v_next = self.v[t]
        return float(err)


def solve_privileged(spec: PomdpSpec) -> ValueTables:
    """Finite-horizon value iteration on the privileged (fully observed) MDP."""
    T, S, A = spec.horizon, spec.num_states, spec.num_actions
    q = np.zeros((T, S, A))
    v = np.zeros((T, S))
    v_next = np.zeros(S)
    for t in range(T - 1, -1, -1):
        q[t] = spec.reward + np.einsum("sap,p->sa", spec.transition, v_next)
        v[t] = q[t].max(axis=1)
        v_next = v[t]
    return ValueTables(q, v)


@dataclass(frozen=True)
class PrivilegedPolicy:
    """State-feedback policy: a dense (T, S, A) table of action distributions."""

    table: np.ndarray

    uses_privileged_state = True

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    def dist(self, step: int, state: int) -> np.ndarray:
        return self.table[step, state]

    def __call__(self, history: HistoryKey, state: int) -> np.ndarray:
        return self.table[history.t - 1, state]


def make_privileged_policy(tables: ValueTables, temperature: float = 0.0) -> PrivilegedPolicy:
    """Greedy (temperature 0, lowest-index tie-break) or softmax(q/temperature)."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    T, S, A = tables.q.shape
    if temperature == 0.0:
        table = np.zeros((T, S, A))
        best = tables.q.argmax(axis=2)
        t_idx, s_idx = np.meshgrid(np.arange(T), np.arange(S), indexing="ij")
        table[t_idx, s_idx, best] = 1.0
    else:
        z = tables.q / temperature
        z = z - z.max(axis=2, keepdims=True)
        e = np.exp(z)
        table = e / e.sum(axis=2, keepdims=True)
    return PrivilegedPolicy(table)


class NonPrivilegedExpert:
    """Belief-marginalization of a privileged policy: pi(a|h) = b_h @ pi(.|s).

    Beliefs are filtered exactly along the history and cached per prefix.
    """

    uses_privileged_state = False

    def __init__(self, spec: PomdpSpec, privileged: PrivilegedPolicy):
        self.spec = spec
        self.privileged = privileged
        self._beliefs: dict = {}

    def belief(self, history: HistoryKey) -> np.ndarray:
        cached = self._beliefs.get(history)
        if cached is None:
            cached = history_belief(self.spec, history).probs
            self._beliefs[history] = cached
        return cached

    def __call__(self, history: HistoryKey) -> np.ndarray:
        return self.belief(history) @ self.privileged.table[history.t - 1]


def make_nonprivileged_policy(spec: PomdpSpec, privileged: PrivilegedPolicy) -> NonPrivilegedExpert:
    return NonPrivilegedExpert(spec, privileged)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats, treating 0 log 0 as 0."""
    mask = p > 0.0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def floor_distribution(dist: np.ndarray, floor: float = DIST_FLOOR) -> np.ndarray:
    """Strictly positive version of a distribution (keeps KL finite)."""
    d = np.maximum(np.asarray(dist, dtype=float), floor)
    return d / d.sum()


def _geometric_mix(log_p: np.ndarray, log_q: np.ndarray, alpha: float) -> np.ndarray:
    z = (1.0 - alpha) * log_p + alpha * log_q
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def constrained_expert(privileged_dist: np.ndarray, nonprivileged_dist: np.ndarray,
                       delta: float) -> np.ndarray:
    """KL-projection of p toward the delta-KL ball around q.

    Returns p unchanged when KL(p||q) <= delta; otherwise the point on the
    geometric path p^(1-a) q^a whose KL to q equals delta (found by
    bisection).
    """
    p = np.asarray(privileged_dist, dtype=float)
    q = np.asarray(nonprivileged_dist, dtype=float)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if p.min() <= 0.0 or q.min() <= 0.0:
        raise ValueError("constrained projection needs strictly positive inputs")
    if kl_divergence(p, q) <= delta:
        return p.copy()
    if delta == 0.0:
        return q.copy()
    log_p, log_q = np.log(p), np.log(q)
    lo, hi = 0.0, 1.0  # KL(mix(lo)||q) > delta >= KL(mix(hi)||q) = 0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        mix = _geometric_mix(log_p, log_q, mid)
        residual = kl_divergence(mix, q) - delta
        if abs(residual) <= KL_RESIDUAL_TOL * 0.1:
            return mix
        if residual > 0.0:
            lo = mid
        else:
            hi = mid
    return _geometric_mix(log_p, log_q, 0.5 * (lo + hi))


def sampled_penalty_correction(privileged_dist: np.ndarray, nonprivileged_dist: np.ndarray,
                               penalty: float, num_samples: int,
                               rng: np.random.Generator) -> int:
    """Penalty-method approximation of the constrained expert.

    Draws num_samples candidates from each distribution, importance-weights
    each candidate toward the tilted target p(a) q(a)^penalty, and samples
    one action from the self-normalized weights.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    p = np.asarray(privileged_dist, dtype=float)
    q = np.asarray(nonprivileged_dist, dtype=float)
    n = len(p)
    candidates = np.concatenate([
        rng.choice(n, size=num_samples, p=p / p.sum()),
        rng.choice(n, size=num_samples, p=q / q.sum()),
    ])
    proposal = 0.5 * (p + q)
    with np.errstate(divide="ignore"):
        log_w = (np.log(p[candidates]) + penalty * np.log(q[candidates])
                 - np.log(proposal[candidates]))
    log_w -= log_w.max()
    w = np.exp(log_w)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise ValueError("penalty weights are degenerate (disjoint supports?)")
    pick = rng.choice(len(candidates), p=w / total)
    return int(candidates[pick])


@dataclass(frozen=True)
class ExpertBundle:
    """Privileged expert plus its derived non-privileged and constrained forms."""

    spec: PomdpSpec
    tables: ValueTables
    privileged: PrivilegedPolicy
    nonprivileged: NonPrivilegedExpert
    expert_temperature: float = 0.0

    def privileged_dist(self, step: int, state: int) -> np.ndarray:
        return self.privileged.dist(step, state)

    def nonprivileged_dist(self, history: HistoryKey) -> np.ndarray:
        return self.nonprivileged(history)

    def floored_pair(self, step: int, state: int, history: HistoryKey):
        p = floor_distribution(self.privileged.dist(step, state))
        q = floor_distribution(self.nonprivileged(history))
        return p, q

    def constrained_dist(self, step: int, state: int, history: HistoryKey,
                         delta: float) -> np.ndarray:
        p, q = self.floored_pair(step, state, history)
        return constrained_expert(p, q, delta)

    def constrained(self, delta: float) -> Callable:
        return lambda step, state, history: self.constrained_dist(step, state, history, delta)


def make_expert_bundle(spec: PomdpSpec, temperature: float = 0.0) -> ExpertBundle:
    tables = solve_privileged(spec)
    privileged = make_privileged_policy(tables, temperature)
    nonprivileged = make_nonprivileged_policy(spec, privileged)
    return ExpertBundle(spec, tables, privileged, nonprivileged, temperature)


@dataclass(frozen=True)
class CorrectionRecord:
    """One corrected timestep: what the student did and what the teacher says."""

    history: HistoryKey
    state: int
    student_action: int
    corrected_action: int
    corrected_distribution: np.ndarray
    iteration: int

    def __post_init__(self):
        dist = np.asarray(self.corrected_distribution, dtype=float)
        dist.setflags(write=False)
        object.__setattr__(self, "corrected_distribution", dist)
        if int(np.argmax(dist)) != self.corrected_action:
            raise ValueError("corrected_action must be the argmax of corrected_distribution")

    def to_dict(self) -> dict:
        return {
            "history": self.history.to_list(),
            "state": self.state,
            "student_action": self.student_action,
            "corrected_action": self.corrected_action,
            "corrected_distribution": self.corrected_distribution.tolist(),
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CorrectionRecord":
        return cls(
            history=HistoryKey(tuple(payload["history"])),
            state=payload["state"],
            student_action=payload["student_action"],
            corrected_action=payload["corrected_action"],
            corrected_distribution=np.array(payload["corrected_distribution"], dtype=float),
            iteration=payload["iteration"],
        )


def records_to_jsonl(records: Iterable[CorrectionRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def records_from_jsonl(text: str) -> list:
    return [CorrectionRecord.from_dict(json.loads(line))
            for line in text.splitlines() if line.strip()]


# Teacher kinds used by correct_rollouts (and by the run loop).

@dataclass(frozen=True)
class PrivilegedTeacher:
    pass


@dataclass(frozen=True)
class ConstrainedTeacher:
    delta: float


@dataclass(frozen=True)
class SampledTeacher:
    penalty: float
    num_samples: int


@dataclass(frozen=True)
class ExternalTeacher:
    """Any state-feedback policy used as the correction source (e.g. a
    privileged student fit from the learner's own data)."""

    policy: PrivilegedPolicy


def _corrected_distribution(bundle: ExpertBundle, kind, step: int, state: int,
                            history: HistoryKey, rng) -> np.ndarray:
    if isinstance(kind, PrivilegedTeacher):
        p, _ = bundle.floored_pair(step, state, history)
        return p
    if isinstance(kind, ConstrainedTeacher):
        return bundle.constrained_dist(step, state, history, kind.delta)
    if isinstance(kind, SampledTeacher):
        if rng is None:
            raise ValueError("sampled teacher needs an rng")
        p, q = bundle.floored_pair(step, state, history)
        action = sampled_penalty_correction(p, q, kind.penalty, kind.num_samples, rng)
        dist = np.zeros(bundle.spec.num_actions)
        dist[action] = 1.0
        return dist
    if isinstance(kind, ExternalTeacher):
        return np.asarray(kind.policy.dist(step, state), dtype=float)
    raise TypeError(f"unknown teacher kind {kind!r}")


def correct_rollouts(rollouts: Sequence[PrivilegedRollout], expert: ExpertBundle,
                     mode: str, kind, iteration: int,
                     rng: np.random.Generator | None = None) -> list:
    """Teacher pass over rollouts: one CorrectionRecord per selected timestep.

    mode "failed_only" corrects only unsuccessful rollouts; "all_steps"
    corrects every rollout.
    """
    if mode not in ("failed_only", "all_steps"):
        raise ValueError(f"unknown correction mode {mode!r}")
    spec = expert.spec
    records = []
    for r in rollouts:
        if mode == "failed_only" and r.succeeded:
            continue
        for s in r.steps:
            step_idx = s.history.t - 1
            if not (0 <= step_idx < spec.horizon and 0 <= s.state < spec.num_states):
                raise ContractViolationError(
                    f"expert undefined at step {step_idx}, state {s.state}")
            dist = _corrected_distribution(expert, kind, step_idx, s.state, s.history, rng)
            records.append(CorrectionRecord(
                history=s.history,
                state=s.state,
                student_action=s.action,
                corrected_action=int(np.argmax(dist)),
                corrected_distribution=dist,
                iteration=iteration,
            ))
    return records
