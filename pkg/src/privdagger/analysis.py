"""Exact and Monte Carlo computation of every reported quantity: performance,
imitation and realizability gaps, recoverability, measured regret, and the
performance-bound slack, plus finite-difference gradient checking.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import HistoryKey, PomdpSpec, rollout
from .errors import ResourceLimitError
from .expert import (ConstrainedTeacher, ExpertBundle, floor_distribution,
                     constrained_expert)
from .rng import substream

EXACT_LAYER_CAP = 500_000
EXACT_NODE_CAP = 200_000


@dataclass(frozen=True)
class EvalResult:
    j: float
    success_rate: float
    avg_actions: float
    j_se: float
    success_se: float
    episodes: int
    method: str


def _success_mask(spec: PomdpSpec) -> np.ndarray:
    mask = np.zeros((spec.num_states, spec.num_actions), dtype=bool)
    for s, a in spec.success_predicate:
        mask[s, a] = True
    return mask


def _exact_state_eval(spec: PomdpSpec, policy) -> EvalResult:
    """Exact evaluation of a state-feedback policy via the state marginal."""
    mask = _success_mask(spec)
    m = spec.initial_dist.copy()
    j = succ = acts = 0.0
    for t in range(spec.horizon):
        acts += m.sum()
        flow = m[:, None] * policy.table[t]
        j += float((flow * spec.reward).sum())
        succ += float(flow[mask].sum())
        flow = np.where(mask, 0.0, flow)
        m = np.einsum("sa,sap->p", flow, spec.transition)
    return EvalResult(float(j), float(succ), float(acts), 0.0, 0.0, 0, "exact")


def _exact_history_eval(spec: PomdpSpec, policy, cap: int) -> EvalResult:
    """Exact evaluation of a history policy by sweeping the joint
    (history, state) occupancy, removing mass that hits a success pair."""
    mask = _success_mask(spec)
    layer: dict = {}
    for s in range(spec.num_states):
        for o in range(spec.num_observations):
            w = spec.initial_dist[s] * spec.observation_model[s, spec.null_action, o]
            if w > 0.0:
                layer.setdefault(HistoryKey((o,)), np.zeros(spec.num_states))[s] += w
    j = succ = acts = 0.0
    for t in range(spec.horizon):
        if len(layer) * spec.num_states > cap:
            raise ResourceLimitError(
                f"exact evaluation layer at t={t + 1} exceeds cap {cap}")
        nxt: dict = {}
        for h, w in layer.items():
            dist = np.asarray(policy(h), dtype=float)
            flow = w[:, None] * dist[None, :]
            acts += float(w.sum())
            j += float((flow * spec.reward).sum())
            succ += float(flow[mask].sum())
            if t == spec.horizon - 1:
                continue
            flow = np.where(mask, 0.0, flow)
            for a in range(spec.num_actions):
                if not flow[:, a].any():
                    continue
                mass = flow[:, a] @ spec.transition[:, a, :]
                emit = mass[:, None] * spec.observation_model[:, a, :]
                for o in range(spec.num_observations):
                    if emit[:, o].any():
                        vec = nxt.setdefault(h.extend(a, o), np.zeros(spec.num_states))
                        vec += emit[:, o]
        layer = nxt
    return EvalResult(float(j), float(succ), float(acts), 0.0, 0.0, 0, "exact")


def _mc_eval(spec: PomdpSpec, policy, seeds: Sequence[int]) -> EvalResult:
    returns, wins, acts = [], [], []
    for seed in seeds:
        r = rollout(spec, policy, substream(seed, "mc_eval"))
        returns.append(r.total_reward)
        wins.append(1.0 if r.succeeded else 0.0)
        acts.append(float(len(r.steps)))
    n = len(seeds)
    returns, wins, acts = np.array(returns), np.array(wins), np.array(acts)

    def se(x):
        return float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0

    return EvalResult(float(returns.mean()), float(wins.mean()), float(acts.mean()),
                      se(returns), se(wins), n, "monte_carlo")


def evaluate_performance(spec: PomdpSpec, policy, method: str = "exact",
                         seeds: Sequence[int] | None = None,
                         cap: int = EXACT_LAYER_CAP) -> EvalResult:
    """Expected total reward, success rate, and mean episode length.

    ``exact`` enumerates trajectories (resource-capped); ``monte_carlo``
    averages seeded rollouts, one per seed, and reports standard errors.
    """
    if method == "exact":
        if getattr(policy, "uses_privileged_state", False):
            return _exact_state_eval(spec, policy)
        return _exact_history_eval(spec, policy, cap)
    if method == "monte_carlo":
        if not seeds:
            raise ValueError("monte_carlo evaluation needs seeds")
        return _mc_eval(spec, policy, seeds)
    raise ValueError(f"unknown evaluation method {method!r}")


def imitation_gap(spec: PomdpSpec, bundle: ExpertBundle, policy, horizon: int,
                  method: str = "exact", seeds: Sequence[int] | None = None) -> float:
    """Per-step performance deficit (1/T)(J(expert) - J(policy)); the expert
    acts on the privileged state, the policy on the history."""
    j_expert = evaluate_performance(spec, bundle.privileged, "exact").j
    j_policy = evaluate_performance(spec, policy, method, seeds=seeds).j
    return (j_expert - j_policy) / horizon


def recoverability(spec: PomdpSpec, tables, scope: str = "all") -> float:
    """Maximum absolute advantage |q - v| of the expert tables.

    Scope ``reachable`` restricts states at each step to those with positive
    occupancy under some policy (forward reachability through non-terminal
    pairs); ``all`` scans the entire table.
    """
    adv = np.abs(tables.q - tables.v[:, :, None])
    if scope == "all":
        return float(adv.max())
    if scope != "reachable":
        raise ValueError(f"unknown scope {scope!r}")
    mask = _success_mask(spec)
    reachable = spec.initial_dist > 0.0
    worst = 0.0
    for t in range(spec.horizon):
        if reachable.any():
            worst = max(worst, float(adv[t][reachable].max()))
        alive = np.where(mask, 0.0, reachable[:, None].astype(float))
        reachable = np.einsum("sa,sap->p", alive, spec.transition) > 0.0
    return worst


@dataclass(frozen=True)
class RealizabilityResult:
    value: float
    method: str  # "exact" | "lower_bound"


def _l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).sum())


def _node_cost(bundle: ExpertBundle, t: int, w: np.ndarray,
               delta: float | None) -> float:
    total = w.sum()
    if total <= 0.0:
        return 0.0
    table = bundle.privileged.table[t]
    mixture = (w / total) @ table
    if delta is None:
        return float(sum(w[s] * _l1(table[s], mixture)
                         for s in range(len(w)) if w[s] > 0.0))
    q = floor_distribution(mixture)
    cost = 0.0
    for s in range(len(w)):
        if w[s] > 0.0:
            tilted = constrained_expert(floor_distribution(table[s]), q, delta)
            cost += w[s] * _l1(tilted, q)
    return float(cost)


def _exact_realizability(spec: PomdpSpec, bundle: ExpertBundle,
                         delta: float | None, cap: int) -> float:
    """Supremum over deterministic history policies of the time-averaged L1
    distance, by dynamic programming over the history tree (the objective is
    linear in the occupancy measure, so deterministic policies suffice)."""
    mask = _success_mask(spec)
    visited = [0]

    def visit(t: int, w: np.ndarray) -> float:
        visited[0] += 1
        if visited[0] > cap:
            raise ResourceLimitError(f"exact realizability tree exceeds cap {cap}")
        gain = _node_cost(bundle, t, w, delta)
        if t == spec.horizon - 1:
            return gain
        best = -np.inf
        for a in range(spec.num_actions):
            alive = np.where(mask[:, a], 0.0, w)
            mass = alive @ spec.transition[:, a, :]
            subtotal = 0.0
            if mass.any():
                emit = mass[:, None] * spec.observation_model[:, a, :]
                for o in range(spec.num_observations):
                    if emit[:, o].any():
                        subtotal += visit(t + 1, emit[:, o])
            best = max(best, subtotal)
        return gain + best

    total = 0.0
    for o in range(spec.num_observations):
        w = spec.initial_dist * spec.observation_model[:, spec.null_action, o]
        if w.any():
            total += visit(0, w)
    return total / spec.horizon


def _lower_bound_realizability(spec: PomdpSpec, bundle: ExpertBundle, policy_set,
                               delta: float | None, window: int | None,
                               episodes: int, root_seed: int) -> float:
    """Max over the supplied policies of the Monte Carlo time-averaged L1
    distance, with the class's best approximator re-solved per (truncated)
    key as the occupancy-weighted conditional average."""
    best = 0.0
    for p_idx, policy in enumerate(policy_set):
        steps = []
        for e in range(episodes):
            r = rollout(spec, policy, substream(root_seed, "realizability", p_idx, e))
            for s in r.steps:
                steps.append((e, s.history.t - 1, s.state, s.history))
        table = bundle.privileged.table
        expert_rows, targets = [], []
        for _, t, state, h in steps:
            mixture = bundle.nonprivileged(h)
            if delta is None:
                expert_rows.append(table[t, state])
                targets.append(mixture)
            else:
                q = floor_distribution(mixture)
                expert_rows.append(constrained_expert(
                    floor_distribution(table[t, state]), q, delta))
                targets.append(q)
        approx: dict = {}
        for (_, t, state, h), target in zip(steps, targets):
            key = h if window is None else h.truncate(window)
            num, count = approx.get(key, (np.zeros(spec.num_actions), 0))
            approx[key] = (num + target, count + 1)
        per_episode = np.zeros(episodes)
        for (e, t, state, h), row in zip(steps, expert_rows):
            key = h if window is None else h.truncate(window)
            num, count = approx[key]
            per_episode[e] += _l1(row, num / count)
        best = max(best, float(per_episode.mean() / spec.horizon))
    return best


def realizability_gap(spec: PomdpSpec, bundle: ExpertBundle, *,
                      delta: float | None = None, truncation_window: int | None = None,
                      method: str = "exact", policy_set=None, episodes: int = 200,
                      root_seed: int = 0, cap: int = EXACT_NODE_CAP) -> RealizabilityResult:
    """Worst-case time-averaged L1 distance between the (possibly
    KL-constrained) privileged expert and the class's best history-keyed
    approximator.

    Exact mode maximizes over all deterministic history policies and needs
    the full-window class; lower-bound mode maximizes over the supplied
    policies (e.g. the training iterates) and is tagged as such.
    """
    if method == "exact":
        if truncation_window is not None and truncation_window < spec.horizon:
            raise ValueError("exact mode is defined for the full-window class")
        return RealizabilityResult(_exact_realizability(spec, bundle, delta, cap), "exact")
    if method == "lower_bound":
        if not policy_set:
            raise ValueError("lower_bound mode needs a policy set")
        window = None
        if truncation_window is not None and truncation_window < spec.horizon:
            window = truncation_window
        value = _lower_bound_realizability(spec, bundle, policy_set, delta, window,
                                           episodes, root_seed)
        return RealizabilityResult(value, "lower_bound")
    raise ValueError(f"unknown realizability method {method!r}")


def measured_regret(loss_batches: Sequence[Sequence], played_policies: Sequence) -> float:
    """Average regret of the played policies on the per-iteration correction
    losses, against the best-in-hindsight tabular policy.

    Each batch is a list of (key, action) labels and its loss is the mean
    cross-entropy over the batch; batch i is evaluated on the policy that
    generated it. The hindsight minimum is the closed-form aggregate fit of
    the (per-batch-weighted) label counts, whose loss is a weighted entropy.
    """
    if len(loss_batches) != len(played_policies):
        raise ValueError("need one played policy per loss batch")
    n = len(loss_batches)
    if n == 0:
        return 0.0
    played_total = 0.0
    weighted: dict = {}
    for batch, policy in zip(loss_batches, played_policies):
        if not batch:
            continue
        scale = 1.0 / len(batch)
        for key, action in batch:
            played_total -= scale * float(np.log(policy.action_distribution(key)[action]))
            row = weighted.setdefault(key, {})
            row[action] = row.get(action, 0.0) + scale
    hindsight_total = 0.0
    for row in weighted.values():
        total = sum(row.values())
        hindsight_total += total * np.log(total) - sum(w * np.log(w) for w in row.values())
    return (played_total - hindsight_total) / n


@dataclass(frozen=True)
class TheoremCheck:
    slack: float
    strict: bool                 # realizability carried the exact tag
    constraint_bound_ok: bool | None  # eps <= sqrt(2 delta) + 1e-9, when delta given


def check_theorem_bound(j_policy: float, j_expert: float, recoverability_coeff: float,
                        realizability: float, regret: float, horizon: int,
                        realizability_method: str = "exact",
                        delta: float | None = None) -> TheoremCheck:
    """Slack of the performance bound
    J(pi)/T >= J(expert)/T - H * (eps + gamma); nonnegative slack means the
    bound holds. With a delta the constrained-expert chain eps <= sqrt(2
    delta) is verified as well."""
    slack = j_policy / horizon - (j_expert / horizon
                                  - recoverability_coeff * (realizability + regret))
    bound_ok = None
    if delta is not None:
        bound_ok = bool(realizability <= np.sqrt(2.0 * delta) + 1e-9)
    return TheoremCheck(float(slack), realizability_method == "exact", bound_ok)


def grad_check(loss_and_grad: Callable, point: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central finite
    differences, coordinate by coordinate."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=float)
    _, grad = loss_and_grad(point)
    grad = np.asarray(grad, dtype=float)
    worst = 0.0
    for i in range(point.size):
        plus = point.copy()
        plus[i] += step
        minus = point.copy()
        minus[i] -= step
        numeric = (loss_and_grad(plus)[0] - loss_and_grad(minus)[0]) / (2.0 * step)
        worst = max(worst, abs(grad[i] - numeric) / max(1.0, abs(grad[i])))
    return float(worst)


def proportion_se(p: float, n: int) -> float:
    """Standard error of a Bernoulli mean."""
    return float(np.sqrt(max(p * (1.0 - p), 0.0) / n)) if n > 0 else 0.0


@dataclass(frozen=True)
class ReportRow:
    iteration: int
    j: float
    success_rate: float
    avg_actions: float
    imitation_gap: float
    realizability_gap: float
    realizability_method: str
    recoverability_reachable: float
    recoverability_all: float
    measured_regret: float
    theorem1_slack: float
    j_se: float = 0.0
    success_se: float = 0.0
    eval_episodes: int = 0
    eval_method: str = "exact"

    CSV_FIELDS = ("iteration", "J", "success_rate", "avg_actions", "imitation_gap",
                  "realizability_gap", "realizability_method",
                  "recoverability_reachable", "recoverability_all",
                  "measured_regret", "theorem1_slack")

    def csv_values(self) -> list:
        return [self.iteration, self.j, self.success_rate, self.avg_actions,
                self.imitation_gap, self.realizability_gap, self.realizability_method,
                self.recoverability_reachable, self.recoverability_all,
                self.measured_regret, self.theorem1_slack]

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "J": self.j,
            "success_rate": self.success_rate,
            "avg_actions": self.avg_actions,
            "imitation_gap": self.imitation_gap,
            "realizability_gap": self.realizability_gap,
            "realizability_method": self.realizability_method,
            "recoverability_reachable": self.recoverability_reachable,
            "recoverability_all": self.recoverability_all,
            "measured_regret": self.measured_regret,
            "theorem1_slack": self.theorem1_slack,
            "J_se": self.j_se,
            "success_se": self.success_se,
            "eval_episodes": self.eval_episodes,
            "eval_method": self.eval_method,
        }


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple
    metadata: dict

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "rows": [r.to_dict() for r in self.rows]}

    def to_csv(self) -> str:
        lines = [",".join(ReportRow.CSV_FIELDS)]
        lines.extend(",".join(_fmt(v) for v in row.csv_values()) for row in self.rows)
        return "\n".join(lines) + "\n"

    def best_theorem_slack(self) -> float:
        """The bound guarantees at least one iterate satisfies it, so the
        meaningful check is the best slack among iterations >= 1."""
        return max(r.theorem1_slack for r in self.rows if r.iteration >= 1)

    @property
    def final_row(self) -> ReportRow:
        return self.rows[-1]


@dataclass(frozen=True)
class AnalysisOptions:
    eval_method: str = "auto"            # exact | monte_carlo | auto
    eval_episodes: int = 1000
    exact_cap: int = EXACT_LAYER_CAP
    realizability_method: str = "auto"   # exact | lower_bound | auto
    realizability_episodes: int = 200
    realizability_cap: int = EXACT_NODE_CAP


class ReportTracker:
    """Assembles one ReportRow per iterate during a training run."""

    def __init__(self, spec: PomdpSpec, bundle: ExpertBundle, config, opts: AnalysisOptions):
        self.spec = spec
        self.bundle = bundle
        self.config = config
        self.opts = opts
        self.delta = (config.expert_kind.delta
                      if isinstance(config.expert_kind, ConstrainedTeacher) else None)
        self.expert_j = evaluate_performance(spec, bundle.privileged, "exact").j
        self.recoverability_all = recoverability(spec, bundle.tables, "all")
        self.recoverability_reachable = recoverability(spec, bundle.tables, "reachable")
        self._exact_realizability: RealizabilityResult | None = None
        self._lb_running_max = 0.0

    def _evaluate(self, snapshot) -> EvalResult:
        method = self.opts.eval_method
        if method in ("auto", "exact"):
            try:
                return evaluate_performance(self.spec, snapshot, "exact",
                                            cap=self.opts.exact_cap)
            except ResourceLimitError:
                if method == "exact":
                    raise
        seeds = derive_seeds(self.config.root_seed, "report_eval",
                             snapshot.iteration, count=self.opts.eval_episodes)
        return evaluate_performance(self.spec, snapshot, "monte_carlo", seeds=seeds)

    def _realizability(self, snapshot) -> RealizabilityResult:
        window = self.config.truncation_window
        full_window = window >= self.spec.horizon
        method = self.opts.realizability_method
        if method in ("auto", "exact") and full_window:
            if self._exact_realizability is None:
                try:
                    self._exact_realizability = realizability_gap(
                        self.spec, self.bundle, delta=self.delta, method="exact",
                        cap=self.opts.realizability_cap)
                except ResourceLimitError:
                    if method == "exact":
                        raise
            if self._exact_realizability is not None:
                return self._exact_realizability
        elif method == "exact":
            raise ValueError("exact realizability needs the full-window class")
        result = realizability_gap(
            self.spec, self.bundle, delta=self.delta,
            truncation_window=None if full_window else window,
            method="lower_bound", policy_set=[snapshot],
            episodes=self.opts.realizability_episodes,
            root_seed=self.config.root_seed)
        self._lb_running_max = max(self._lb_running_max, result.value)
        return RealizabilityResult(self._lb_running_max, "lower_bound")

    def row_for(self, snapshot, batches, played) -> ReportRow:
        ev = self._evaluate(snapshot)
        gap = (self.expert_j - ev.j) / self.spec.horizon
        real = self._realizability(snapshot)
        regret = measured_regret(batches, played)
        check = check_theorem_bound(ev.j, self.expert_j, self.recoverability_all,
                                    real.value, regret, self.spec.horizon,
                                    real.method, self.delta)
        return ReportRow(
            iteration=snapshot.iteration,
            j=float(ev.j), success_rate=float(ev.success_rate),
            avg_actions=float(ev.avg_actions), imitation_gap=float(gap),
            realizability_gap=float(real.value), realizability_method=real.method,
            recoverability_reachable=float(self.recoverability_reachable),
            recoverability_all=float(self.recoverability_all),
            measured_regret=float(regret), theorem1_slack=float(check.slack),
            j_se=float(ev.j_se), success_se=float(ev.success_se),
            eval_episodes=ev.episodes, eval_method=ev.method)

    def finish(self, rows) -> MetricsReport:
        digest = hashlib.sha256(repr(self.config).encode("utf-8")).hexdigest()
        metadata = {
            "spec_name": self.spec.name,
            "config_digest": digest,
            "root_seed": self.config.root_seed,
            "horizon": self.spec.horizon,
            "expert_J": float(self.expert_j),
        }
        return MetricsReport(tuple(rows), metadata)


def derive_seeds(root_seed: int, *path, count: int) -> list:
    """Stable per-episode integer seeds for a labelled seed namespace."""
    import zlib

    entropy = [int(root_seed) & 0xFFFFFFFF]
    for p in path:
        entropy.append(zlib.crc32(str(p).encode("utf-8")))
    state = np.random.SeedSequence(entropy).generate_state(count, dtype=np.uint32)
    return [int(x) for x in state]
