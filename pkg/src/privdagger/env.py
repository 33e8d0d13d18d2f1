"""Finite tabular POMDP model, concrete environments, simulation, and exact
Bayes filtering.

Conventions baked in here and relied on everywhere else:

* The first observation o_1 is emitted from the initial state through a
  reserved null-action column of ``observation_model`` (index
  ``num_actions``), so every history starts with an observation.
* A step whose (state, action) pair is in ``success_predicate`` ends the
  episode early and marks it successful.
* Histories alternate o_1, a_1, o_2, ..., o_t and always end in an
  observation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolationError, InconsistentEvidenceError, ResourceLimitError

PROB_ATOL = 1e-9
ENUM_CAP = 2_000_000


def _check_rows(name: str, table: np.ndarray) -> None:
    if table.min() < -1e-12:
        raise ValueError(f"{name} has negative entries (min {table.min()})")
    sums = table.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=PROB_ATOL, rtol=0.0):
        worst = np.abs(sums - 1.0).max()
        raise ValueError(f"{name} rows must sum to 1 (worst deviation {worst:.3g})")


@dataclass(frozen=True)
class PomdpSpec:
    """Complete tabular model of a finite-horizon POMDP.

    transition[s, a] is the distribution over next states; observation_model
    [s', a] is the distribution over observations emitted on arriving in s'
    after action a, with column ``num_actions`` reserved for the initial
    (null-action) observation.
    """

    num_states: int
    num_actions: int
    num_observations: int
    horizon: int
    initial_dist: np.ndarray            # (S,)
    transition: np.ndarray              # (S, A, S)
    observation_model: np.ndarray       # (S, A + 1, O)
    reward: np.ndarray                  # (S, A)
    success_predicate: frozenset = field(default_factory=frozenset)
    name: str = "pomdp"

    def __post_init__(self):
        S, A, O = self.num_states, self.num_actions, self.num_observations
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        arrays = {
            "initial_dist": (np.asarray(self.initial_dist, dtype=float), (S,)),
            "transition": (np.asarray(self.transition, dtype=float), (S, A, S)),
            "observation_model": (np.asarray(self.observation_model, dtype=float), (S, A + 1, O)),
            "reward": (np.asarray(self.reward, dtype=float), (S, A)),
        }
        for key, (arr, shape) in arrays.items():
            if arr.shape != shape:
                raise ValueError(f"{key} must have shape {shape}, got {arr.shape}")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        _check_rows("initial_dist", self.initial_dist)
        _check_rows("transition", self.transition)
        _check_rows("observation_model", self.observation_model)
        pairs = frozenset((int(s), int(a)) for s, a in self.success_predicate)
        for s, a in pairs:
            if not (0 <= s < S and 0 <= a < A):
                raise ValueError(f"success_predicate entry ({s}, {a}) out of range")
        object.__setattr__(self, "success_predicate", pairs)

    @property
    def null_action(self) -> int:
        return self.num_actions

    def is_success(self, state: int, action: int) -> bool:
        return (state, action) in self.success_predicate

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "num_observations": self.num_observations,
            "horizon": self.horizon,
            "initial_dist": self.initial_dist.tolist(),
            "transition": self.transition.tolist(),
            "observation_model": self.observation_model.tolist(),
            "reward": self.reward.tolist(),
            "success_predicate": sorted([s, a] for s, a in self.success_predicate),
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PomdpSpec":
        return cls(
            num_states=payload["num_states"],
            num_actions=payload["num_actions"],
            num_observations=payload["num_observations"],
            horizon=payload["horizon"],
            initial_dist=np.array(payload["initial_dist"], dtype=float),
            transition=np.array(payload["transition"], dtype=float),
            observation_model=np.array(payload["observation_model"], dtype=float),
            reward=np.array(payload["reward"], dtype=float),
            success_predicate=frozenset(tuple(p) for p in payload["success_predicate"]),
            name=payload.get("name", "pomdp"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PomdpSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class HistoryKey:
    """Alternating observation/action sequence o_1, a_1, ..., o_t."""

    entries: tuple

    def __post_init__(self):
        entries = tuple(int(e) for e in self.entries)
        if len(entries) % 2 == 0 or not entries:
            raise ValueError("history must have odd length (ends in an observation)")
        object.__setattr__(self, "entries", entries)

    @property
    def t(self) -> int:
        """Timestep: number of observations seen so far."""
        return (len(self.entries) + 1) // 2

    @property
    def observations(self) -> tuple:
        return self.entries[0::2]

    @property
    def actions(self) -> tuple:
        return self.entries[1::2]

    @property
    def last_observation(self) -> int:
        return self.entries[-1]

    def extend(self, action: int, observation: int) -> "HistoryKey":
        return HistoryKey(self.entries + (int(action), int(observation)))

    def truncate(self, window: int) -> "HistoryKey":
        """Suffix covering the last ``window`` observations (and the actions
        between them). A window >= t returns the history unchanged."""
        if window < 1:
            raise ValueError("truncation window must be >= 1")
        keep = 2 * window - 1
        if keep >= len(self.entries):
            return self
        return HistoryKey(self.entries[-keep:])

    def is_prefix_of(self, other: "HistoryKey") -> bool:
        return other.entries[: len(self.entries)] == self.entries

    def to_list(self) -> list:
        return list(self.entries)

    @classmethod
    def initial(cls, observation: int) -> "HistoryKey":
        return cls((int(observation),))


@dataclass(frozen=True)
class Belief:
    """Exact posterior over hidden states given a history."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float).copy()
        if probs.min() < -1e-12:
            raise ValueError("belief has negative mass")
        if abs(probs.sum() - 1.0) > PROB_ATOL:
            raise ValueError(f"belief must sum to 1, got {probs.sum()!r}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True)
class RolloutStep:
    history: HistoryKey
    state: int
    action: int
    reward: float


@dataclass(frozen=True)
class PrivilegedRollout:
    """One episode: per-step (history, privileged state, action, reward)."""

    steps: tuple
    total_reward: float
    succeeded: bool

    def __post_init__(self):
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        if abs(self.total_reward - sum(s.reward for s in steps)) > 1e-12:
            raise ValueError("total_reward inconsistent with step rewards")
        for prev, nxt in zip(steps, steps[1:]):
            if not prev.history.is_prefix_of(nxt.history):
                raise ValueError("step histories are not nested prefixes")

    def __len__(self) -> int:
        return len(self.steps)


PolicyFn = Callable[[HistoryKey], np.ndarray]


def _sample(rng: np.random.Generator, probs: np.ndarray) -> int:
    # guard tiny float drift; the distribution was already validated
    p = np.clip(probs, 0.0, None)
    return int(rng.choice(len(p), p=p / p.sum()))


def _validated_dist(policy: PolicyFn, history: HistoryKey, num_actions: int,
                    state: int | None = None) -> np.ndarray:
    if state is not None and getattr(policy, "uses_privileged_state", False):
        dist = policy(history, state)
    else:
        dist = policy(history)
    dist = np.asarray(dist, dtype=float)
    if (dist.shape != (num_actions,) or not np.all(np.isfinite(dist))
            or dist.min() < -1e-12 or abs(dist.sum() - 1.0) > PROB_ATOL):
        raise ContractViolationError(
            f"policy returned a malformed action distribution at {history}: {dist!r}")
    return dist


def step(spec: PomdpSpec, state: int, action: int,
         rng: np.random.Generator) -> tuple[int, int, float]:
    """Sample one environment transition: (next_state, observation, reward)."""
    if not (0 <= state < spec.num_states):
        raise ValueError(f"state index {state} out of range")
    if not (0 <= action < spec.num_actions):
        raise ValueError(f"action index {action} out of range")
    next_state = _sample(rng, spec.transition[state, action])
    observation = _sample(rng, spec.observation_model[next_state, action])
    return next_state, observation, float(spec.reward[state, action])


def rollout(spec: PomdpSpec, policy: PolicyFn, rng: np.random.Generator) -> PrivilegedRollout:
    """Roll the policy out for one episode, recording privileged state.

    Runs exactly ``spec.horizon`` steps unless a success pair ends the
    episode early.
    """
    state = _sample(rng, spec.initial_dist)
    observation = _sample(rng, spec.observation_model[state, spec.null_action])
    history = HistoryKey.initial(observation)
    steps = []
    succeeded = False
    for _ in range(spec.horizon):
        dist = _validated_dist(policy, history, spec.num_actions, state)
        action = _sample(rng, dist)
        reward = float(spec.reward[state, action])
        steps.append(RolloutStep(history, state, action, reward))
        if spec.is_success(state, action):
            succeeded = True
            break
        state, observation, _ = step(spec, state, action, rng)
        history = history.extend(action, observation)
    total = float(sum(s.reward for s in steps))
    return PrivilegedRollout(tuple(steps), total, succeeded)


def initial_belief(spec: PomdpSpec, observation: int) -> Belief:
    """Posterior over s_1 after seeing the null-action observation o_1."""
    weights = spec.initial_dist * spec.observation_model[:, spec.null_action, observation]
    total = weights.sum()
    if total <= 0.0:
        raise InconsistentEvidenceError(
            f"initial observation {observation} has zero probability")
    return Belief(weights / total)


def belief_update(spec: PomdpSpec, belief: Belief, action: int, observation: int) -> Belief:
    """One Bayes filter step: condition on taking ``action`` and seeing
    ``observation``."""
    predicted = belief.probs @ spec.transition[:, action, :]
    weights = predicted * spec.observation_model[:, action, observation]
    total = weights.sum()
    if total <= 0.0:
        raise InconsistentEvidenceError(
            f"observation {observation} after action {action} has zero probability")
    return Belief(weights / total)


def history_belief(spec: PomdpSpec, history: HistoryKey) -> Belief:
    """Exact posterior P(s_t | h_t) obtained by filtering along the history."""
    belief = initial_belief(spec, history.entries[0])
    for i in range(1, len(history.entries), 2):
        belief = belief_update(spec, belief, history.entries[i], history.entries[i + 1])
    return belief


def enumerate_histories(spec: PomdpSpec, t: int, policy: PolicyFn | None = None,
                        cap: int = ENUM_CAP):
    """All syntactically valid histories of length t.

    With a policy, each history is paired with its occupancy probability
    P(h_t = h, episode still running). On specs without early termination
    these sum to 1 per t.
    """
    if not (1 <= t <= spec.horizon):
        raise ValueError(f"t must be in [1, horizon], got {t}")
    count = spec.num_observations ** t * spec.num_actions ** (t - 1)
    if count > cap:
        raise ResourceLimitError(
            f"{count} histories of length {t} exceed cap {cap}")
    histories = [HistoryKey((o,)) for o in range(spec.num_observations)]
    for _ in range(t - 1):
        histories = [h.extend(a, o)
                     for h in histories
                     for a in range(spec.num_actions)
                     for o in range(spec.num_observations)]
    if policy is None:
        return histories
    layer = joint_occupancy(spec, policy, t, cap=cap)
    return [(h, float(layer[h].sum()) if h in layer else 0.0) for h in histories]


def joint_occupancy(spec: PomdpSpec, policy: PolicyFn, t: int,
                    cap: int = ENUM_CAP) -> dict:
    """Occupancy measure at step t: history -> vector of P(h_t, s_t, alive).

    Mass that hit a success pair before t has left the system, so the values
    sum to the probability the episode is still running.
    """
    layer = {}
    for s in range(spec.num_states):
        for o in range(spec.num_observations):
            w = spec.initial_dist[s] * spec.observation_model[s, spec.null_action, o]
            if w > 0.0:
                key = HistoryKey((o,))
                vec = layer.setdefault(key, np.zeros(spec.num_states))
                vec[s] += w
    for _ in range(t - 1):
        nxt: dict = {}
        for h, w in layer.items():
            dist = _validated_dist(policy, h, spec.num_actions)
            for a in range(spec.num_actions):
                if dist[a] == 0.0:
                    continue
                alive = w * dist[a]
                if spec.success_predicate:
                    alive = alive.copy()
                    for s in range(spec.num_states):
                        if spec.is_success(s, a):
                            alive[s] = 0.0
                mass = alive @ spec.transition[:, a, :]
                emit = mass[:, None] * spec.observation_model[:, a, :]
                for o in range(spec.num_observations):
                    if emit[:, o].any():
                        key = h.extend(a, o)
                        vec = nxt.setdefault(key, np.zeros(spec.num_states))
                        vec += emit[:, o]
        layer = nxt
        if len(layer) * spec.num_states > cap:
            raise ResourceLimitError("occupancy layer exceeds cap")
    return layer


def build_tiger(accuracy: float = 0.85, listen_cost: float = -1.0,
                correct_reward: float = 10.0, wrong_penalty: float = -100.0,
                horizon: int = 3) -> PomdpSpec:
    """Classic two-door listening problem.

    States: 0 = danger-left, 1 = danger-right. Actions: 0 = listen,
    1 = open-left, 2 = open-right. Observations: 0 = hear-left,
    1 = hear-right, 2 = start (uninformative). Opening either door resets
    the hidden state from the prior; episodes always run the full horizon.
    """
    if not (0.5 <= accuracy <= 1.0):
        raise ValueError("accuracy must be in [0.5, 1]")
    S, A, O = 2, 3, 3
    initial = np.array([0.5, 0.5])
    transition = np.zeros((S, A, S))
    transition[:, 0, :] = np.eye(S)          # listen keeps the state
    transition[:, 1, :] = initial             # opens reset from the prior
    transition[:, 2, :] = initial
    obs = np.zeros((S, A + 1, O))
    obs[0, 0] = (accuracy, 1.0 - accuracy, 0.0)
    obs[1, 0] = (1.0 - accuracy, accuracy, 0.0)
    obs[:, 1] = (0.0, 0.0, 1.0)               # after an open: start observation
    obs[:, 2] = (0.0, 0.0, 1.0)
    obs[:, 3] = (0.0, 0.0, 1.0)               # null action at t = 1
    reward = np.array([
        [listen_cost, wrong_penalty, correct_reward],
        [listen_cost, correct_reward, wrong_penalty],
    ])
    return PomdpSpec(S, A, O, horizon, initial, transition, obs, reward,
                     frozenset(), "tiger")


def build_hidden_object_world(num_locations: int, prior_weights: Sequence[float],
                              horizon: int, move_cost: float = -1.0,
                              deliver_reward: float = 20.0,
                              observation_accuracy: float = 1.0,
                              fragile: bool = False,
                              deliver_location: int | None = None) -> PomdpSpec:
    """Search task: an object sits at a hidden location drawn from a skewed
    prior; the agent inspects locations, must pick the object up and deliver.

    State encodes (object location, agent location, carrying flag) plus one
    absorbing post-delivery state. Actions: goto 0..L-1, pick, deliver.
    The observation (present/absent) reveals the object only at the agent's
    current location; with ``observation_accuracy`` below 1 the reading flips
    with the complementary probability. Delivering while carrying succeeds,
    pays ``deliver_reward`` and ends the episode; every other action pays
    ``move_cost`` (pass a negative value). With ``fragile`` set, picking at a
    location that does not hold the object spoils the task (the episode is
    absorbed without reward).
    """
    L = int(num_locations)
    if L < 2:
        raise ValueError("need at least 2 locations")
    if not (0.5 < observation_accuracy <= 1.0):
        raise ValueError("observation_accuracy must be in (0.5, 1]")
    prior = np.asarray(prior_weights, dtype=float)
    if prior.shape != (L,) or prior.min() < 0 or prior.sum() <= 0:
        raise ValueError("prior_weights must be a nonnegative vector of length num_locations")
    prior = prior / prior.sum()

    S = L * L * 2 + 1
    done = S - 1
    A = L + 2
    pick, deliver = L, L + 1
    O = 2  # 0 = absent, 1 = present

    def sid(obj: int, agent: int, carry: int) -> int:
        return (obj * L + agent) * 2 + carry

    initial = np.zeros(S)
    for obj in range(L):
        initial[sid(obj, 0, 0)] = prior[obj]

    transition = np.zeros((S, A, S))
    reward = np.full((S, A), move_cost)
    success = set()
    for obj in range(L):
        for agent in range(L):
            for carry in (0, 1):
                s = sid(obj, agent, carry)
                for loc in range(L):
                    transition[s, loc, sid(obj, loc, carry)] = 1.0
                if carry == 0 and agent == obj:
                    transition[s, pick, sid(obj, agent, 1)] = 1.0
                elif fragile and carry == 0:
                    transition[s, pick, done] = 1.0
                else:
                    transition[s, pick, s] = 1.0
                if carry == 1:
                    transition[s, deliver, done] = 1.0
                    reward[s, deliver] = deliver_reward
                    success.add((s, deliver))
                else:
                    transition[s, deliver, s] = 1.0
    transition[done, :, done] = 1.0
    reward[done, :] = 0.0

    acc = observation_accuracy
    obs = np.zeros((S, A + 1, O))
    obs[:, :, 0] = acc
    obs[:, :, 1] = 1.0 - acc
    for obj in range(L):
        s = sid(obj, obj, 0)  # at the object, not carrying: it is visible
        obs[s, :, 0] = 1.0 - acc
        obs[s, :, 1] = acc
    obs[done, :, 0] = 1.0
    obs[done, :, 1] = 0.0

    return PomdpSpec(S, A, O, horizon, initial, transition, obs, reward,
                     frozenset(success), f"hidden_object_{L}")


def make_fully_observed(spec: PomdpSpec, name: str | None = None) -> PomdpSpec:
    """Variant whose observation reveals the state exactly (o_t = s_t)."""
    S = spec.num_states
    obs = np.zeros((S, spec.num_actions + 1, S))
    obs[np.arange(S), :, np.arange(S)] = 1.0
    return PomdpSpec(S, spec.num_actions, S, spec.horizon, spec.initial_dist,
                     spec.transition, obs, spec.reward, spec.success_predicate,
                     name or f"{spec.name}_full_obs")
