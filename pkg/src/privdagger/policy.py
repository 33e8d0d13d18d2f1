"""Student policies: tabular softmax over (truncated) histories."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .env import HistoryKey


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


@dataclass
class TabularHistoryPolicy:
    """pi(a | h) = softmax of per-key logits, keyed by the last
    ``truncation_window`` observation-action pairs of the history.

    Unseen keys fall back to the uniform distribution. Logit rows are
    created lazily on first update.
    """

    num_actions: int
    truncation_window: int
    logits: dict = field(default_factory=dict)

    uses_privileged_state = False

    def key(self, history: HistoryKey) -> HistoryKey:
        return history.truncate(self.truncation_window)

    def action_distribution(self, history: HistoryKey) -> np.ndarray:
        row = self.logits.get(self.key(history))
        if row is None:
            return np.full(self.num_actions, 1.0 / self.num_actions)
        return softmax(row)

    __call__ = action_distribution

    def log_prob_and_grad(self, history: HistoryKey, action: int):
        """Log pi(action | history) and its gradient w.r.t. the key's logits
        (one-hot minus softmax; zero everywhere else)."""
        row = self.logits.get(self.key(history), np.zeros(self.num_actions))
        probs = softmax(row)
        grad = -probs
        grad[action] += 1.0
        return float(log_softmax(row)[action]), grad

    def ensure_key(self, history: HistoryKey) -> HistoryKey:
        k = self.key(history)
        if k not in self.logits:
            self.logits[k] = np.zeros(self.num_actions)
        return k

    def copy(self) -> "TabularHistoryPolicy":
        return TabularHistoryPolicy(
            self.num_actions, self.truncation_window,
            {k: v.copy() for k, v in self.logits.items()})

    def to_dict(self) -> dict:
        entries = sorted(self.logits.items(), key=lambda kv: kv[0].entries)
        return {
            "num_actions": self.num_actions,
            "truncation_window": self.truncation_window,
            "entries": [{"key": k.to_list(), "logits": v.tolist()} for k, v in entries],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TabularHistoryPolicy":
        policy = cls(payload["num_actions"], payload["truncation_window"])
        for entry in payload["entries"]:
            policy.logits[HistoryKey(tuple(entry["key"]))] = np.array(entry["logits"], dtype=float)
        return policy

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TabularHistoryPolicy":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PolicySnapshot:
    """Deep immutable copy of a policy plus its provenance."""

    policy: TabularHistoryPolicy
    iteration: int
    label: str

    def __post_init__(self):
        frozen = copy.deepcopy(self.policy)
        for row in frozen.logits.values():
            row.setflags(write=False)
        object.__setattr__(self, "policy", frozen)

    def action_distribution(self, history: HistoryKey) -> np.ndarray:
        return self.policy.action_distribution(history)

    __call__ = action_distribution

    uses_privileged_state = False
