"""Finite MDPs, policies, episode simulation and the Cliff Walk benchmark.

States and actions are small integers.  A transition table maps each
``(state, action)`` pair to a tuple of ``(probability, next_state, reward)``
outcomes; terminal states have no entries.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

PROB_TOL = 1e-12

UP, RIGHT, DOWN, LEFT = 0, 1, 2, 3
ACTION_NAMES = ("up", "right", "down", "left")
_MOVES = {UP: (-1, 0), RIGHT: (0, 1), DOWN: (1, 0), LEFT: (0, -1)}

Outcome = tuple[float, int, float]


class Step(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int


@dataclass(frozen=True)
class EpisodeTrace:
    steps: tuple[Step, ...]
    terminated: bool
    truncated: bool

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class MdpModel:
    num_states: int
    num_actions: int
    transitions: Mapping[tuple[int, int], tuple[Outcome, ...]]
    discount: float
    terminal_states: frozenset[int]
    start_state: int
    state_labels: tuple[str, ...] | None = None
    # dense copies of the table for vectorised simulation
    _cum: np.ndarray = field(init=False, repr=False, compare=False)
    _next: np.ndarray = field(init=False, repr=False, compare=False)
    _reward: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_states < 1 or self.num_actions < 1:
            raise ValueError("num_states and num_actions must be positive")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must lie in [0, 1], got {self.discount}")
        object.__setattr__(self, "terminal_states", frozenset(self.terminal_states))
        for s in self.terminal_states:
            self._check_state(s)
        self._check_state(self.start_state)
        if self.start_state in self.terminal_states:
            raise ValueError("start_state must not be terminal")

        width = 1
        for (s, a), outcomes in self.transitions.items():
            self._check_state(s)
            if not 0 <= a < self.num_actions:
                raise ValueError(f"unknown action {a}")
            if s in self.terminal_states:
                raise ValueError(f"terminal state {s} has outgoing transitions")
            probs = [p for p, _, _ in outcomes]
            if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > PROB_TOL:
                raise ValueError(f"probabilities for {(s, a)} do not form a distribution")
            for _, ns, r in outcomes:
                self._check_state(ns)
                if not np.isfinite(r):
                    raise ValueError(f"non-finite reward in {(s, a)}")
            width = max(width, len(outcomes))
        for s in self.nonterminal_states:
            for a in range(self.num_actions):
                if (s, a) not in self.transitions:
                    raise ValueError(f"missing transition for {(s, a)}")

        shape = (self.num_states, self.num_actions, width)
        cum = np.ones(shape)
        nxt = np.zeros(shape, dtype=np.int64)
        rew = np.zeros(shape)
        for (s, a), outcomes in self.transitions.items():
            k = len(outcomes)
            cum[s, a, :k] = np.cumsum([p for p, _, _ in outcomes])
            cum[s, a, k - 1 :] = 1.0
            nxt[s, a, :k] = [ns for _, ns, _ in outcomes]
            nxt[s, a, k:] = outcomes[-1][1]
            rew[s, a, :k] = [r for _, _, r in outcomes]
            rew[s, a, k:] = outcomes[-1][2]
        object.__setattr__(self, "_cum", cum)
        object.__setattr__(self, "_next", nxt)
        object.__setattr__(self, "_reward", rew)

    def _check_state(self, s: int) -> None:
        if not 0 <= s < self.num_states:
            raise ValueError(f"unknown state id {s}")

    @property
    def nonterminal_states(self) -> list[int]:
        return [s for s in range(self.num_states) if s not in self.terminal_states]

    def is_terminal(self, s: int) -> bool:
        return s in self.terminal_states

    def successors(self, s: int, a: int) -> tuple[Outcome, ...]:
        return self.transitions[(s, a)]

    def sample_transition(self, s: int, a: int, u: float) -> tuple[int, float]:
        """Map a uniform draw ``u`` to a successor of ``(s, a)``."""
        i = int(np.searchsorted(self._cum[s, a], u, side="right"))
        i = min(i, self._cum.shape[2] - 1)
        return int(self._next[s, a, i]), float(self._reward[s, a, i])

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "discount": self.discount,
            "start_state": self.start_state,
            "terminal_states": sorted(self.terminal_states),
            "transitions": [
                {"state": s, "action": a, "outcomes": [list(o) for o in outcomes]}
                for (s, a), outcomes in sorted(self.transitions.items())
            ],
            "state_labels": list(self.state_labels) if self.state_labels else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MdpModel":
        transitions = {
            (int(t["state"]), int(t["action"])): tuple(
                (float(p), int(ns), float(r)) for p, ns, r in t["outcomes"]
            )
            for t in doc["transitions"]
        }
        labels = doc.get("state_labels")
        return cls(
            num_states=int(doc["num_states"]),
            num_actions=int(doc["num_actions"]),
            transitions=transitions,
            discount=float(doc["discount"]),
            terminal_states=frozenset(int(s) for s in doc["terminal_states"]),
            start_state=int(doc["start_state"]),
            state_labels=tuple(labels) if labels else None,
        )


@dataclass(frozen=True)
class PolicyTable:
    """Action distribution per non-terminal state."""

    probs: Mapping[int, tuple[float, ...]]
    _cum: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cum = {}
        for s, row in self.probs.items():
            row = tuple(float(p) for p in row)
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > PROB_TOL:
                raise ValueError(f"policy row for state {s} is not a distribution")
            c = np.cumsum(row)
            c[-1] = 1.0
            cum[s] = c
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def deterministic(cls, actions: Mapping[int, int], num_actions: int) -> "PolicyTable":
        rows = {}
        for s, a in actions.items():
            row = [0.0] * num_actions
            row[a] = 1.0
            rows[s] = tuple(row)
        return cls(rows)

    def to_dict(self) -> dict:
        return {"probs": {str(s): list(row) for s, row in sorted(self.probs.items())}}

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyTable":
        return cls({int(s): tuple(row) for s, row in doc["probs"].items()})

    def dense(self, num_states: int, num_actions: int) -> np.ndarray:
        """Cumulative action probabilities, shape (num_states, num_actions)."""
        out = np.ones((num_states, num_actions))
        for s, c in self._cum.items():
            out[s] = c
        return out


def sample_action(policy: PolicyTable, state: int, rng: np.random.Generator) -> int:
    try:
        cum = policy._cum[state]
    except KeyError:
        raise ValueError(f"policy has no action distribution for state {state}") from None
    i = int(np.searchsorted(cum, rng.random(), side="right"))
    return min(i, len(cum) - 1)


def run_episode(
    model: MdpModel,
    policy: PolicyTable,
    rng: np.random.Generator,
    max_steps: int = 10_000,
    start_state: int | None = None,
) -> EpisodeTrace:
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    s = model.start_state if start_state is None else start_state
    steps = []
    terminated = False
    for _ in range(max_steps):
        a = sample_action(policy, s, rng)
        ns, r = model.sample_transition(s, a, rng.random())
        steps.append(Step(s, a, r, ns))
        s = ns
        if model.is_terminal(s):
            terminated = True
            break
    return EpisodeTrace(tuple(steps), terminated, not terminated)


def discounted_return(trace: EpisodeTrace | Sequence[float], discount: float) -> float:
    """Sum of ``discount**k * r_k`` over the rewards, accumulated back to front."""
    rewards = trace.rewards if isinstance(trace, EpisodeTrace) else list(trace)
    if not rewards:
        raise ValueError("empty trace")
    g = 0.0
    for r in reversed(rewards):
        g = r + discount * g
    return g


def chain(rewards: Sequence[float], discount: float = 1.0) -> MdpModel:
    """Deterministic chain 0 -> 1 -> ... -> len(rewards) (terminal), one action."""
    n = len(rewards)
    if n < 1:
        raise ValueError("chain needs at least one reward")
    transitions = {(s, 0): ((1.0, s + 1, float(r)),) for s, r in enumerate(rewards)}
    return MdpModel(n + 1, 1, transitions, discount, frozenset({n}), 0)


def coin_flip(low: float = -1.0, high: float = 1.0, p_high: float = 0.5) -> MdpModel:
    """One step to termination paying ``high`` with probability ``p_high``, else ``low``."""
    outcomes = ((1.0 - p_high, 1, float(low)), (p_high, 1, float(high)))
    return MdpModel(2, 1, {(0, 0): outcomes}, 1.0, frozenset({1}), 0)


def only_action(model: MdpModel, action: int = 0) -> PolicyTable:
    return PolicyTable.deterministic({s: action for s in model.nonterminal_states}, model.num_actions)


# ---------------------------------------------------------------------------
# Cliff Walk


@dataclass(frozen=True)
class CliffWalkConfig:
    width: int = 12
    height: int = 4
    slip_probability: float = 0.05
    step_reward: float = -0.08
    cliff_reward: float = -1.0
    goal_reward: float = 0.0
    discount: float = 1.0

    def __post_init__(self):
        if self.width < 3 or self.height < 2:
            raise ValueError("cliff walk needs width >= 3 and height >= 2")
        if not 0.0 <= self.slip_probability < 1.0:
            raise ValueError("slip_probability must lie in [0, 1)")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")


class CliffWalk(NamedTuple):
    """Grid bookkeeping for a built Cliff Walk model."""

    config: CliffWalkConfig
    model: MdpModel
    cell_of: dict[int, tuple[int, int]]
    state_of: dict[tuple[int, int], int]


def _cliff_layout(config: CliffWalkConfig):
    bottom = config.height - 1
    start = (bottom, 0)
    goal = (bottom, config.width - 1)
    cliff = {(bottom, c) for c in range(1, config.width - 1)}
    return start, goal, cliff


def cliff_walk(config: CliffWalkConfig = CliffWalkConfig()) -> CliffWalk:
    """Build the Cliff Walk grid.

    Row 0 is the top row.  Start is the bottom-left cell, goal the
    bottom-right, and the cells between them on the bottom row form the
    cliff.  Cliff cells are never occupied, so they are not states:
    entering one pays ``cliff_reward`` and moves the agent to the start.
    """
    start, goal, cliff = _cliff_layout(config)
    cells = [
        (r, c)
        for r in range(config.height)
        for c in range(config.width)
        if (r, c) not in cliff
    ]
    state_of = {cell: i for i, cell in enumerate(cells)}

    def inside(r, c):
        return 0 <= r < config.height and 0 <= c < config.width

    def land(cell):
        if cell in cliff:
            return state_of[start], config.cliff_reward
        if cell == goal:
            return state_of[goal], config.step_reward + config.goal_reward
        return state_of[cell], config.step_reward

    transitions = {}
    for (r, c), s in state_of.items():
        if (r, c) == goal:
            continue
        for a, (dr, dc) in _MOVES.items():
            target = (r + dr, c + dc) if inside(r + dr, c + dc) else (r, c)
            weights = {target: 1.0 - config.slip_probability}
            if config.slip_probability > 0:
                tr, tc = target
                near = [
                    (tr + mr, tc + mc)
                    for mr, mc in _MOVES.values()
                    if inside(tr + mr, tc + mc)
                ]
                for cell in near:
                    weights[cell] = weights.get(cell, 0.0) + config.slip_probability / len(near)
            merged: dict[tuple[int, int], float] = {}
            for cell, p in weights.items():
                key = land(cell)
                merged[key] = merged.get(key, 0.0) + p
            transitions[(s, a)] = tuple(
                (p, ns, rew) for (ns, rew), p in sorted(merged.items())
            )

    model = MdpModel(
        num_states=len(cells),
        num_actions=len(_MOVES),
        transitions=transitions,
        discount=config.discount,
        terminal_states=frozenset({state_of[goal]}),
        start_state=state_of[start],
        state_labels=tuple(f"{r},{c}" for r, c in cells),
    )
    return CliffWalk(config, model, dict(enumerate(cells)), state_of)


def build_cliff_walk(config: CliffWalkConfig = CliffWalkConfig()) -> MdpModel:
    return cliff_walk(config).model


def _grid(model: MdpModel) -> tuple[dict[int, tuple[int, int]], int, int]:
    if not model.state_labels:
        raise ValueError("model was not built by build_cliff_walk")
    cells = {s: tuple(int(x) for x in lab.split(",")) for s, lab in enumerate(model.state_labels)}
    height = max(r for r, _ in cells.values()) + 1
    width = max(c for _, c in cells.values()) + 1
    return cells, height, width


def risky_policy(model: MdpModel) -> PolicyTable:
    """Walk the row just above the cliff, then step down into the goal."""
    cells, height, width = _grid(model)
    edge = height - 2
    actions = {}
    for s, (r, c) in cells.items():
        if model.is_terminal(s):
            continue
        if c == width - 1:
            actions[s] = DOWN
        elif r < edge:
            actions[s] = DOWN
        elif r > edge:
            actions[s] = UP
        else:
            actions[s] = RIGHT
    return PolicyTable.deterministic(actions, model.num_actions)


def safe_policy(model: MdpModel) -> PolicyTable:
    """Climb to the top row, cross it, then descend the last column."""
    cells, _, width = _grid(model)
    actions = {}
    for s, (r, c) in cells.items():
        if model.is_terminal(s):
            continue
        if c == width - 1:
            actions[s] = DOWN
        elif r > 0:
            actions[s] = UP
        else:
            actions[s] = RIGHT
    return PolicyTable.deterministic(actions, model.num_actions)


def save_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
