"""Monte-Carlo ground truth for return moments and utilities, and MAPVE."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .mdp import MdpModel, PolicyTable

WARN_TRUNCATION = 0.01
MAX_TRUNCATION = 0.20


class OracleQualityError(RuntimeError):
    pass


class TruncationWarning(UserWarning):
    pass


@dataclass
class OracleEstimate:
    """Per-state Monte-Carlo statistics.

    ``moments[i, k-1]`` is the sample mean of ``G**k`` for rollouts started in
    ``states[i]``; ``utilities[name][i]`` the sample mean of ``f(G)``.
    """

    states: list[int]
    sample_count: np.ndarray
    truncated_fraction: np.ndarray
    seed: int
    rollouts: int
    max_steps: int
    moments: np.ndarray | None = None
    moment_se: np.ndarray | None = None
    utilities: dict[str, np.ndarray] = field(default_factory=dict)
    utility_se: dict[str, np.ndarray] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return 0 if self.moments is None else self.moments.shape[1]

    def index(self, state: int) -> int:
        return self.states.index(state)

    def moment(self, k: int) -> dict[int, float]:
        return {s: float(self.moments[i, k - 1]) for i, s in enumerate(self.states)}

    def utility(self, name: str) -> dict[int, float]:
        return {s: float(v) for s, v in zip(self.states, self.utilities[name])}

    def to_dict(self) -> dict:
        doc = {
            "states": list(self.states),
            "sample_count": self.sample_count.tolist(),
            "truncated_fraction": self.truncated_fraction.tolist(),
            "seed": self.seed,
            "rollouts": self.rollouts,
            "max_steps": self.max_steps,
            "moments": None if self.moments is None else self.moments.tolist(),
            "moment_se": None if self.moment_se is None else self.moment_se.tolist(),
            "utilities": {k: v.tolist() for k, v in sorted(self.utilities.items())},
            "utility_se": {k: v.tolist() for k, v in sorted(self.utility_se.items())},
            "warnings": list(self.warnings),
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "OracleEstimate":
        arr = lambda x: None if x is None else np.asarray(x, dtype=float)
        return cls(
            states=[int(s) for s in doc["states"]],
            sample_count=np.asarray(doc["sample_count"], dtype=np.int64),
            truncated_fraction=np.asarray(doc["truncated_fraction"], dtype=float),
            seed=int(doc["seed"]),
            rollouts=int(doc["rollouts"]),
            max_steps=int(doc["max_steps"]),
            moments=arr(doc.get("moments")),
            moment_se=arr(doc.get("moment_se")),
            utilities={k: arr(v) for k, v in doc.get("utilities", {}).items()},
            utility_se={k: arr(v) for k, v in doc.get("utility_se", {}).items()},
            warnings=list(doc.get("warnings", [])),
        )


def state_rng(seed: int, state: int) -> np.random.Generator:
    """Child stream for one start state; independent of scheduling order."""
    return np.random.default_rng(np.random.SeedSequence([seed, state]))


def rollout_returns(
    model: MdpModel,
    policy: PolicyTable,
    state: int,
    rollouts: int,
    max_steps: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, int]:
    """Simulate ``rollouts`` episodes from ``state`` in lockstep.

    Returns the discounted returns and how many rollouts hit ``max_steps``.
    Truncated rollouts keep their partial sum.
    """
    if rollouts < 1 or max_steps < 1:
        raise ValueError("rollouts and max_steps must be positive")
    pol_cum = policy.dense(model.num_states, model.num_actions)
    terminal = np.zeros(model.num_states, dtype=bool)
    terminal[list(model.terminal_states)] = True
    if terminal[state]:
        raise ValueError(f"cannot start rollouts in terminal state {state}")

    g = np.zeros(rollouts)
    pos = np.full(rollouts, state, dtype=np.int64)
    live = np.arange(rollouts)
    scale = 1.0
    for _ in range(max_steps):
        s = pos[live]
        u = rng.random((2, live.size))
        a = (u[0][:, None] >= pol_cum[s]).sum(axis=1)
        a = np.minimum(a, model.num_actions - 1)
        cum = model._cum[s, a]
        j = (u[1][:, None] >= cum).sum(axis=1)
        j = np.minimum(j, cum.shape[1] - 1)
        ns = model._next[s, a, j]
        g[live] += scale * model._reward[s, a, j]
        pos[live] = ns
        live = live[~terminal[ns]]
        scale *= model.discount
        if live.size == 0:
            break
    return g, int(live.size)


def _check_truncation(frac: np.ndarray, states: Sequence[int], notes: list[str]) -> None:
    worst = float(frac.max()) if frac.size else 0.0
    if worst > MAX_TRUNCATION:
        s = states[int(frac.argmax())]
        raise OracleQualityError(
            f"{worst:.1%} of rollouts from state {s} hit max_steps; estimates untrustworthy"
        )
    if worst > WARN_TRUNCATION:
        msg = f"up to {worst:.1%} of rollouts were truncated at max_steps"
        notes.append(msg)
        warnings.warn(msg, TruncationWarning, stacklevel=3)


def _sem(x: np.ndarray) -> float:
    if x.size < 2:
        return 0.0
    return float(np.std(x, ddof=1) / math.sqrt(x.size))


def run_oracle(
    model: MdpModel,
    policy: PolicyTable,
    n: int = 0,
    functions: Mapping[str, Callable[[np.ndarray], np.ndarray]] | None = None,
    rollouts: int = 100_000,
    max_steps: int = 10_000,
    seed: int = 0,
    states: Sequence[int] | None = None,
) -> OracleEstimate:
    """Moments 1..n and sample means of each ``functions[name](G)``, per state.

    Every start state draws from its own stream derived from ``(seed, state)``.
    """
    states = list(model.nonterminal_states if states is None else states)
    functions = dict(functions or {})
    m = len(states)
    moments = np.zeros((m, n))
    moment_se = np.zeros((m, n))
    utils = {name: np.zeros(m) for name in functions}
    utils_se = {name: np.zeros(m) for name in functions}
    frac = np.zeros(m)
    for i, s in enumerate(states):
        g, cut = rollout_returns(model, policy, s, rollouts, max_steps, state_rng(seed, s))
        frac[i] = cut / rollouts
        for k in range(1, n + 1):
            gk = g**k
            moments[i, k - 1] = gk.mean()
            moment_se[i, k - 1] = _sem(gk)
        for name, f in functions.items():
            fg = np.asarray(f(g), dtype=float)
            utils[name][i] = fg.mean()
            utils_se[name][i] = _sem(fg)
    notes: list[str] = []
    _check_truncation(frac, states, notes)
    return OracleEstimate(
        states=states,
        sample_count=np.full(m, rollouts, dtype=np.int64),
        truncated_fraction=frac,
        seed=seed,
        rollouts=rollouts,
        max_steps=max_steps,
        moments=moments if n else None,
        moment_se=moment_se if n else None,
        utilities=utils,
        utility_se=utils_se,
        warnings=notes,
    )


def oracle_moments(model, policy, n, rollouts_per_state=100_000, max_steps=10_000, seed=0, states=None):
    if n < 1:
        raise ValueError("n must be >= 1")
    return run_oracle(model, policy, n=n, rollouts=rollouts_per_state, max_steps=max_steps, seed=seed, states=states)


def oracle_utility(model, policy, f, rollouts=100_000, max_steps=10_000, seed=0, states=None):
    """Sample mean of ``f(G)`` per start state.

    ``f`` is anything with a ``name`` and a vectorisable ``evaluate``.
    """
    return run_oracle(
        model, policy, functions={f.name: f.evaluate}, rollouts=rollouts, max_steps=max_steps, seed=seed, states=states
    )


@dataclass(frozen=True)
class MapveResult:
    value: float
    included: list[int]
    excluded: list[int]

    def __float__(self) -> float:
        return self.value


def mapve(
    estimates: Mapping[int, float],
    truths: Mapping[int, float],
    states: Sequence[int] | None = None,
    zero_tol: float = 1e-9,
) -> MapveResult:
    """Mean absolute percentage value error over ``states``.

    States whose true value is within ``zero_tol`` of zero have no defined
    relative error; they are left out and listed in ``excluded``.
    """
    states = list(truths if states is None else states)
    included, excluded = [], []
    total = 0.0
    for s in states:
        v = truths[s]
        if not math.isfinite(v):
            raise ValueError(f"true value for state {s} is not finite")
        if abs(v) < zero_tol:
            excluded.append(s)
            continue
        included.append(s)
        total += abs(estimates[s] - v) / abs(v)
    if not included:
        raise ValueError("MAPVE undefined: every state has a zero true value")
    return MapveResult(total / len(included), included, excluded)
