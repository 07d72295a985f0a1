"""Online estimation of the first n moments of the return with TD(lambda).

Moment ``k`` is learned as an ordinary linear value function whose
pseudo-reward is the binomial expansion of ``(r + gamma * G')**k`` with the
unknown powers of the next return replaced by the current lower-moment
estimates at the next state.  Its bootstrap discount is ``gamma**k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .mdp import MdpModel, PolicyTable, run_episode

MAX_BINOMIAL_N = 64
DIVERGENCE_LIMIT = 1e12


class DivergenceError(ArithmeticError):
    """A TD error became non-finite or exceeded the divergence limit."""

    def __init__(self, moment: int, delta: float):
        super().__init__(f"TD error for moment {moment} diverged (delta={delta!r})")
        self.moment = moment
        self.delta = delta


def binomial(n: int, k: int) -> int:
    if n < 0 or k < 0 or k > n:
        raise ValueError(f"binomial({n}, {k}) needs 0 <= k <= n")
    if n > MAX_BINOMIAL_N:
        raise OverflowError(f"binomial coefficients are limited to n <= {MAX_BINOMIAL_N}")
    return math.comb(n, k)


def surrogate_reward(k: int, reward: float, discount: float, next_values: Sequence[float]) -> float:
    """Pseudo-reward for moment ``k``.

    ``next_values[l]`` is the estimate of moment ``l`` at the next state;
    ``next_values[0]`` stands for the zeroth power and is 1 in normal use.
    """
    if k < 1 or len(next_values) != k:
        raise ValueError(f"moment {k} needs exactly {k} lower-moment values")
    total = 0.0
    for l in range(k):
        total += binomial(k, l) * discount**l * reward ** (k - l) * next_values[l]
    return total


def central_from_raw(raw: Sequence[float], up_to: int | None = None) -> list[float]:
    """Central moments c_0..c_N from raw moments v_0..v_N (v_0 = 1)."""
    up_to = len(raw) - 1 if up_to is None else up_to
    mean = raw[1] if len(raw) > 1 else 0.0
    out = []
    for m in range(up_to + 1):
        c = 0.0
        for k in range(m + 1):
            c += binomial(m, k) * (-1) ** (m - k) * raw[k] * mean ** (m - k)
        out.append(c)
    if up_to >= 1:
        # the k=0 and k=1 terms cancel algebraically
        out[1] = 0.0
    return out


class FeatureMap:
    """Linear features given as a (num_states, d) matrix.

    Rows for terminal states are forced to zero so every learned moment is
    zero there.
    """

    def __init__(self, matrix, terminal_states: Iterable[int] = ()):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[1] < 1:
            raise ValueError("feature matrix must be 2-D with at least one column")
        for s in terminal_states:
            matrix[s] = 0.0
        matrix.setflags(write=False)
        self.matrix = matrix
        self.terminal_states = frozenset(terminal_states)
        # column of the single unit entry per row (-1 for a zero row), or None
        self.active = None
        nonzero = matrix != 0
        if np.all(nonzero.sum(axis=1) <= 1) and np.all(matrix[nonzero] == 1.0):
            self.active = np.where(nonzero.any(axis=1), nonzero.argmax(axis=1), -1)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[1]

    def __call__(self, state: int) -> np.ndarray:
        return self.matrix[state]

    @classmethod
    def tabular(cls, model: MdpModel) -> "FeatureMap":
        return cls(np.eye(model.num_states), model.terminal_states)


class TransitionSample(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int
    next_is_terminal: bool


def default_step_sizes(n: int, base: float = 0.1) -> list[float]:
    return [base / k for k in range(1, n + 1)]


@dataclass
class MomentEstimator:
    n: int
    features: FeatureMap
    discount: float
    step_sizes: list[float] | None = None
    trace_decays: list[float] | None = None
    literal_trace: bool = False
    weights: np.ndarray = field(init=False)
    traces: np.ndarray = field(init=False)
    # multiplier on every step size, driven by the evaluation loop's schedule
    scale: float = field(default=1.0, init=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one moment")
        if self.step_sizes is None:
            self.step_sizes = default_step_sizes(self.n)
        if self.trace_decays is None:
            self.trace_decays = [0.0] * self.n
        self.step_sizes = [float(a) for a in self.step_sizes]
        self.trace_decays = [float(x) for x in self.trace_decays]
        if len(self.step_sizes) != self.n or len(self.trace_decays) != self.n:
            raise ValueError("need one step size and one trace decay per moment")
        if not all(0.0 < a < 1.0 for a in self.step_sizes):
            raise ValueError("step sizes must lie in (0, 1)")
        if not all(0.0 <= x <= 1.0 for x in self.trace_decays):
            raise ValueError("trace decays must lie in [0, 1]")
        d = self.features.dimension
        # row k-1 holds moment k
        self.weights = np.zeros((self.n, d))
        self.traces = np.zeros((self.n, d))
        self._coef = [
            [binomial(k, l) * self.discount**l for l in range(k)] for k in range(self.n + 1)
        ]
        self._gk = np.array([self.discount**k for k in range(1, self.n + 1)])
        self._lam = np.array(self.trace_decays)
        self._alpha = np.array(self.step_sizes)

    def _surrogate_rewards(self, r: float, next_vals: Sequence[float]) -> list[float]:
        # same arithmetic as surrogate_reward, with the coefficients cached
        out = []
        for k in range(1, self.n + 1):
            total = 0.0
            for l, c in enumerate(self._coef[k]):
                total += c * r ** (k - l) * next_vals[l]
            out.append(total)
        return out

    @property
    def dimension(self) -> int:
        return self.features.dimension

    def reset_traces(self) -> None:
        self.traces[:] = 0.0

    def value_of(self, k: int, state: int) -> float:
        if not 0 <= k <= self.n:
            raise ValueError(f"moment index {k} outside 0..{self.n}")
        if k == 0:
            return 0.0 if state in self.features.terminal_states else 1.0
        return float(self.weights[k - 1] @ self.features(state))

    def values(self, state: int) -> list[float]:
        """[v_0(s), v_1(s), ..., v_n(s)]"""
        return [self.value_of(k, state) for k in range(self.n + 1)]

    def central_moments(self, state: int, up_to: int | None = None) -> list[float]:
        """[c_1(s), ..., c_up_to(s)]"""
        up_to = self.n if up_to is None else up_to
        if not 1 <= up_to <= self.n:
            raise ValueError(f"up_to must lie in 1..{self.n}")
        return central_from_raw(self.values(state)[: up_to + 1])[1:]

    def td_step(self, t: TransitionSample) -> list[float]:
        """Apply one transition to every moment, highest first.

        Returns the TD errors ordered by moment index (delta_1 first).
        """
        if t.state in self.features.terminal_states:
            raise ValueError(f"cannot update from terminal state {t.state}")
        if self.features.active is not None:
            return self._td_step_one_hot(t)
        x = self.features(t.state)
        # zeroth power of the next return is 1 even after termination (G' = 0),
        # otherwise the final reward would vanish from every target
        if t.next_is_terminal:
            next_vals = [1.0] + [0.0] * self.n
        else:
            x_next = self.features(t.next_state)
            next_vals = [1.0] + [float(w @ x_next) for w in self.weights]
        rewards = self._surrogate_rewards(t.reward, next_vals)
        deltas = [0.0] * self.n
        for k in range(self.n, 0, -1):
            w, z = self.weights[k - 1], self.traces[k - 1]
            gk = self._gk[k - 1]
            decay = gk * self.trace_decays[k - 1]
            if self.literal_trace:
                z[:] = decay + x
            else:
                z *= decay
                z += x
            delta = rewards[k - 1] + gk * next_vals[k] - float(w @ x)
            if not abs(delta) <= DIVERGENCE_LIMIT:
                raise DivergenceError(k, delta)
            w += (self.scale * self.step_sizes[k - 1] * delta) * z
            deltas[k - 1] = delta
        return deltas

    def _td_step_one_hot(self, t: TransitionSample) -> list[float]:
        # one-hot features: dot products are lookups, so all moments update
        # at once with the same elementwise arithmetic as the general loop
        i = self.features.active[t.state]
        j = self.features.active[t.next_state]
        W, Z = self.weights, self.traces
        if t.next_is_terminal or j < 0:
            next_vals = [1.0] + [0.0] * self.n
        else:
            next_vals = [1.0] + W[:, j].tolist()
        rewards = np.array(self._surrogate_rewards(t.reward, next_vals))
        decay = self._gk * self._lam
        if self.literal_trace:
            Z[:] = decay[:, None]
        else:
            Z *= decay[:, None]
        if i >= 0:
            Z[:, i] += 1.0
            current = W[:, i]
        else:
            current = np.zeros(self.n)
        deltas = rewards + self._gk * np.array(next_vals[1:]) - current
        bad = ~(np.abs(deltas) <= DIVERGENCE_LIMIT)
        if bad.any():
            k = int(np.flatnonzero(bad)[-1]) + 1
            raise DivergenceError(k, float(deltas[k - 1]))
        W += ((self.scale * self._alpha) * deltas)[:, None] * Z
        return deltas.tolist()

    def snapshot(self) -> np.ndarray:
        w = self.weights.copy()
        w.setflags(write=False)
        return w

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "dimension": self.dimension,
            "discount": self.discount,
            "step_sizes": list(self.step_sizes),
            "trace_decays": list(self.trace_decays),
            "literal_trace": self.literal_trace,
            "weights": self.weights.tolist(),
        }


def values_from_weights(weights: np.ndarray, features: FeatureMap, states: Sequence[int]) -> np.ndarray:
    """Moment estimates, shape (len(states), n), from a weight snapshot."""
    return features.matrix[list(states)] @ weights.T


@dataclass
class LearningLog:
    snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)
    episode_lengths: list[int] = field(default_factory=list)
    truncated_episodes: int = 0

    def rows(self, features: FeatureMap, states: Sequence[int]):
        """(episode, moment_index, state_id, value) rows, snapshot by snapshot."""
        for episode, w in self.snapshots:
            vals = values_from_weights(w, features, states)
            for k in range(w.shape[0]):
                for i, s in enumerate(states):
                    yield episode, k + 1, s, float(vals[i, k])


StartFn = Callable[[np.random.Generator], int]


def uniform_start(model: MdpModel) -> StartFn:
    states = np.array(model.nonterminal_states)
    return lambda rng: int(states[rng.integers(len(states))])


def run_policy_evaluation(
    model: MdpModel,
    policy: PolicyTable,
    est: MomentEstimator,
    episodes: int,
    rng: np.random.Generator,
    max_steps: int = 10_000,
    snapshot_every: int = 100,
    start: StartFn | None = None,
    step_decay: float | None = None,
) -> LearningLog:
    """Evaluate ``policy`` for a number of episodes, snapshotting weights.

    ``start`` draws each episode's initial state (default: the model's start
    state).  With ``step_decay = tau`` every step size is multiplied by
    ``tau / (tau + episode)``.
    """
    if est.discount != model.discount:
        raise ValueError("estimator and model discount differ")
    if episodes < 0 or snapshot_every < 1:
        raise ValueError("episodes must be >= 0 and snapshot_every >= 1")
    log = LearningLog()
    log.snapshots.append((0, est.snapshot()))
    terminal = model.terminal_states
    for ep in range(episodes):
        if step_decay is not None:
            est.scale = step_decay / (step_decay + ep)
        s0 = model.start_state if start is None else start(rng)
        trace = run_episode(model, policy, rng, max_steps, start_state=s0)
        est.reset_traces()
        for st in trace.steps:
            est.td_step(TransitionSample(st.state, st.action, st.reward, st.next_state, st.next_state in terminal))
        log.episode_lengths.append(len(trace))
        log.truncated_episodes += trace.truncated
        if (ep + 1) % snapshot_every == 0 or ep + 1 == episodes:
            log.snapshots.append((ep + 1, est.snapshot()))
    return log
