"""Federated tabular Q-learning: QAvg and its robust variant FedRQ.

Each of K agents updates its own Q table against its own environment; every
``sync_interval`` steps the server averages the tables and broadcasts the
mean back. Time is a single global counter: the local step taken at time
``t`` uses ``lambda_t`` and aggregation happens when ``(t + 1) % E == 0``.

Two update modes exist. ``expected`` applies the update at every (s, a) with
the exact expectation over the local kernel, which is the setting the
convergence bound covers. ``sampled`` is ordinary online Q-learning from
simulated transitions with an epsilon-greedy behavior policy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .covering import compute_neighbors
from .envgen import STREAM_TRAINING, EnvFamily, make_rng
from .expectile import DegreeTable, ReplayBuffer, expectile_grad
from .mdp import TabularMDP, robust_targets

log = logging.getLogger(__name__)

ALGORITHMS = ("qavg", "fedrq")
MODES = ("expected", "sampled")
DEGREE_METHODS = ("exact", "expectile")


def lr_schedule(t, gamma: float, sync_interval: int, check: bool = True):
    """Step size ``2 / ((1 - gamma) (t + E))``; vectorized over ``t``."""
    if check:
        if not 0.2 <= gamma < 1.0:
            raise ValueError(f"the theorem step size needs gamma in [0.2, 1), got {gamma}")
        if sync_interval <= 1:
            raise ValueError(f"the theorem step size needs E > 1, got {sync_interval}")
    return 2.0 / ((1.0 - gamma) * (np.asarray(t, dtype=float) + sync_interval))


@dataclass
class FederationConfig:
    sync_interval: int
    total_steps: int
    algorithm: str = "fedrq"
    mode: str = "expected"
    omega: float = 0.0
    lr: str | float = "theorem"
    seed: int = 0
    epsilon: float = 0.1
    horizon: int = 200
    degree: str = "exact"
    tau: float = 0.01
    degree_lr: float = 0.05
    buffer_capacity: int = 1000
    record_every: int = 1
    keep_history: bool = False

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.degree not in DEGREE_METHODS:
            raise ValueError(f"degree must be one of {DEGREE_METHODS}, got {self.degree!r}")
        if int(self.sync_interval) <= 1:
            raise ValueError(f"sync_interval E must exceed 1, got {self.sync_interval}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be nonnegative")
        if not 0.0 <= self.omega < 1.0:
            raise ValueError(f"omega must lie in [0, 1), got {self.omega}")
        if self.lr != "theorem" and not (isinstance(self.lr, (int, float)) and self.lr >= 0):
            raise ValueError(f"lr must be 'theorem' or a nonnegative number, got {self.lr!r}")
        if self.record_every < 1:
            raise ValueError("record_every must be positive")

    @property
    def effective_omega(self) -> float:
        return self.omega if self.algorithm == "fedrq" else 0.0

    def step_size(self, t: int, gamma: float) -> float:
        if self.lr == "theorem":
            return float(lr_schedule(t, gamma, self.sync_interval))
        return float(self.lr)


@dataclass
class AgentState:
    index: int
    q: np.ndarray
    env: TabularMDP
    neighbors: np.ndarray
    rng: np.random.Generator | None = None
    state: int | None = None
    episode_steps: int = 0
    replay: ReplayBuffer | None = None
    degree: DegreeTable | None = None

    @classmethod
    def create(cls, index: int, env: TabularMDP, seed: int = 0, buffer_capacity: int = 1000) -> "AgentState":
        agent = cls(
            index=index,
            q=np.zeros((env.n_states, env.n_actions)),
            env=env,
            neighbors=compute_neighbors(env.kernel),
            rng=make_rng(seed, index, STREAM_TRAINING),
            replay=ReplayBuffer(buffer_capacity),
            degree=DegreeTable(np.zeros(env.n_states)),
        )
        agent.reset_episode()
        return agent

    def reset_episode(self) -> None:
        self.state = int(self.rng.choice(self.env.n_states, p=self.env.initial_dist))
        self.episode_steps = 0


def _is_absorbing(env: TabularMDP, s: int) -> bool:
    return bool(np.all(env.kernel[s, :, s] == 1.0))


def _sampled_update(agent: AgentState, lam: float, omega: float, epsilon: float, horizon: int,
                    degree: str, tau: float, degree_lr: float) -> None:
    env, q, rng = agent.env, agent.q, agent.rng
    s = agent.state
    if rng.random() < epsilon:
        a = int(rng.integers(env.n_actions))
    else:
        a = int(np.argmax(q[s]))
    s_next = int(np.searchsorted(np.cumsum(env.kernel[s, a]), rng.random(), side="right"))
    s_next = min(s_next, env.n_states - 1)
    r = float(env.reward[s, a])
    expected = q[s_next].max()
    if omega == 0.0:
        target = r + env.discount * expected
    else:
        if degree == "exact":
            worst = float(q.max(axis=1)[agent.neighbors[s]].min())
        else:
            worst = float(agent.degree.d[s])
        target = r + env.discount * ((1.0 - omega) * expected + omega * worst)
    q[s, a] = (1.0 - lam) * q[s, a] + lam * target
    agent.replay.add(s, a, r, s_next)
    if degree == "expectile" and omega > 0.0:
        # one SGD step of the degree regression on a replayed pair
        bs, _, _, bs_next = agent.replay.sample(rng)
        y = q[bs_next].max()
        agent.degree.d[bs] -= degree_lr * expectile_grad(y, agent.degree.d[bs], tau)
    agent.episode_steps += 1
    if _is_absorbing(env, s_next) or agent.episode_steps >= horizon:
        agent.reset_episode()
    else:
        agent.state = s_next


def local_step_qavg(agent: AgentState, lam: float, mode: str = "expected",
                    epsilon: float = 0.1, horizon: int = 200) -> AgentState:
    """One local Q-learning step; updates ``agent`` in place and returns it."""
    if mode == "expected":
        env = agent.env
        agent.q = (1.0 - lam) * agent.q + lam * robust_targets(env.kernel, env.reward, agent.q, env.discount, 0.0, None)
    elif mode == "sampled":
        _sampled_update(agent, lam, 0.0, epsilon, horizon, "exact", 0.01, 0.0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return agent


def local_step_fedrq(agent: AgentState, lam: float, omega: float, mode: str = "expected",
                     epsilon: float = 0.1, horizon: int = 200, degree: str = "exact",
                     tau: float = 0.01, degree_lr: float = 0.05) -> AgentState:
    """One robust local step with the worst-neighbor term weighted by ``omega``.

    In sampled mode the worst-neighbor value is either computed exactly over
    the agent's neighbor sets or read from its expectile degree table.
    """
    if not 0.0 <= omega < 1.0:
        raise ValueError(f"omega must lie in [0, 1), got {omega}")
    empty = np.flatnonzero(~agent.neighbors.any(axis=1))
    if empty.size:
        raise ValueError(f"empty neighbor set for states {empty.tolist()}")
    if mode == "expected":
        env = agent.env
        target = robust_targets(env.kernel, env.reward, agent.q, env.discount, omega, agent.neighbors)
        agent.q = (1.0 - lam) * agent.q + lam * target
    elif mode == "sampled":
        _sampled_update(agent, lam, omega, epsilon, horizon, degree, tau, degree_lr)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return agent


def aggregate(q_tables) -> np.ndarray:
    """Entrywise mean of the agents' tables, summed in agent-index order."""
    tables = [np.asarray(q, dtype=float) for q in q_tables]
    if not tables:
        raise ValueError("nothing to aggregate")
    for q in tables[1:]:
        if q.shape != tables[0].shape:
            raise ValueError(f"Q shapes differ: {tables[0].shape} vs {q.shape}")
    if all(np.array_equal(q, tables[0]) for q in tables[1:]):
        return tables[0].copy()
    total = tables[0].copy()
    for q in tables[1:]:
        total += q
    return total / len(tables)


@dataclass
class TrainingTrace:
    """Per-step records of a federated run.

    ``drift_mean`` is the agents' mean sup-distance to the global table taken
    before any aggregation at that step, so it is zero only right after a
    broadcast at the previous step.
    """

    t: np.ndarray
    sup_gap: np.ndarray
    bound: np.ndarray
    drift_mean: np.ndarray
    drift_bound: np.ndarray
    aggregated: np.ndarray
    step_size: np.ndarray
    q_final: np.ndarray
    q_history: np.ndarray | None = None
    agent_q_final: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    oracle_q: np.ndarray | None = None

    def records(self):
        for i in range(self.t.size):
            yield {
                "t": int(self.t[i]),
                "sup_gap": float(self.sup_gap[i]),
                "bound": float(self.bound[i]),
                "drift_mean": float(self.drift_mean[i]),
                "aggregated": bool(self.aggregated[i]),
            }


def _theorem_applicable(gamma: float, sync_interval: int) -> bool:
    return 0.2 <= gamma < 1.0 and sync_interval > 1


class _Recorder:
    def __init__(self, config: FederationConfig, gamma: float, oracle_q):
        n = config.total_steps // config.record_every + config.total_steps // config.sync_interval + 2
        self.config, self.gamma, self.oracle_q = config, gamma, oracle_q
        self.t = np.zeros(n, dtype=np.int64)
        self.gap = np.full(n, np.nan)
        self.drift = np.zeros(n)
        self.agg = np.zeros(n, dtype=bool)
        self.lam = np.zeros(n)
        self.history = [] if config.keep_history else None
        self.i = 0

    def wants(self, t: int, aggregated: bool) -> bool:
        return aggregated or t % self.config.record_every == 0 or t == self.config.total_steps

    def add(self, t: int, q_bar: np.ndarray, drift: float, aggregated: bool) -> None:
        i = self.i
        self.t[i] = t
        if self.oracle_q is not None:
            self.gap[i] = np.max(np.abs(q_bar - self.oracle_q))
        self.drift[i] = drift
        self.agg[i] = aggregated
        self.lam[i] = self.config.step_size(t, self.gamma)
        if self.history is not None:
            self.history.append(q_bar.copy())
        self.i += 1

    def load(self, t, gap, drift, agg, history) -> None:
        n = t.size
        self.t, self.gap, self.drift, self.agg = t, gap, drift, agg
        if self.config.lr == "theorem":
            self.lam = lr_schedule(t, self.gamma, self.config.sync_interval)
        else:
            self.lam = np.full(n, float(self.config.lr))
        self.history = history
        self.i = n

    def finish(self, q_final, agent_q, meta) -> TrainingTrace:
        n, cfg = self.i, self.config
        t = self.t[:n]
        if _theorem_applicable(self.gamma, cfg.sync_interval):
            from .oracle import drift_bound, theorem1_bound

            bound = np.asarray(theorem1_bound(self.gamma, cfg.sync_interval, t), dtype=float)
            dbound = np.asarray(drift_bound(self.gamma, cfg.sync_interval, t), dtype=float)
        else:
            bound = np.full(n, np.nan)
            dbound = np.full(n, np.nan)
        history = np.stack(self.history) if self.history else None
        return TrainingTrace(t, self.gap[:n], bound, self.drift[:n], dbound, self.agg[:n],
                             self.lam[:n], q_final, history, agent_q, meta)


def _drift(q_agents: np.ndarray, q_bar: np.ndarray) -> float:
    return float(np.abs(q_agents - q_bar).max(axis=(1, 2)).mean())


def _run_expected(config: FederationConfig, family: EnvFamily, rec: _Recorder) -> tuple[np.ndarray, np.ndarray]:
    kernels = family.kernels
    reward, gamma = family.reward, family.discount
    omega = config.effective_omega
    masks = np.stack([compute_neighbors(k) for k in kernels]) if omega > 0 else None
    K = family.n_agents
    q = np.zeros((K,) + reward.shape)
    q_bar = np.zeros(reward.shape)
    E = config.sync_interval
    rec.add(0, q_bar, 0.0, False)
    for t in range(config.total_steps):
        lam = config.step_size(t, gamma)
        q = (1.0 - lam) * q + lam * robust_targets(kernels, reward, q, gamma, omega, masks)
        aggregated = (t + 1) % E == 0
        if aggregated or rec.wants(t + 1, False):
            q_bar = aggregate(q)
            drift = _drift(q, q_bar)
            if aggregated:
                q = np.broadcast_to(q_bar, q.shape).copy()
            rec.add(t + 1, q_bar, drift, aggregated)
    return aggregate(q), q


def _run_expected_compiled(config: FederationConfig, family: EnvFamily, rec: _Recorder) -> tuple[np.ndarray, np.ndarray]:
    from ._engine import expected_loop, neighbor_lists

    omega = config.effective_omega
    kernels = np.ascontiguousarray(family.kernels)
    masks = np.stack([compute_neighbors(k) for k in kernels])
    has_oracle = rec.oracle_q is not None
    oracle_q = rec.oracle_q if has_oracle else np.zeros(family.reward.shape)
    theorem = config.lr == "theorem"
    nbr_idx, nbr_cnt = neighbor_lists(masks)
    q, t, gap, drift, agg, hist = expected_loop(
        kernels, np.ascontiguousarray(family.reward), masks, nbr_idx, nbr_cnt, float(family.discount), float(omega),
        omega > 0, int(config.sync_interval), int(config.total_steps), theorem,
        0.0 if theorem else float(config.lr), np.ascontiguousarray(oracle_q), has_oracle,
        int(config.record_every), bool(config.keep_history))
    rec.load(t, gap, drift, agg, list(hist) if config.keep_history else None)
    return aggregate(q), q


def _run_sampled(config: FederationConfig, family: EnvFamily, rec: _Recorder) -> tuple[np.ndarray, np.ndarray]:
    gamma = family.discount
    omega = config.effective_omega
    agents = [AgentState.create(k, env, config.seed, config.buffer_capacity) for k, env in enumerate(family.members)]
    E = config.sync_interval
    q_bar = aggregate([a.q for a in agents])
    rec.add(0, q_bar, 0.0, False)
    for t in range(config.total_steps):
        lam = config.step_size(t, gamma)
        for agent in agents:
            if config.algorithm == "qavg":
                local_step_qavg(agent, lam, "sampled", config.epsilon, config.horizon)
            else:
                local_step_fedrq(agent, lam, omega, "sampled", config.epsilon, config.horizon,
                                 config.degree, config.tau, config.degree_lr)
        aggregated = (t + 1) % E == 0
        if aggregated or rec.wants(t + 1, False):
            stacked = np.stack([a.q for a in agents])
            q_bar = aggregate(stacked)
            drift = _drift(stacked, q_bar)
            if aggregated:
                for agent in agents:
                    agent.q = q_bar.copy()
            rec.add(t + 1, q_bar, drift, aggregated)
    stacked = np.stack([a.q for a in agents])
    return aggregate(stacked), stacked


def run_federation(config: FederationConfig, family: EnvFamily, oracle_q: np.ndarray | None = None,
                   engine: str = "auto") -> TrainingTrace:
    """Run ``config.total_steps`` federated steps and return the trace.

    Deterministic given the config (seed included) and the family.
    ``engine`` picks the expected-mode loop: ``"compiled"`` (numba),
    ``"numpy"``, or ``"auto"`` for compiled when numba is importable.
    """
    from . import _engine

    if engine not in ("auto", "compiled", "numpy"):
        raise ValueError(f"unknown engine {engine!r}")
    if engine == "compiled" and not _engine.AVAILABLE:
        raise RuntimeError("the compiled engine needs numba")
    gamma = family.discount
    if config.lr == "theorem":
        lr_schedule(0, gamma, config.sync_interval)  # validates the theorem range
    if config.algorithm == "fedrq" and config.mode == "expected" and config.omega > 0:
        from .covering import check_assumption1

        ok, bad = check_assumption1(family.kernels)
        if not ok:
            log.warning("agents disagree on neighbor sets of states %s; bound checks do not apply", bad)
    rec = _Recorder(config, gamma, None if oracle_q is None else np.asarray(oracle_q, dtype=float))
    if config.mode == "sampled":
        runner = _run_sampled
    elif engine == "numpy" or not _engine.AVAILABLE:
        runner = _run_expected
    else:
        runner = _run_expected_compiled
    q_final, agent_q = runner(config, family, rec)
    meta = {"algorithm": config.algorithm, "mode": config.mode, "omega": config.effective_omega,
            "sync_interval": config.sync_interval, "total_steps": config.total_steps,
            "n_agents": family.n_agents, "gamma": gamma}
    trace = rec.finish(q_final, agent_q, meta)
    trace.oracle_q = rec.oracle_q
    return trace
