"""Single-user multichannel access over correlated two-state channels.

One channel is sensed per slot; the reward is 1 when it was idle.  Policies:
a budgeted GP Q-learner, a neural Q baseline, the closed-form index policy
with genie parameters, the genie belief-myopic policy, and uniform random.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import gpq as gpq_mod
from . import rfenv
from .gpq import GpQModel, gp_predict_mean_many, gp_update, make_gp
from .qnet import QNet, ReplayBuffer, td_step

__all__ = [
    "OBS_IDLE",
    "OBS_OCCUPIED",
    "OBS_NONE",
    "HistoryState",
    "EpisodeTrace",
    "env_step",
    "encode_history",
    "belief_update",
    "whittle_index",
    "whittle_act",
    "optimal_act",
    "gprl_act",
    "gprl_train",
    "nnq_act",
    "nnq_train",
    "evaluate_policy",
    "eval_accuracy",
    "save_episode_csv",
]

log = logging.getLogger("sir.access")

# observation codes: what the encoder multiplies the action one-hot by
OBS_IDLE = 1
OBS_OCCUPIED = -1
OBS_NONE = 0


@dataclass(frozen=True)
class HistoryState:
    """Window of the last M (action, observation-code) pairs, oldest first."""

    n_channels: int
    slots: tuple[tuple[int, int], ...]

    @staticmethod
    def empty(n_channels: int, window: int = 8) -> "HistoryState":
        if window < 1:
            raise ValueError("window must be >= 1")
        return HistoryState(n_channels, tuple((0, OBS_NONE) for _ in range(window)))

    def push(self, action: int, obs_code: int) -> "HistoryState":
        return HistoryState(self.n_channels, self.slots[1:] + ((action, obs_code),))

    @property
    def window(self) -> int:
        return len(self.slots)


@dataclass(frozen=True)
class EpisodeTrace:
    """Per-slot record of one run; phase is 'learning' or 'testing'."""

    slot: np.ndarray
    phase: np.ndarray
    action: np.ndarray
    idle: np.ndarray
    reward: np.ndarray

    def __post_init__(self):
        n = self.slot.size
        for arr in (self.phase, self.action, self.idle, self.reward):
            if arr.shape != (n,):
                raise ValueError("trace columns must have equal length")
        if np.any((self.reward != 0) & (self.reward != 1)):
            raise ValueError("rewards must be 0/1")
        if np.any(self.reward != self.idle):
            raise ValueError("reward must be 1 exactly when the chosen channel was idle")


def env_step(env: rfenv.MarkovChannelSet, action: int,
             rng: np.random.Generator) -> tuple[int, int]:
    """Sense one channel this slot: observe its current state (1 idle,
    0 occupied), collect reward = the observation, then advance every subset
    chain one slot."""
    if not (0 <= action < env.n_channels):
        raise ValueError(f"action {action} out of range [0, {env.n_channels})")
    obs = int(env.channel_states()[action])
    reward = obs
    rfenv.markov_channel_step(env, rng)
    return obs, reward


def encode_history(h: HistoryState, candidate: int) -> np.ndarray:
    """Feature vector: per window slot a one-hot of that slot's action scaled
    by its observation code, then a one-hot of the candidate action."""
    if not (0 <= candidate < h.n_channels):
        raise ValueError("candidate action out of range")
    n = h.n_channels
    out = np.zeros((h.window + 1) * n)
    for i, (a, code) in enumerate(h.slots):
        if code != OBS_NONE:
            out[i * n + a] = float(code)
    out[h.window * n + candidate] = 1.0
    return out


def _window_features(h: HistoryState) -> np.ndarray:
    n = h.n_channels
    out = np.zeros(h.window * n)
    for i, (a, code) in enumerate(h.slots):
        if code != OBS_NONE:
            out[i * n + a] = float(code)
    return out


def belief_update(b: float, p01: float, p11: float, obs: str = "none") -> float:
    """One-slot belief propagation for the probability the subset is idle."""
    if not (0.0 <= b <= 1.0):
        raise ValueError("belief must lie in [0, 1]")
    if obs == "idle":
        return p11
    if obs == "occupied":
        return p01
    if obs == "none":
        return b * p11 + (1.0 - b) * p01
    raise ValueError("obs must be 'idle', 'occupied' or 'none'")


# ---------------------------------------------------------------------------
# index policies (genie parameters)


def whittle_index(belief: float, p01: float, p11: float,
                  discount: float = 0.9) -> float:
    """Closed-form subsidy index of a two-state arm, positively correlated
    branch (p11 >= p01).

    Piecewise: outside (p01, p11) the index is the belief itself; between the
    stationary point and p11 a one-line form; between p01 and the stationary
    point the indifference equation is linear once the deterministic passive
    climb length k is known, so a 3x3 solve is exact.
    """
    if not (0.0 <= belief <= 1.0):
        raise ValueError("belief must lie in [0, 1]")
    if not (0.0 < discount < 1.0):
        raise ValueError("discount must lie in (0, 1)")
    if p11 < p01:
        raise ValueError("closed form requires p11 >= p01")
    g = discount
    if belief <= p01 or belief >= p11:
        return float(belief)
    w0 = p01 / (1.0 - p11 + p01)
    if belief >= w0:
        return float(belief / (1.0 - g * p11 + g * belief))
    # p01 < belief < w0: passive beliefs climb T^k(p01) -> w0; find the first
    # k >= 1 strictly above the threshold belief
    d = p11 - p01
    ratio = (w0 - belief) / (w0 - p01)
    k = 1
    if d > 0.0 and ratio > 0.0:
        k = max(1, int(math.floor(math.log(ratio) / math.log(d) + 1e-12)) + 1)
    k = min(k, 100000)
    bk = w0 - (w0 - p01) * d ** k
    gk = g ** k
    t_om = belief * p11 + (1.0 - belief) * p01
    # unknowns [V(p11), V(p01), m]
    amat = np.array([
        [1.0 - g * p11, -g * (1.0 - p11), 0.0],
        [-gk * g * bk, 1.0 - gk * g * (1.0 - bk), -(1.0 - gk) / (1.0 - g)],
        [g * g * t_om - g * belief, g * g * (1.0 - t_om) - g * (1.0 - belief), 1.0],
    ])
    rhs = np.array([p11, gk * bk, belief - g * t_om])
    sol = np.linalg.solve(amat, rhs)
    return float(sol[2])


def _first_channel_of_subset(env: rfenv.MarkovChannelSet, subset: int) -> int:
    return int(np.flatnonzero(env.assignment == subset)[0])


def whittle_act(beliefs, p01: float, p11: float, discount: float = 0.9,
                env: rfenv.MarkovChannelSet | None = None) -> int:
    """Channel of the max-index subset; ties -> lowest channel index.

    Negatively correlated parameters fall back to the myopic belief argmax
    (the closed form does not cover that branch); a warning is logged once
    per call site pattern.
    """
    b = np.asarray(beliefs, float)
    if p11 >= p01:
        idx = np.array([whittle_index(v, p01, p11, discount) for v in b])
    else:
        log.warning("p11 < p01: falling back to myopic belief argmax")
        idx = b
    s = int(np.argmax(idx))  # argmax takes the first (lowest) maximizer
    if env is None:
        return s
    return _first_channel_of_subset(env, s)


def optimal_act(beliefs, p01: float, p11: float,
                env: rfenv.MarkovChannelSet | None = None) -> int:
    """Belief-myopic genie: channel of the most-likely-idle subset, ties ->
    lowest index."""
    b = np.asarray(beliefs, float)
    s = int(np.argmax(b))
    if env is None:
        return s
    return _first_channel_of_subset(env, s)


# ---------------------------------------------------------------------------
# learning policies


def gprl_act(gp: GpQModel, h: HistoryState, eps: float,
             rng: np.random.Generator) -> int:
    """Epsilon-greedy over GP posterior means; ties -> lowest action index."""
    if not (0.0 <= eps <= 1.0):
        raise ValueError("eps must lie in [0, 1]")
    n = h.n_channels
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(n))
    feats = np.stack([encode_history(h, a) for a in range(n)])
    means = gp_predict_mean_many(gp, feats)
    return int(np.argmax(means))


def _linear_eps(slot: int, total: int, start: float, end: float) -> float:
    if total <= 1:
        return end
    frac = min(slot / (total - 1), 1.0)
    return start + (end - start) * frac


def gprl_train(env: rfenv.MarkovChannelSet, rng: np.random.Generator,
               spans: int = 120, span_len: int = 50, discount: float = 0.9,
               eps_start: float = 1.0, eps_end: float = 0.02,
               window: int = 8, gp: GpQModel | None = None,
               ) -> tuple[GpQModel, np.ndarray]:
    """Online GP Q-learning over the learning phase.

    Each slot acts epsilon-greedy, observes the reward, and regresses the
    state-action value toward r + discount * max_a' Q(h', a').  Returns the
    model and the per-span mean reward curve.
    """
    if spans < 1 or span_len < 1:
        raise ValueError("spans and span_len must be >= 1")
    if gp is None:
        gp = make_gp()
    n = env.n_channels
    h = HistoryState.empty(n, window)
    total = spans * span_len
    curve = np.zeros(spans)
    slot = 0
    for sp in range(spans):
        acc = 0.0
        for _ in range(span_len):
            eps = _linear_eps(slot, total, eps_start, eps_end)
            a = gprl_act(gp, h, eps, rng)
            obs, r = env_step(env, a, rng)
            h2 = h.push(a, OBS_IDLE if obs == 1 else OBS_OCCUPIED)
            feats2 = np.stack([encode_history(h2, a2) for a2 in range(n)])
            bootstrap = float(np.max(gp_predict_mean_many(gp, feats2)))
            gp_update(gp, encode_history(h, a), r + discount * bootstrap)
            h = h2
            acc += r
            slot += 1
        curve[sp] = acc / span_len
    return gp, curve


def nnq_act(net: QNet, h: HistoryState, eps: float,
            rng: np.random.Generator) -> int:
    if not (0.0 <= eps <= 1.0):
        raise ValueError("eps must lie in [0, 1]")
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(h.n_channels))
    q = net.forward(_window_features(h)[None, :])[0]
    return int(np.argmax(q))


def nnq_train(env: rfenv.MarkovChannelSet, rng: np.random.Generator,
              spans: int = 120, span_len: int = 50, discount: float = 0.9,
              eps_start: float = 1.0, eps_end: float = 0.02, window: int = 8,
              hidden: int = 64, lr: float = 1e-3, batch: int = 32,
              replay_cap: int = 5000, target_every: int = 200, warmup: int = 200,
              ) -> tuple[QNet, np.ndarray]:
    """Neural Q baseline: replay buffer, frozen target copies, Adam TD steps.

    A non-finite loss reinitializes the network once; a second divergence
    raises with a diagnostic.
    """
    if spans < 1 or span_len < 1:
        raise ValueError("spans and span_len must be >= 1")
    n = env.n_channels
    sdim = window * n
    net = QNet(n_inputs=sdim, n_actions=n, hidden=hidden, lr=lr).init(rng)
    target = net.copy_params()
    buf = ReplayBuffer(replay_cap, sdim)
    h = HistoryState.empty(n, window)
    total = spans * span_len
    curve = np.zeros(spans)
    slot = 0
    reinits = 0
    for sp in range(spans):
        acc = 0.0
        for _ in range(span_len):
            eps = _linear_eps(slot, total, eps_start, eps_end)
            a = nnq_act(net, h, eps, rng)
            obs, r = env_step(env, a, rng)
            h2 = h.push(a, OBS_IDLE if obs == 1 else OBS_OCCUPIED)
            buf.push(_window_features(h), a, r, _window_features(h2))
            if buf.n >= warmup:
                loss = td_step(net, target, buf.sample(batch, rng), discount)
                if not np.isfinite(loss):
                    if reinits >= 1:
                        raise RuntimeError(
                            "neural Q training diverged twice (non-finite loss)")
                    log.warning("non-finite TD loss at slot %d; reinitializing", slot)
                    net = QNet(n_inputs=sdim, n_actions=n, hidden=hidden, lr=lr).init(rng)
                    target = net.copy_params()
                    reinits += 1
            if (slot + 1) % target_every == 0:
                target = net.copy_params()
            h = h2
            acc += r
            slot += 1
        curve[sp] = acc / span_len
    return net, curve


# ---------------------------------------------------------------------------
# evaluation


def evaluate_policy(env: rfenv.MarkovChannelSet, act, slots: int,
                    rng: np.random.Generator, phase: str = "testing",
                    window: int = 8, slot0: int = 0) -> EpisodeTrace:
    """Roll a policy for ``slots`` slots and record the trace.

    ``act(h, beliefs, rng)`` gets the history window and the exact per-subset
    idle beliefs (genie policies use the beliefs, learned ones the history).
    """
    if slots < 1:
        raise ValueError("slots must be >= 1")
    n = env.n_channels
    h = HistoryState.empty(n, window)
    beliefs = np.full(env.n_subsets, env.stationary_idle())
    rec_action = np.zeros(slots, dtype=np.int64)
    rec_idle = np.zeros(slots, dtype=np.int64)
    for t in range(slots):
        a = act(h, beliefs, rng)
        obs, r = env_step(env, a, rng)
        beliefs = np.array([belief_update(b, env.p01, env.p11) for b in beliefs])
        s = int(env.assignment[a])
        beliefs[s] = env.p11 if obs == 1 else env.p01
        h = h.push(a, OBS_IDLE if obs == 1 else OBS_OCCUPIED)
        rec_action[t] = a
        rec_idle[t] = obs
    return EpisodeTrace(slot=np.arange(slot0, slot0 + slots),
                        phase=np.full(slots, phase, dtype=object),
                        action=rec_action, idle=rec_idle,
                        reward=rec_idle.copy())


def eval_accuracy(trace: EpisodeTrace, phase: str = "testing") -> float:
    """Fraction of the phase's slots whose accessed channel was idle."""
    mask = trace.phase == phase
    if not np.any(mask):
        raise ValueError(f"trace has no '{phase}' slots")
    return float(np.mean(trace.reward[mask]))


def save_episode_csv(trace: EpisodeTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["slot", "phase", "action", "idle", "reward"])
        for i in range(trace.slot.size):
            wr.writerow([int(trace.slot[i]), str(trace.phase[i]),
                         int(trace.action[i]), int(trace.idle[i]),
                         int(trace.reward[i])])


def load_episode_csv(path) -> EpisodeTrace:
    slots, phases, actions, idles, rewards = [], [], [], [], []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != ["slot", "phase", "action", "idle", "reward"]:
            raise ValueError("unexpected trace header")
        for row in rd:
            slots.append(int(row[0]))
            phases.append(row[1])
            actions.append(int(row[2]))
            idles.append(int(row[3]))
            rewards.append(int(row[4]))
    return EpisodeTrace(slot=np.array(slots), phase=np.array(phases, dtype=object),
                        action=np.array(actions), idle=np.array(idles),
                        reward=np.array(rewards))
