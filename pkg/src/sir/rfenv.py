"""Radio environment: primary-user geometry, power processes and energy sensing.

Distances are in km, powers in linear units relative to the noise variance,
time in abstract slots (one sensing window per slot).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PuNode",
    "SuTrack",
    "ScenarioConfig",
    "SensingSample",
    "MarkovChannelSet",
    "sample_power_process",
    "sense_window",
    "received_power_at",
    "generate_mapping_dataset",
    "make_channel_set",
    "markov_channel_step",
    "save_dataset_csv",
    "load_dataset_csv",
]


@dataclass(frozen=True)
class PuNode:
    """A primary transmitter with a disk coverage footprint and a level process."""

    position: tuple[float, float]
    coverage_radius: float
    channel: int
    power_levels: tuple[float, ...]
    level_priors: tuple[float, ...]
    mean_dwell: float = 50.0

    def __post_init__(self):
        if self.coverage_radius <= 0:
            raise ValueError("pu coverage_radius must be > 0")
        if self.channel < 0:
            raise ValueError("pu channel must be >= 0")
        if len(self.power_levels) == 0:
            raise ValueError("pu power_levels must be non-empty")
        if len(self.power_levels) != len(self.level_priors):
            raise ValueError("pu power_levels and level_priors must have equal length")
        if any(p < 0 for p in self.power_levels):
            raise ValueError("pu power_levels must be non-negative")
        if sum(1 for p in self.power_levels if p == 0.0) > 1:
            raise ValueError("pu power_levels: at most one zero (OFF) level permitted")
        if abs(sum(self.level_priors) - 1.0) > 1e-9:
            raise ValueError("pu level_priors must sum to 1 within 1e-9")
        if any(w < 0 for w in self.level_priors):
            raise ValueError("pu level_priors must be non-negative")
        if self.mean_dwell < 1.0:
            raise ValueError("pu mean_dwell must be >= 1 slot")


@dataclass(frozen=True)
class SuTrack:
    """A secondary user moving on a straight segment, sensing as it goes."""

    start: tuple[float, float]
    end: tuple[float, float]
    n_samples: int
    cluster_head: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("su n_samples must be >= 1")
        if self.cluster_head < 0:
            raise ValueError("su cluster_head must be >= 0")


@dataclass(frozen=True)
class ScenarioConfig:
    """Static description of one simulated deployment."""

    area_km: tuple[float, float] = (12.0, 12.0)
    pus: tuple[PuNode, ...] = ()
    sus: tuple[SuTrack, ...] = ()
    noise_var: float = 1.0
    samples_per_window: int = 500
    slot_duration: int = 1
    seed: int = 0
    # Optional override; defaults to max PU channel + 1 (and at least 1) so that
    # PU-free scenarios still carry one always-idle channel.
    n_channels: int | None = None

    def __post_init__(self):
        if self.area_km[0] <= 0 or self.area_km[1] <= 0:
            raise ValueError("area_km entries must be > 0")
        if self.noise_var <= 0:
            raise ValueError("noise_var must be > 0")
        if self.samples_per_window < 1:
            raise ValueError("samples_per_window must be >= 1")
        if self.slot_duration < 1:
            raise ValueError("slot_duration must be >= 1")
        w, h = self.area_km
        for i, su in enumerate(self.sus):
            for pt in (su.start, su.end):
                if not (0.0 <= pt[0] <= w and 0.0 <= pt[1] <= h):
                    raise ValueError(f"su {i}: track endpoint {pt} outside area {self.area_km}")
        if self.n_channels is not None:
            if self.n_channels < 1:
                raise ValueError("n_channels must be >= 1")
            for i, pu in enumerate(self.pus):
                if pu.channel >= self.n_channels:
                    raise ValueError(f"pu {i}: channel {pu.channel} >= n_channels {self.n_channels}")

    def channel_count(self) -> int:
        if self.n_channels is not None:
            return self.n_channels
        if self.pus:
            return max(pu.channel for pu in self.pus) + 1
        return 1


@dataclass(frozen=True)
class SensingSample:
    """One location-stamped multi-channel energy measurement with ground truth."""

    su_id: int
    seq: int
    location: tuple[float, float]
    energies: np.ndarray
    label_bits: np.ndarray  # int8, 1 = occupied on that channel at this location


@dataclass
class MarkovChannelSet:
    """Channels partitioned into subsets; each subset holds one two-state chain.

    State 1 = idle, 0 = occupied.  p11 = P(idle -> idle), p01 = P(occupied -> idle).
    """

    n_channels: int
    n_subsets: int
    assignment: np.ndarray
    p01: float
    p11: float
    states: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.n_channels < 1 or self.n_subsets < 1:
            raise ValueError("n_channels and n_subsets must be >= 1")
        if self.n_channels % self.n_subsets != 0:
            raise ValueError("n_subsets must divide n_channels")
        if not (0.0 <= self.p01 <= 1.0 and 0.0 <= self.p11 <= 1.0):
            raise ValueError("p01 and p11 must lie in [0, 1]")
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.shape != (self.n_channels,):
            raise ValueError("assignment must map every channel to a subset")
        if self.assignment.min() < 0 or self.assignment.max() >= self.n_subsets:
            raise ValueError("assignment entries must be valid subset indices")
        if self.states is None:
            self.states = np.ones(self.n_subsets, dtype=np.int64)
        self.states = np.asarray(self.states, dtype=np.int64)
        if self.states.shape != (self.n_subsets,) or not np.isin(self.states, (0, 1)).all():
            raise ValueError("states must be a 0/1 vector, one entry per subset")

    def stationary_idle(self) -> float:
        denom = 1.0 - self.p11 + self.p01
        if denom == 0.0:  # p11 = 1, p01 = 0: absorbing at the initial state
            return float(self.states.mean())
        return self.p01 / denom

    def channel_states(self) -> np.ndarray:
        return self.states[self.assignment]


def sample_power_process(pu: PuNode, horizon: int, rng: np.random.Generator,
                         return_renewals: bool = False):
    """Semi-Markov level index sequence for one PU.

    At each renewal a level is drawn from ``level_priors`` (independently of the
    previous level, so the same level may repeat) and held for a geometric
    duration with mean ``mean_dwell``.

    Returns the int64 level sequence, plus a boolean renewal-marker array
    (True at slots where a renewal draw happened) when ``return_renewals``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    levels = np.empty(horizon, dtype=np.int64)
    renewals = np.zeros(horizon, dtype=bool)
    priors = np.asarray(pu.level_priors, dtype=np.float64)
    priors = priors / priors.sum()
    p_term = 1.0 / float(pu.mean_dwell)
    t = 0
    while t < horizon:
        lvl = int(rng.choice(len(priors), p=priors))
        d = int(rng.geometric(p_term)) if p_term < 1.0 else 1
        end = min(t + d, horizon)
        levels[t:end] = lvl
        renewals[t] = True
        t = end
    if return_renewals:
        return levels, renewals
    return levels


def sense_window(received_power, noise_var: float, n: int,
                 rng: np.random.Generator):
    """Energy statistic T = (1/n) sum |s_i + w_i|^2 over one window.

    With circular complex Gaussian signal and noise, T is exactly
    Gamma(n, (P + sigma^2)/n): mean P + sigma^2, variance (P + sigma^2)^2 / n.
    Sampled from that law directly.  ``received_power`` may be an array of
    per-window powers; the result then has the same shape.
    """
    p = np.asarray(received_power, float)
    if np.any(p < 0):
        raise ValueError("received_power must be >= 0")
    if noise_var <= 0:
        raise ValueError("noise_var must be > 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    draw = rng.gamma(shape=float(n), scale=(p + noise_var) / n)
    if np.ndim(received_power) == 0:
        return float(draw)
    return draw


def received_power_at(pu: PuNode, level: int,
                      location: tuple[float, float]) -> float:
    """Received power of one PU level at a location: fixed inside the coverage
    disk (boundary inclusive), zero outside."""
    if not 0 <= level < len(pu.power_levels):
        raise ValueError(f"level {level} out of range for {len(pu.power_levels)} levels")
    dx = location[0] - pu.position[0]
    dy = location[1] - pu.position[1]
    if dx * dx + dy * dy <= pu.coverage_radius * pu.coverage_radius:
        return float(pu.power_levels[level])
    return 0.0


def _channel_power_and_bits(cfg: ScenarioConfig, location: tuple[float, float]):
    n_ch = cfg.channel_count()
    power = np.zeros(n_ch)
    bits = np.zeros(n_ch, dtype=np.int8)
    for pu in cfg.pus:
        # mapping treats each PU as on-air at its strongest level
        lvl = int(np.argmax(pu.power_levels))
        p = received_power_at(pu, lvl, location)
        if p > 0.0:
            power[pu.channel] += p
            bits[pu.channel] = 1
    return power, bits


def generate_mapping_dataset(cfg: ScenarioConfig, rng: np.random.Generator) -> list[SensingSample]:
    """Per-SU energy samples along each track with ground-truth occupancy bits.

    Sample positions are uniform on the segment, sorted by position along the
    track; seq is strictly increasing per SU.
    """
    if not cfg.sus:
        raise ValueError("scenario has no SU tracks")
    n_ch = cfg.channel_count()
    n = cfg.samples_per_window
    out: list[SensingSample] = []
    for su_id, su in enumerate(cfg.sus):
        u = np.sort(rng.random(su.n_samples))
        xs = su.start[0] + u * (su.end[0] - su.start[0])
        ys = su.start[1] + u * (su.end[1] - su.start[1])
        scale = np.empty((su.n_samples, n_ch))
        bits_all = np.empty((su.n_samples, n_ch), dtype=np.int8)
        for i in range(su.n_samples):
            power, bits = _channel_power_and_bits(cfg, (float(xs[i]), float(ys[i])))
            scale[i] = (power + cfg.noise_var) / n
            bits_all[i] = bits
        energies = rng.gamma(shape=float(n), scale=scale)
        for i in range(su.n_samples):
            out.append(SensingSample(su_id=su_id, seq=i,
                                     location=(float(xs[i]), float(ys[i])),
                                     energies=energies[i].copy(),
                                     label_bits=bits_all[i].copy()))
    return out


def make_channel_set(n_channels: int, n_subsets: int, p01: float, p11: float,
                     rng: np.random.Generator | None = None,
                     states: np.ndarray | None = None) -> MarkovChannelSet:
    """Channels assigned to subsets in contiguous equal blocks; initial subset
    states drawn from the stationary law unless given explicitly."""
    if n_channels % n_subsets != 0:
        raise ValueError("n_subsets must divide n_channels")
    block = n_channels // n_subsets
    assignment = np.arange(n_channels, dtype=np.int64) // block
    chan = MarkovChannelSet(n_channels=n_channels, n_subsets=n_subsets,
                            assignment=assignment, p01=p01, p11=p11,
                            states=np.ones(n_subsets, dtype=np.int64) if states is None else states)
    if states is None:
        if rng is None:
            raise ValueError("either states or rng must be given")
        w = chan.stationary_idle()
        chan.states = (rng.random(n_subsets) < w).astype(np.int64)
    return chan


def markov_channel_step(chan: MarkovChannelSet, rng: np.random.Generator) -> np.ndarray:
    """Advance every subset chain one slot in place; returns the new states."""
    p_idle = np.where(chan.states == 1, chan.p11, chan.p01)
    chan.states = (rng.random(chan.n_subsets) < p_idle).astype(np.int64)
    return chan.states


def save_dataset_csv(samples: list[SensingSample], path) -> None:
    if not samples:
        raise ValueError("empty dataset")
    n_ch = samples[0].energies.shape[0]
    header = ["su_id", "seq", "x_km", "y_km"] + [f"ch{c}_energy" for c in range(n_ch)] + ["label_bits"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for s in samples:
            row = [s.su_id, s.seq, repr(s.location[0]), repr(s.location[1])]
            row += [repr(float(e)) for e in s.energies]
            row.append("".join(str(int(b)) for b in s.label_bits))
            wr.writerow(row)


def load_dataset_csv(path) -> list[SensingSample]:
    out: list[SensingSample] = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        n_ch = sum(1 for h in header if h.endswith("_energy"))
        for row in rd:
            su_id, seq = int(row[0]), int(row[1])
            loc = (float(row[2]), float(row[3]))
            energies = np.array([float(v) for v in row[4:4 + n_ch]])
            bits = np.array([int(c) for c in row[4 + n_ch]], dtype=np.int8)
            out.append(SensingSample(su_id, seq, loc, energies, bits))
    return out
