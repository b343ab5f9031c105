"""Schedulers: the centralized assign-at-entry interface, the uniform-random and
round-robin baselines, and a simplified sensing-based Mode-4 selector."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .resource_grid import PoolConfig


class HistoryEntry(NamedTuple):
    time: float  # s, when the action was taken
    direction: int
    tb: int


@dataclass
class AssignContext:
    pool: PoolConfig
    occupancy: np.ndarray
    direction: int
    entry_time: float  # s
    vehicle_id: int = -1
    action_history: Sequence[HistoryEntry] = ()

    def __post_init__(self):
        if len(self.occupancy) != self.pool.n_tbs:
            raise ValueError("occupancy length does not match the pool")


class Scheduler:
    """Base class.  Centralized schedulers only implement :meth:`assign`.

    Distributed schedulers may also react to exits and to each finished
    control period (see :class:`Mode4Scheduler`).
    """

    name = "base"

    def reset(self, env) -> None:
        pass

    def assign(self, ctx: AssignContext, rng: np.random.Generator) -> int:
        raise NotImplementedError

    def on_exit(self, vehicle_ids) -> None:
        pass

    def end_of_period(self, env, observations: dict[int, np.ndarray]) -> dict[int, int]:
        """Return ``{vehicle_id: new_tb}`` reassignments (none by default)."""
        return {}

    @property
    def wants_sensing(self) -> bool:
        return False


class RandomScheduler(Scheduler):
    name = "random"

    def assign(self, ctx, rng):
        return int(rng.integers(ctx.pool.n_tbs))


class RoundRobinScheduler(Scheduler):
    """Cycles 0, 1, ..., N-1, 0, ... over TB ids.

    With a single subchannel this hands out time-orthogonal TBs.
    """

    name = "roundrobin"

    def __init__(self):
        self._next = 0

    def reset(self, env):
        self._next = 0

    def assign(self, ctx, rng):
        tb = self._next % ctx.pool.n_tbs
        self._next = tb + 1
        return tb


# --- Mode-4 -------------------------------------------------------------------

@dataclass
class SensingRecord:
    """Per-vehicle sensing memory: one row of per-TB energy per control period.

    Unobserved entries are NaN.  ``estimate`` holds the last per-TB mean and is
    carried forward for TBs with no observation in the current window.
    """

    energies: np.ndarray  # (window, N)
    estimate: np.ndarray  # (N,)
    counter: int
    head: int = 0
    latest: np.ndarray | None = None  # most recent period, NaN where not sensed

    @classmethod
    def fresh(cls, window: int, n_tbs: int, floor: float, counter: int) -> "SensingRecord":
        return cls(np.full((window, n_tbs), np.nan), np.full(n_tbs, float(floor)), counter)

    @property
    def window(self) -> int:
        return self.energies.shape[0]


def mode4_sense(record: SensingRecord, observations) -> SensingRecord:
    """Push one control period of per-TB energies (NaN where not sensed)."""
    obs = np.asarray(observations, dtype=float)
    if obs.shape != record.estimate.shape:
        raise ValueError("observation length does not match the pool")
    if np.any(obs[~np.isnan(obs)] < 0):
        raise ValueError("energies must be non-negative")
    record.energies[record.head] = obs
    record.latest = obs.copy()
    record.head = (record.head + 1) % record.window
    seen = ~np.isnan(record.energies)
    counts = seen.sum(axis=0)
    sums = np.where(seen, record.energies, 0.0).sum(axis=0)
    have = counts > 0
    record.estimate[have] = sums[have] / counts[have]
    return record


def candidate_count(n_tbs: int, fraction: float = 0.2) -> int:
    return max(1, math.ceil(fraction * n_tbs - 1e-9))


def mode4_candidates(record: SensingRecord, rng: np.random.Generator, fraction: float = 0.2,
                     exclusion_threshold: float | None = None) -> np.ndarray:
    """The lowest-energy TBs, ties broken uniformly at random.

    With ``exclusion_threshold``, TBs whose energy in the most recent period
    reached the threshold (reserved by a neighbour) are dropped first; the
    threshold is raised in 3 dB steps while fewer than the candidate count
    remain.
    """
    n = len(record.estimate)
    k = candidate_count(n, fraction)
    allowed = np.ones(n, bool)
    if exclusion_threshold is not None and record.latest is not None:
        latest = np.nan_to_num(record.latest, nan=-np.inf)
        thr = exclusion_threshold
        top = latest.max()
        while True:
            allowed = latest < thr
            if allowed.sum() >= k or thr > top:
                break
            thr *= 2.0
    pool = np.flatnonzero(allowed)
    perm = pool[rng.permutation(len(pool))]
    order = perm[np.argsort(record.estimate[perm], kind="stable")]
    return order[:k]


def mode4_select(record: SensingRecord, rng: np.random.Generator, pool: PoolConfig,
                 fraction: float = 0.2, counter: int | None = None,
                 exclusion_threshold: float | None = None) -> int:
    cands = mode4_candidates(record, rng, fraction, exclusion_threshold)
    tb = int(cands[rng.integers(len(cands))])
    if counter is not None:
        record.counter = counter
    return tb


class SelectionEvent(NamedTuple):
    tick: int
    vehicle_id: int
    others: int  # other vehicles inside the DOCA at selection time
    collided: bool  # the chosen TB was already used by another vehicle
    at_entry: bool = False


class Mode4Scheduler(Scheduler):
    """Distributed sensing-based selection.

    At entry a vehicle picks among the lowest ``fraction`` of the energies it
    hears right now (``entry="random"`` picks uniformly instead).  When its
    counter runs out it keeps its TB with ``keep_probability`` and otherwise
    reselects from its windowed energy estimates.  TBs that were reserved in
    the latest period are excluded first (``exclusion``), and with
    ``announce`` reselections in the same period see each other's choices.
    The counter equals the sensing window unless ``counter_mode`` draws it
    from ``counter_range``.
    """

    name = "mode4"

    def __init__(self, window: int = 10, fraction: float = 0.2, counter_mode: bool = False,
                 counter_range: tuple[int, int] = (5, 15), entry: str = "sensing",
                 exclusion: bool = True, keep_probability: float = 0.8, announce: bool = True):
        if window < 1:
            raise ValueError("sensing window must cover at least one control period")
        self.window = window
        self.fraction = fraction
        self.counter_mode = counter_mode
        self.counter_range = counter_range
        if entry not in ("sensing", "random"):
            raise ValueError("entry must be 'sensing' or 'random'")
        self.entry = entry
        self.exclusion = exclusion
        self.keep_probability = keep_probability
        self.announce = announce
        self._env = None
        self.records: dict[int, SensingRecord] = {}
        self.selections: list[SelectionEvent] = []
        self._rng: np.random.Generator | None = None
        self._floor = 0.0
        self._n_tbs = 0

    @property
    def wants_sensing(self):
        return True

    @property
    def _threshold(self) -> float | None:
        # 3 dB above the idle floor
        return 2.0 * self._floor if self.exclusion else None

    def _counter(self) -> int:
        if self.counter_mode:
            lo, hi = self.counter_range
            return int(self._rng.integers(lo, hi + 1))
        return self.window

    def reset(self, env):
        self.records.clear()
        self.selections.clear()
        self._env = env
        self._rng = env.rng
        self._floor = env.idle_energy
        self._n_tbs = env.pool.n_tbs
        for vid in env.world.ids.tolist():
            self._track(int(vid))

    def _track(self, vid: int):
        self.records[vid] = SensingRecord.fresh(self.window, self._n_tbs, self._floor,
                                                self._counter())

    def assign(self, ctx, rng):
        if ctx.vehicle_id < 0:
            return int(rng.integers(ctx.pool.n_tbs))
        self._track(ctx.vehicle_id)
        if self.entry == "random" or self._env is None:
            return int(rng.integers(ctx.pool.n_tbs))
        rec = self.records[ctx.vehicle_id]
        w = self._env.world
        vehicle = w.vehicles[w.index_of(ctx.vehicle_id)]
        rec.estimate[:] = self._env.sense_entry(vehicle)
        rec.latest = rec.estimate.copy()
        tb = mode4_select(rec, rng, ctx.pool, self.fraction,
                          exclusion_threshold=self._threshold)
        others = w.tbs[(w.ids != ctx.vehicle_id) & (w.tbs >= 0)].tolist()
        self.selections.append(SelectionEvent(w.now, ctx.vehicle_id, len(others), tb in others,
                                              True))
        return tb

    def on_exit(self, vehicle_ids):
        for vid in vehicle_ids:
            self.records.pop(int(vid), None)

    def end_of_period(self, env, observations):
        changes: dict[int, int] = {}
        ids = env.world.ids.tolist()
        tbs = dict(zip(ids, env.world.tbs.tolist()))
        claimed: list[int] = []
        for vid, obs in observations.items():
            rec = self.records.get(vid)
            if rec is None:
                continue
            mode4_sense(rec, obs)
            rec.counter -= 1
            if rec.counter > 0:
                continue
            if self.keep_probability and self._rng.random() < self.keep_probability:
                rec.counter = self._counter()
                continue
            if self.announce and claimed and rec.latest is not None:
                rec.latest[claimed] = np.fmax(rec.latest[claimed], self._floor * 4.0)
            new = mode4_select(rec, self._rng, env.pool, self.fraction, counter=self._counter(),
                               exclusion_threshold=self._threshold)
            others = [t for v, t in tbs.items() if v != vid]
            self.selections.append(SelectionEvent(env.world.now, vid, len(others), new in others))
            tbs[vid] = new
            changes[vid] = new
            claimed.append(new)
        return changes


def make_scheduler(kind: str, **params) -> Scheduler:
    kinds = {"random": RandomScheduler, "roundrobin": RoundRobinScheduler,
             "round-robin": RoundRobinScheduler, "rr": RoundRobinScheduler,
             "mode4": Mode4Scheduler}
    try:
        cls = kinds[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown scheduler {kind!r}") from None
    return cls(**params)
