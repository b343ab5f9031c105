"""Vehicle mobility on the DOCA highway segment and periodic CAM timing.

Time is kept in integer milliseconds (one subframe per tick).  The resource
pool occupies the first ``F`` subframes of every CAM period; the rest of the
period is idle, so every vehicle transmits exactly once per CAM period on its
TB.  "Pool subframe" counters used below index those pool subframes only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .resource_grid import PoolConfig

EAST = 1   # west -> east
WEST = -1  # east -> west


@dataclass(frozen=True)
class DocaConfig:
    length: float = 500.0
    lanes_per_direction: int = 1
    lane_width: float = 4.0
    speed: float = 140 / 3.6  # m/s
    mean_headway: float = 2.5  # s
    target_population: int = 10
    constant_population: bool = True
    cam_period: int = 100  # ms

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("length must be positive")
        if not self.speed > 0:
            raise ValueError("speed must be positive")
        if not self.mean_headway > 0:
            raise ValueError("mean_headway must be positive")
        if self.lanes_per_direction < 1 or self.target_population < 0:
            raise ValueError("invalid lane or population count")
        if self.cam_period < 1:
            raise ValueError("cam_period must be at least one subframe")

    @property
    def transit_time(self) -> float:
        """Seconds needed to cross the DOCA."""
        return self.length / self.speed


@dataclass
class Vehicle:
    id: int
    direction: int
    position: float
    speed: float
    tb: int = -1
    cam_offset: int = 0
    entry_time: int = 0
    lane: int = 0
    y: float = 0.0


def draw_interarrival(rng: np.random.Generator, mean_headway: float) -> float:
    """Exponential time headway in seconds (spatial Poisson traffic at fixed speed)."""
    if not mean_headway > 0:
        raise ValueError("mean_headway must be positive")
    return float(rng.exponential(mean_headway))


def pool_subframe_time(k: int, pool: PoolConfig, cam_period: int) -> int:
    """Millisecond tick of the ``k``-th pool subframe."""
    period, sf = divmod(int(k), pool.subframes)
    return period * cam_period + int(round(sf * pool.subframe_duration))


@dataclass
class _Anchors:
    ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    direction: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    ref_tick: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    ref_pos: np.ndarray = field(default_factory=lambda: np.empty(0, float))
    exit_tick: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    tb: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    cam_offset: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    entry_time: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    lane: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    _fields = ("ids", "direction", "ref_tick", "ref_pos", "exit_tick", "tb",
               "cam_offset", "entry_time", "lane")

    def append(self, **row):
        for name in self._fields:
            arr = getattr(self, name)
            setattr(self, name, np.append(arr, np.asarray([row[name]], dtype=arr.dtype)))

    def delete(self, idx):
        for name in self._fields:
            setattr(self, name, np.delete(getattr(self, name), idx))


class World:
    """Vehicles inside the DOCA plus their pending arrivals.

    Vehicle state lives in parallel numpy arrays (index = slot in the current
    population, in entry order); :attr:`vehicles` builds
    :class:`Vehicle` snapshots on demand.
    """

    def __init__(self, doca: DocaConfig, pool: PoolConfig, rng: np.random.Generator):
        self.doca = doca
        self.pool = pool
        self.rng = rng
        self.now = 0
        self._v = _Anchors()
        self._next_id = 0
        self._pending: dict[int, list[int]] = {EAST: [], WEST: []}
        self.initial_ids: set[int] = set()

    # -- population -------------------------------------------------------
    def __len__(self):
        return len(self._v.ids)

    @property
    def ids(self) -> np.ndarray:
        return self._v.ids

    @property
    def tbs(self) -> np.ndarray:
        return self._v.tb

    @property
    def directions(self) -> np.ndarray:
        return self._v.direction

    @property
    def lanes_y(self) -> np.ndarray:
        lane_center = (self._v.lane + 0.5) * self.doca.lane_width
        return np.where(self._v.direction == EAST, lane_center, -lane_center)

    def positions(self, tick: int | float | None = None) -> np.ndarray:
        """Positions along the DOCA axis at ``tick`` (default: now), clipped to [0, L]."""
        t = self.now if tick is None else tick
        v = self._v
        pos = v.ref_pos + v.direction * self.doca.speed * (t - v.ref_tick) / 1000.0
        return np.clip(pos, 0.0, self.doca.length)

    def coords(self, tick: int | float | None = None) -> np.ndarray:
        """``(n, 2)`` road-plane coordinates (axis position, lateral offset)."""
        return np.column_stack([self.positions(tick), self.lanes_y])

    def coords_many(self, ticks) -> np.ndarray:
        """``(len(ticks), n, 2)`` coordinates; row i equals ``coords(ticks[i])``."""
        v = self._v
        t = np.asarray(ticks, dtype=float)[:, None]
        pos = v.ref_pos + v.direction * self.doca.speed * (t - v.ref_tick) / 1000.0
        out = np.empty(pos.shape + (2,))
        out[..., 0] = np.clip(pos, 0.0, self.doca.length)
        out[..., 1] = self.lanes_y
        return out

    @property
    def vehicles(self) -> list[Vehicle]:
        pos = self.positions()
        ys = self.lanes_y
        v = self._v
        return [Vehicle(id=int(v.ids[i]), direction=int(v.direction[i]), position=float(pos[i]),
                        speed=self.doca.speed, tb=int(v.tb[i]), cam_offset=int(v.cam_offset[i]),
                        entry_time=int(v.entry_time[i]), lane=int(v.lane[i]), y=float(ys[i]))
                for i in range(len(v.ids))]

    def index_of(self, vehicle_id: int) -> int:
        hits = np.flatnonzero(self._v.ids == vehicle_id)
        if not hits.size:
            raise KeyError(vehicle_id)
        return int(hits[0])

    def set_tb(self, vehicle_id: int, tb: int):
        if not 0 <= tb < self.pool.n_tbs:
            raise ValueError(f"TB id {tb} outside pool")
        self._v.tb[self.index_of(vehicle_id)] = tb

    def add_vehicle(self, direction: int, position: float | None = None, tb: int = -1,
                    cam_offset: int | None = None, lane: int | None = None) -> Vehicle:
        """Place a vehicle now; ``position`` defaults to the entry boundary."""
        if direction not in (EAST, WEST):
            raise ValueError("direction must be +1 or -1")
        L, speed = self.doca.length, self.doca.speed
        if position is None:
            position = 0.0 if direction == EAST else L
        if not 0.0 <= position <= L:
            raise ValueError("position outside DOCA")
        remaining = L - position if direction == EAST else position
        # first tick at which the vehicle has reached the far boundary
        exit_after = max(1, math.ceil(remaining * 1000.0 / speed - 1e-9))
        if cam_offset is None:
            cam_offset = int(self.rng.integers(self.pool.subframes))
        if lane is None:
            lane = int(self.rng.integers(self.doca.lanes_per_direction))
        vid = self._next_id
        self._next_id += 1
        self._v.append(ids=vid, direction=direction, ref_tick=self.now, ref_pos=position,
                       exit_tick=self.now + exit_after, tb=tb, cam_offset=cam_offset,
                       entry_time=self.now, lane=lane)
        return self.vehicles[-1]

    def prefill(self, random_tbs: bool = True) -> list[Vehicle]:
        """Fill the DOCA with the target population at uniform-random positions."""
        n = self.doca.target_population
        dirs = [EAST] * (n // 2) + [WEST] * (n // 2)
        if n % 2:
            dirs.append(EAST if self.rng.random() < 0.5 else WEST)
        added = []
        for d in dirs:
            pos = float(self.rng.uniform(0.0, self.doca.length))
            tb = int(self.rng.integers(self.pool.n_tbs)) if random_tbs else -1
            added.append(self.add_vehicle(d, pos, tb=tb))
        self.initial_ids = {v.id for v in added}
        if not self.doca.constant_population:
            for d in (EAST, WEST):
                self._schedule_arrival(d, self.now)
        return added

    def initial_remaining(self) -> int:
        return len(self.initial_ids.intersection(self._v.ids.tolist()))

    # -- events -----------------------------------------------------------
    def _schedule_arrival(self, direction: int, after: int):
        gap = draw_interarrival(self.rng, self.doca.mean_headway)
        self._pending[direction].append(after + max(1, math.ceil(gap * 1000.0)))
        self._pending[direction].sort()

    def schedule_arrival_at(self, direction: int, tick: int):
        self._pending[direction].append(int(tick))
        self._pending[direction].sort()

    def next_arrival_time(self) -> int | None:
        heads = [q[0] for q in self._pending.values() if q]
        return min(heads) if heads else None

    def next_exit_time(self) -> int | None:
        return int(self._v.exit_tick.min()) if len(self._v.ids) else None

    def next_event_time(self) -> int | None:
        times = [t for t in (self.next_arrival_time(), self.next_exit_time()) if t is not None]
        return min(times) if times else None

    def advance_to(self, tick: int, max_arrivals: int | None = None
                   ) -> tuple[list[Vehicle], list[Vehicle]]:
        """Move to ``tick`` processing exits and arrivals in time order.

        Exits at a tick are handled before arrivals at the same tick.  Entered
        vehicles come back with ``tb == -1``; the caller assigns them.  With
        ``max_arrivals`` the clock stops at the first arrival beyond the limit,
        which stays pending.
        """
        tick = int(tick)
        if tick < self.now:
            raise ValueError("cannot move backwards in time")
        exited: list[Vehicle] = []
        entered: list[Vehicle] = []
        while True:
            t_exit = self.next_exit_time()
            t_arr = self.next_arrival_time()
            if t_exit is not None and t_exit <= tick and (t_arr is None or t_exit <= t_arr):
                self.now = t_exit
                idx = np.flatnonzero(self._v.exit_tick == t_exit)
                snap = self.vehicles
                gone = [snap[i] for i in idx]
                for g in gone:
                    g.position = self.doca.length if g.direction == EAST else 0.0
                self._v.delete(idx)
                exited.extend(gone)
                if self.doca.constant_population:
                    for g in gone:
                        self._schedule_arrival(g.direction, t_exit)
            elif t_arr is not None and t_arr <= tick:
                if max_arrivals is not None and len(entered) >= max_arrivals:
                    self.now = t_arr
                    return exited, entered
                self.now = t_arr
                d = EAST if self._pending[EAST] and self._pending[EAST][0] == t_arr else WEST
                self._pending[d].pop(0)
                entered.append(self.add_vehicle(d))
                if not self.doca.constant_population:
                    self._schedule_arrival(d, t_arr)
                if max_arrivals is not None and len(entered) >= max_arrivals:
                    return exited, entered
            else:
                break
        self.now = tick
        return exited, entered

    def step(self, dt: int = 1) -> tuple[list[Vehicle], list[Vehicle]]:
        return self.advance_to(self.now + int(dt))

    # -- traffic ----------------------------------------------------------
    def cam_transmissions(self, abs_subframe: int) -> list[tuple[Vehicle, int]]:
        """Vehicles whose TB sits in pool subframe ``abs_subframe mod F``."""
        sf = int(abs_subframe) % self.pool.subframes
        return [(v, v.tb) for v in self.vehicles
                if v.tb >= 0 and v.tb % self.pool.subframes == sf]
