"""Pool-subframe simulation loop: binds world, channel and scheduler, measures
per-transmission PRR, and runs closed-loop evaluations."""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import channel as ch
from .channel import ChannelConfig, ShadowField
from .resource_grid import PoolConfig, occupancy_from_array
from .sched import AssignContext, HistoryEntry, Scheduler
from .world import EAST, DocaConfig, Vehicle, World


@dataclass(frozen=True)
class Scenario:
    name: str
    doca: DocaConfig
    pool: PoolConfig
    channel: ChannelConfig


@dataclass
class Snapshot:
    """A static picture of the DOCA: who is where on which TB."""

    ids: np.ndarray
    coords: np.ndarray  # (n, 2) metres
    tbs: np.ndarray
    shadow: np.ndarray | None = None  # (n, n) dB, symmetric

    def __len__(self):
        return len(self.ids)


@dataclass
class TxRecord:
    tick: int
    tx_id: int
    tb: int
    eligible: int
    successes: int
    outcomes: dict[int, bool] | None = None

    @property
    def prr(self) -> float:
        return self.successes / self.eligible


_LOG_FIELDS = ("tick", "tx_id", "tb", "eligible", "successes")


@dataclass
class TxLog:
    """Column-wise transmission log; only transmissions with receivers are kept."""

    tick: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    tx_id: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    tb: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    eligible: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    successes: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def __len__(self):
        return len(self.tick)

    @property
    def prr(self) -> np.ndarray:
        return self.successes / self.eligible

    @classmethod
    def concat(cls, logs) -> "TxLog":
        logs = [lg for lg in logs if len(lg)]
        if not logs:
            return cls()
        return cls(*(np.concatenate([getattr(lg, f) for lg in logs]) for f in _LOG_FIELDS))

    def records(self) -> list[TxRecord]:
        return [TxRecord(int(a), int(b), int(c), int(d), int(e))
                for a, b, c, d, e in zip(self.tick, self.tx_id, self.tb, self.eligible,
                                         self.successes)]


# --- reception engine -----------------------------------------------------------

def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def subframe_outcomes(snap: Snapshot, tx: np.ndarray, cfg: ChannelConfig):
    """Success and eligibility masks ``(len(tx), n)`` for one subframe.

    ``tx`` indexes the snapshot vehicles transmitting in this subframe.
    """
    marker = np.zeros(len(snap), np.int64)
    marker[np.asarray(tx, dtype=np.int64)] = 1
    return period_outcomes(snap, tx, marker, cfg)


def period_outcomes(snap: Snapshot, tx: np.ndarray, sub_of: np.ndarray, cfg: ChannelConfig,
                    coords: np.ndarray | None = None):
    """``subframe_outcomes`` for transmitters spread over several subframes.

    ``sub_of`` gives every vehicle's subframe; ``coords`` optionally holds
    ``(len(tx), n, 2)`` coordinates at each transmitter's subframe.  Vehicles
    sharing a TB share a subframe, so interference stays within one instant.
    """
    n = len(snap)
    tx = np.asarray(tx, dtype=np.int64)
    not_self = np.arange(n)[None, :] != tx[:, None]
    listening = sub_of[None, :] != sub_of[tx][:, None]
    tx_tbs = snap.tbs[tx]
    co_tb = (tx_tbs[:, None] == tx_tbs[None, :]) & ~np.eye(len(tx), dtype=bool)

    if cfg.model == ch.E1_IDEAL:
        clean = ~co_tb.any(axis=1)
        return not_self & listening & clean[:, None], not_self

    if coords is None:
        d = _pairwise(snap.coords[tx], snap.coords)
    else:
        diff = coords[np.arange(len(tx)), tx][:, None, :] - coords
        d = np.sqrt((diff * diff).sum(axis=-1))
    eligible = not_self & (d <= cfg.prr_range)
    if cfg.model == ch.E2_RANGE:
        near = d <= cfg.range
        blocked = (co_tb.astype(np.int64) @ near.astype(np.int64)) > 0
        return eligible & listening & near & ~blocked, eligible

    shadow = 0.0 if snap.shadow is None else snap.shadow[tx]
    prx = ch.dbm_to_mw(ch.rx_power_dbm(d, shadow, cfg))
    interference = co_tb.astype(float) @ prx
    noise = float(ch.dbm_to_mw(cfg.noise_dbm))
    sinr = 10.0 * np.log10(prx / (noise + interference))
    return eligible & listening & (sinr >= cfg.sinr_threshold), eligible


def evaluate_subframes(snap: Snapshot, pool: PoolConfig, cfg: ChannelConfig, subframes,
                       coords_at=None, detail: bool = False):
    """PRR bookkeeping for every transmission of ``snap`` in ``subframes``.

    ``coords_at(sf)`` may supply per-subframe coordinates (mobility).  Returns
    ``[(subframe, tx_index, eligible, successes, outcomes|None), ...]``.
    """
    out = []
    sub_of = snap.tbs % pool.subframes
    if cfg.model == ch.E1_IDEAL and not detail:
        # single collision domain: counts are enough
        n = len(snap)
        if n < 2:
            return out
        tb_count = np.bincount(snap.tbs, minlength=pool.n_tbs)
        sf_count = np.bincount(sub_of, minlength=pool.subframes)
        for sf in subframes:
            for i in np.flatnonzero(sub_of == sf):
                succ = 0 if tb_count[snap.tbs[i]] > 1 else n - sf_count[sf]
                out.append((sf, int(i), n - 1, int(succ), None))
        return out
    sfs = list(subframes)
    rank = np.full(pool.subframes, -1)
    rank[sfs] = np.arange(len(sfs))
    r = rank[sub_of]
    tx = np.flatnonzero(r >= 0)
    if not len(tx):
        return out
    tx = tx[np.argsort(r[tx], kind="stable")]
    tx_sf = sub_of[tx]
    coords = None
    if coords_at is not None:
        present, inverse = np.unique(r[tx], return_inverse=True)
        coords = np.stack([coords_at(sfs[j]) for j in present])[inverse]
    success, eligible = period_outcomes(snap, tx, sub_of, cfg, coords)
    n_el = eligible.sum(axis=1)
    n_ok = success.sum(axis=1)
    for row, i in enumerate(tx):
        if n_el[row] == 0:
            continue
        outcomes = None
        if detail:
            outcomes = {int(snap.ids[j]): bool(success[row, j])
                        for j in np.flatnonzero(eligible[row])}
        out.append((int(tx_sf[row]), int(i), int(n_el[row]), int(n_ok[row]), outcomes))
    return out


def sensed_energy(snap: Snapshot, pool: PoolConfig, cfg: ChannelConfig, subframes,
                  high: float, idle: float, coords_at=None) -> np.ndarray:
    """Per-vehicle, per-TB sensed energy (linear) over ``subframes``.

    NaN marks TBs not sensed: subframes outside the list and the vehicle's own
    transmit subframe (half duplex).
    """
    n = len(snap)
    F = pool.subframes
    out = np.full((n, pool.n_tbs), np.nan)
    sub_of = snap.tbs % F
    chan_of = snap.tbs // F
    for sf in subframes:
        tx = np.flatnonzero(sub_of == sf)
        cols = np.arange(pool.subchannels) * F + sf
        if not len(tx):
            out[:, cols] = idle
            continue
        onehot = np.zeros((len(tx), pool.subchannels))
        onehot[np.arange(len(tx)), chan_of[tx]] = 1.0
        not_self = (np.arange(n)[None, :] != tx[:, None]).astype(float)
        if cfg.model == ch.E1_IDEAL:
            busy = (onehot.T @ not_self) > 0
            energy = np.where(busy, high, idle)
        else:
            coords = snap.coords if coords_at is None else coords_at(sf)
            d = _pairwise(coords[tx], coords)
            if cfg.model == ch.E2_RANGE:
                busy = (onehot.T @ (not_self * (d <= cfg.range))) > 0
                energy = np.where(busy, high, idle)
            else:
                shadow = 0.0 if snap.shadow is None else snap.shadow[tx]
                prx = ch.dbm_to_mw(ch.rx_power_dbm(d, shadow, cfg)) * not_self
                energy = idle + onehot.T @ prx
        out[:, cols] = energy.T
        own = np.flatnonzero(sub_of == sf)
        out[np.ix_(own, cols)] = np.nan
    return out


def energy_at(snap: Snapshot, pool: PoolConfig, cfg: ChannelConfig, point, high: float,
              idle: float) -> np.ndarray:
    """Per-TB energy a listening (non-transmitting) observer at ``point`` senses
    over one pool period."""
    energy = np.full(pool.n_tbs, float(idle))
    if not len(snap):
        return energy
    point = np.asarray(point, dtype=float)
    if cfg.model == ch.E1_IDEAL:
        busy = np.bincount(snap.tbs, minlength=pool.n_tbs) > 0
        return np.where(busy, high, idle)
    d = np.sqrt(((snap.coords - point) ** 2).sum(axis=1))
    if cfg.model == ch.E2_RANGE:
        busy = np.bincount(snap.tbs[d <= cfg.range], minlength=pool.n_tbs) > 0
        return np.where(busy, high, idle)
    prx = ch.dbm_to_mw(ch.rx_power_dbm(d, 0.0, cfg))
    return energy + np.bincount(snap.tbs, weights=prx, minlength=pool.n_tbs)


def brute_force_prr(snap: Snapshot, pool: PoolConfig, cfg: ChannelConfig) -> list[float]:
    """Reference PRR list for a static snapshot, one pool period long.

    Walks every transmitter/receiver pair with the scalar reception rules;
    order is by subframe, then by vehicle order in the snapshot.
    """
    n = len(snap)
    prrs = []
    pts = [tuple(map(float, c)) for c in snap.coords]
    for sf in range(pool.subframes):
        txs = [i for i in range(n) if snap.tbs[i] % pool.subframes == sf]
        for i in txs:
            eligible = 0
            ok = 0
            others = [k for k in txs if k != i and snap.tbs[k] == snap.tbs[i]]
            for j in range(n):
                if j == i:
                    continue
                if cfg.model != ch.E1_IDEAL and math.dist(pts[i], pts[j]) > cfg.prr_range:
                    continue
                eligible += 1
                rx_tx = j in txs
                if cfg.model == ch.E1_IDEAL:
                    good = ch.e1_receive(len(others), rx_tx)
                elif cfg.model == ch.E2_RANGE:
                    good = ch.range_receive(pts[i], pts[j], [pts[k] for k in others], rx_tx, cfg)
                else:
                    sh = None
                    if snap.shadow is not None:
                        sh = [snap.shadow[i, j]] + [snap.shadow[k, j] for k in others]
                    good = ch.sinr_receive(pts[i], pts[j], [pts[k] for k in others], rx_tx,
                                           cfg, sh)
                ok += bool(good)
            if eligible:
                prrs.append(ok / eligible)
    return prrs


# --- environment ---------------------------------------------------------------

class SchedulingEnv:
    """One DOCA instance driven by a scheduler.

    The loop alternates :meth:`run_interval` (transmissions until the next
    vehicle arrival) and :meth:`admit`/:meth:`commit` (the arrival and its TB
    assignment).
    """

    def __init__(self, scenario: Scenario, scheduler: Scheduler | None, rng: np.random.Generator,
                 history_len: int = 29, detail: bool = False):
        self.scenario = scenario
        self.scheduler = scheduler
        self.rng = rng
        self.history_len = history_len
        self.detail = detail
        self.frozen = False
        self.world: World | None = None
        self.history: deque[HistoryEntry] = deque(maxlen=history_len)
        self.k = 0  # next pool subframe to evaluate
        self.actions = 0
        self._period_obs: dict[int, np.ndarray] = {}
        self._period = -1
        self._shadow: ShadowField | None = None
        self._sf_ticks = [int(round(sf * scenario.pool.subframe_duration))
                          for sf in range(scenario.pool.subframes)]
        self._cam_period = scenario.doca.cam_period

    @property
    def pool(self) -> PoolConfig:
        return self.scenario.pool

    @property
    def channel(self) -> ChannelConfig:
        return self.scenario.channel

    @property
    def idle_energy(self) -> float:
        return float(ch.dbm_to_mw(self.channel.noise_dbm))

    @property
    def high_energy(self) -> float:
        return float(ch.dbm_to_mw(self.channel.tx_power))

    @property
    def now(self) -> int:
        return self.world.now

    def reset(self, prefill: bool = True) -> "SchedulingEnv":
        self.world = World(self.scenario.doca, self.pool, self.rng)
        self.history.clear()
        self.k = 0
        self.actions = 0
        self._period_obs = {}
        self._period = -1
        cfg = self.channel
        self._shadow = (ShadowField(cfg.shadow_sigma, cfg.decorrelation_distance, self.rng)
                        if cfg.model == ch.E2_FULL else None)
        if prefill:
            self.world.prefill(random_tbs=True)
        if self.scheduler is not None:
            self.scheduler.reset(self)
        return self

    # -- time helpers --
    def tick_of(self, k: int) -> int:
        period, sf = divmod(k, len(self._sf_ticks))
        return period * self._cam_period + self._sf_ticks[sf]

    def k_at(self, tick: int) -> int:
        """First pool subframe whose tick is at or after ``tick``."""
        F = self.pool.subframes
        cam = self.scenario.doca.cam_period
        period, offset = divmod(int(tick), cam)
        sf = math.ceil(offset / self.pool.subframe_duration - 1e-9)
        return period * F + sf if sf < F else (period + 1) * F

    def snapshot(self, tick: int | None = None) -> Snapshot:
        w = self.world
        coords = w.coords(tick)
        shadow = None
        if self._shadow is not None:
            shadow = self._shadow.sync(w.ids, coords)
        return Snapshot(w.ids.copy(), coords, w.tbs.copy(), shadow)

    def freeze(self):
        """Stop mobility and events; transmissions then repeat on a static snapshot."""
        self.frozen = True
        self._frozen_tick = self.world.now

    # -- main loop --
    def run_interval(self, horizon: int | None = None, collect: bool = True) -> TxLog:
        """Evaluate pool subframes until the next arrival (or ``horizon`` tick).

        Subframes at ticks ``>= horizon`` and at or after the next arrival are
        left for later.  Exits are processed as they happen.
        """
        sensing = self.scheduler is not None and self.scheduler.wants_sensing
        if not (collect or sensing):
            return self._skip(horizon)
        w = self.world
        inf = math.inf
        t_h = inf if horizon is None else horizon
        parts = []
        while True:
            t_k = self.tick_of(self.k)
            if self.frozen:
                t_e = t_a = inf
            else:
                t_e = w.next_exit_time()
                t_a = w.next_arrival_time()
                t_e = inf if t_e is None else t_e
                t_a = inf if t_a is None else t_a
            if t_e <= t_k and t_e <= t_a and t_e < t_h:
                self._apply_exits(*w.advance_to(t_e, max_arrivals=0))
                continue
            if not (t_k < t_a and t_k < t_h):
                break
            stop = min(t_a, t_h, t_e)
            F = self.pool.subframes
            period, sf0 = divmod(self.k, F)
            sfs = []
            for sf in range(sf0, F):
                if self.tick_of(period * F + sf) >= stop:
                    break
                sfs.append(sf)
            if not self.frozen:
                w.advance_to(t_k)
            parts.append(self._evaluate(period, sfs, collect))
            self.k += len(sfs)
            if sfs[-1] == F - 1:
                self._close_period(period)
        return TxLog.concat(parts)

    def _skip(self, horizon):
        w = self.world
        t_h = math.inf if horizon is None else horizon
        while True:
            t_e = w.next_exit_time()
            t_a = w.next_arrival_time()
            t_a = math.inf if t_a is None else t_a
            if t_e is None or t_e > t_a or t_e >= t_h:
                break
            self._apply_exits(*w.advance_to(t_e, max_arrivals=0))
        stop = min(t_a, t_h)
        if stop < math.inf:
            self.k = max(self.k, self.k_at(stop))
        return TxLog()

    def _apply_exits(self, exited, entered):
        assert not entered, "arrival processed outside admit()"
        if self.scheduler is not None and exited:
            self.scheduler.on_exit([v.id for v in exited])

    def _evaluate(self, period: int, sfs: list[int], collect: bool) -> TxLog:
        F = self.pool.subframes
        base_tick = self._frozen_tick if self.frozen else None
        snap = self.snapshot(base_tick if self.frozen else self.tick_of(period * F + sfs[0]))
        coords_at = None
        if self.channel.model != ch.E1_IDEAL and not self.frozen and len(sfs) > 1:
            stack = self.world.coords_many([self.tick_of(period * F + sf) for sf in sfs])
            row_of = {sf: i for i, sf in enumerate(sfs)}

            def coords_at(sf):
                return stack[row_of[sf]]
        parts = TxLog()
        if collect:
            rows = evaluate_subframes(snap, self.pool, self.channel, sfs, coords_at, self.detail)
            if rows:
                parts = TxLog(
                    np.array([self.tick_of(period * F + r[0]) for r in rows], np.int64),
                    snap.ids[[r[1] for r in rows]],
                    snap.tbs[[r[1] for r in rows]],
                    np.array([r[2] for r in rows], np.int64),
                    np.array([r[3] for r in rows], np.int64))
                if self.detail:
                    self.last_outcomes = [r[4] for r in rows]
        if self.scheduler is not None and self.scheduler.wants_sensing:
            energy = sensed_energy(snap, self.pool, self.channel, sfs, self.high_energy,
                                   self.idle_energy, coords_at)
            if period != self._period:
                self._period_obs = {}
                self._period = period
            n_tbs = self.pool.n_tbs
            for vid, row in zip(snap.ids.tolist(), energy):
                acc = self._period_obs.setdefault(vid, np.full(n_tbs, np.nan))
                have = ~np.isnan(row)
                acc[have] = row[have]
        return parts

    def _close_period(self, period: int):
        if self.scheduler is None or not self.scheduler.wants_sensing:
            return
        obs = self._period_obs if self._period == period else {}
        alive = set(self.world.ids.tolist())
        obs = {vid: o for vid, o in obs.items() if vid in alive}
        self._period_obs = {}
        for vid, tb in self.scheduler.end_of_period(self, obs).items():
            self.world.set_tb(vid, tb)

    # -- arrivals and actions --
    def admit(self) -> Vehicle:
        """Advance to the next arrival and return the entering (unassigned) vehicle."""
        w = self.world
        while True:
            t_a = w.next_arrival_time()
            t_e = w.next_exit_time()
            if t_a is None and t_e is None:
                raise RuntimeError("no pending arrival")
            if t_e is not None and (t_a is None or t_e <= t_a):
                self._apply_exits(*w.advance_to(t_e, max_arrivals=0))
                continue
            break
        exited, entered = w.advance_to(t_a, max_arrivals=1)
        self._apply_exits(exited, [])
        self.k = max(self.k, self.k_at(t_a))
        return entered[0]

    def context(self, vehicle: Vehicle) -> AssignContext:
        w = self.world
        others = w.tbs[(w.ids != vehicle.id) & (w.tbs >= 0)]
        return AssignContext(pool=self.pool, occupancy=occupancy_from_array(others, self.pool),
                             direction=vehicle.direction, entry_time=w.now / 1000.0,
                             vehicle_id=vehicle.id, action_history=tuple(self.history))

    def sense_entry(self, vehicle: Vehicle) -> np.ndarray:
        """Pool energies heard at the entering vehicle's position right now."""
        w = self.world
        assigned = (w.ids != vehicle.id) & (w.tbs >= 0)
        coords = w.coords()
        snap = Snapshot(w.ids[assigned], coords[assigned], w.tbs[assigned])
        point = coords[w.index_of(vehicle.id)]
        return energy_at(snap, self.pool, self.channel, point, self.high_energy, self.idle_energy)

    def commit(self, vehicle: Vehicle, tb: int):
        self.world.set_tb(vehicle.id, int(tb))
        self.history.append(HistoryEntry(self.world.now / 1000.0, vehicle.direction, int(tb)))
        self.actions += 1

    def occupancy(self) -> np.ndarray:
        tbs = self.world.tbs
        return occupancy_from_array(tbs[tbs >= 0], self.pool)


def run_interval(env: SchedulingEnv, until: int | None = None) -> list[TxRecord]:
    """Records of every transmission up to the next arrival (or ``until``)."""
    return env.run_interval(horizon=until).records()


# --- statistics -------------------------------------------------------------------

@dataclass(frozen=True)
class PrrStats:
    mean: float
    median: float
    p1: float
    p25: float
    p75: float
    p99: float
    count: int

    @classmethod
    def from_samples(cls, prr) -> "PrrStats":
        prr = np.asarray(prr, dtype=float)
        if prr.size == 0:
            raise ValueError("no PRR samples")
        p1, p25, p50, p75, p99 = np.percentile(prr, [1, 25, 50, 75, 99])
        return cls(float(prr.mean()), float(p50), float(p1), float(p25), float(p75),
                   float(p99), int(prr.size))

    def as_row(self) -> dict:
        return {"count": self.count, "mean": self.mean, "median": self.median, "p1": self.p1,
                "p25": self.p25, "p75": self.p75, "p99": self.p99}


@dataclass
class Evaluation:
    stats: PrrStats
    log: TxLog
    actions: int
    env: SchedulingEnv


def evaluate(scheduler: Scheduler, scenario: Scenario, min_actions: int,
             rng: np.random.Generator, discard_transient: bool = True) -> Evaluation:
    """Closed-loop run: arrivals are assigned by ``scheduler``; PRR is collected
    after every initially-present vehicle has left, for ``min_actions`` actions."""
    if min_actions < 1:
        raise ValueError("min_actions must be at least 1")
    env = SchedulingEnv(scenario, scheduler, rng).reset()
    logs = []
    counted = 0
    collecting = not discard_transient
    while True:
        log = env.run_interval(collect=collecting)
        if collecting:
            logs.append(log)
            if counted >= min_actions:
                break
        v = env.admit()
        tb = scheduler.assign(env.context(v), rng)
        env.commit(v, tb)
        if not collecting and env.world.initial_remaining() == 0:
            collecting = True
        elif collecting:
            counted += 1
    full = TxLog.concat(logs)
    return Evaluation(PrrStats.from_samples(full.prr), full, counted, env)


# --- CSV output ---------------------------------------------------------------------

def write_tx_csv(path, log: TxLog):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ms", "tx_id", "tb", "eligible", "successes", "prr"])
        for t, v, tb, el, su in zip(log.tick, log.tx_id, log.tb, log.eligible, log.successes):
            w.writerow([int(t), int(v), int(tb), int(el), int(su), repr(float(su / el))])


def write_summary_csv(path, rows: list[dict]):
    path = Path(path)
    cols = ["scenario", "scheduler", "seed", "count", "mean", "median", "p1", "p25", "p75", "p99"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
