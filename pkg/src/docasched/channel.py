"""Reception models: ideal single collision domain, fixed-range, and SINR with
WINNER+ B1 LOS pathloss plus correlated log-normal shadowing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

E1_IDEAL = "E1_IDEAL"
E2_RANGE = "E2_RANGE"
E2_FULL = "E2_FULL"
MODELS = (E1_IDEAL, E2_RANGE, E2_FULL)

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ChannelConfig:
    model: str = E1_IDEAL
    tx_power: float = 23.0  # dBm
    carrier_freq: float = 5.9  # GHz
    noise_power: float | None = None  # dBm; None -> power received at prr_range
    sinr_threshold: float = 2.0  # dB
    range: float = 120.0  # m, E2_RANGE cutoff
    prr_range: float = 100.0  # m, receivers counted in E2
    shadow_sigma: float = 3.0  # dB
    decorrelation_distance: float = 25.0  # m
    antenna_height: float = 1.5  # m
    min_pathloss_distance: float = 3.0  # m

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown channel model {self.model!r}")
        if self.shadow_sigma < 0:
            raise ValueError("shadow_sigma must be non-negative")
        if self.decorrelation_distance <= 0:
            raise ValueError("decorrelation_distance must be positive")
        if self.antenna_height <= 1.0:
            raise ValueError("antenna_height must exceed the 1 m effective-height offset")
        vals = [self.tx_power, self.carrier_freq, self.sinr_threshold, self.range,
                self.prr_range, self.min_pathloss_distance]
        if self.noise_power is not None:
            vals.append(self.noise_power)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("channel parameters must be finite")

    @property
    def noise_dbm(self) -> float:
        if self.noise_power is not None:
            return self.noise_power
        return calibrated_noise_power(self)

    @property
    def eligible_range(self) -> float:
        """Receivers farther than this do not count toward PRR."""
        return math.inf if self.model == E1_IDEAL else self.prr_range


def calibrated_noise_power(cfg: ChannelConfig) -> float:
    """Noise level equal to the shadow-free power received at ``prr_range``."""
    return cfg.tx_power - float(winner_b1_pathloss(cfg.prr_range, cfg))


def dbm_to_mw(dbm):
    return np.power(10.0, np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(np.asarray(mw, dtype=float))


# --- E1 ---------------------------------------------------------------------

def e1_receive(cotransmitters_same_tb: int, rx_transmits_this_subframe: bool) -> bool:
    return cotransmitters_same_tb == 0 and not rx_transmits_this_subframe


# --- pathloss -----------------------------------------------------------------

def breakpoint_distance(cfg: ChannelConfig) -> float:
    h_eff = cfg.antenna_height - 1.0
    return 4.0 * h_eff * h_eff * cfg.carrier_freq * 1e9 / SPEED_OF_LIGHT


def winner_b1_pathloss(d, cfg: ChannelConfig):
    """WINNER+ B1 LOS pathloss in dB (both ends at ``antenna_height``).

    Distances below ``min_pathloss_distance`` use the value at that distance.
    """
    d = np.maximum(np.asarray(d, dtype=float), cfg.min_pathloss_distance)
    fc = cfg.carrier_freq
    h_eff = cfg.antenna_height - 1.0
    near = 22.7 * np.log10(d) + 27.0 + 20.0 * math.log10(fc)
    far = (40.0 * np.log10(d) + 7.56 - 2 * 17.3 * math.log10(h_eff)
           + 2.7 * math.log10(fc))
    pl = np.where(d < breakpoint_distance(cfg), near, far)
    return float(pl) if pl.ndim == 0 else pl


def rx_power_dbm(d, shadow_db, cfg: ChannelConfig):
    return cfg.tx_power - winner_b1_pathloss(d, cfg) - shadow_db


# --- shadowing ----------------------------------------------------------------

@dataclass
class LinkShadowState:
    value: float  # dB
    separation: float  # m at last update


def new_link_shadow(rng: np.random.Generator, separation: float, sigma: float) -> LinkShadowState:
    return LinkShadowState(float(rng.normal(0.0, sigma)), float(separation))


def shadow_correlation(delta_d, decorrelation_distance: float):
    return np.exp(-np.abs(delta_d) / decorrelation_distance)


def update_shadowing(state: LinkShadowState, new_separation: float, rng: np.random.Generator,
                     sigma: float = 3.0, decorrelation_distance: float = 25.0) -> float:
    """Gudmundson AR(1) step driven by the change in link separation."""
    rho = float(shadow_correlation(new_separation - state.separation, decorrelation_distance))
    state.value = rho * state.value + math.sqrt(1.0 - rho * rho) * float(rng.normal(0.0, sigma))
    state.separation = float(new_separation)
    return state.value


class ShadowField:
    """Symmetric per-pair shadowing for a changing vehicle population."""

    def __init__(self, sigma: float, decorrelation_distance: float, rng: np.random.Generator,
                 capacity: int = 64):
        self.sigma = sigma
        self.decorrelation_distance = decorrelation_distance
        self.rng = rng
        self._slot: dict[int, int] = {}
        self._free: list[int] = []
        self._value = np.zeros((capacity, capacity))
        self._sep = np.full((capacity, capacity), np.nan)

    def _grow(self):
        cap = self._value.shape[0]
        value = np.zeros((2 * cap, 2 * cap))
        sep = np.full((2 * cap, 2 * cap), np.nan)
        value[:cap, :cap] = self._value
        sep[:cap, :cap] = self._sep
        self._value, self._sep = value, sep

    def _slot_for(self, vid: int) -> int:
        if vid in self._slot:
            return self._slot[vid]
        if not self._free:
            used = len(self._slot)
            if used >= self._value.shape[0]:
                self._grow()
            self._free = [s for s in range(self._value.shape[0])
                          if s not in set(self._slot.values())][::-1]
        s = self._free.pop()
        self._slot[vid] = s
        self._sep[s, :] = np.nan
        self._sep[:, s] = np.nan
        return s

    def forget(self, vids):
        for vid in vids:
            s = self._slot.pop(int(vid), None)
            if s is not None:
                self._free.append(s)

    def sync(self, ids, coords) -> np.ndarray:
        """Advance every link among ``ids`` to the given positions.

        Returns the symmetric ``(n, n)`` shadow matrix in ``ids`` order.
        New links start from a fresh N(0, sigma^2) draw.
        """
        ids = [int(i) for i in ids]
        n = len(ids)
        if n == 0:
            return np.zeros((0, 0))
        alive = set(ids)
        self.forget([vid for vid in list(self._slot) if vid not in alive])
        slots = np.array([self._slot_for(vid) for vid in ids])
        coords = np.asarray(coords, dtype=float)
        dist = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
        iu = np.triu_indices(n, 1)
        a, b = slots[iu[0]], slots[iu[1]]
        old = self._value[a, b]
        last = self._sep[a, b]
        d_now = dist[iu]
        fresh = np.isnan(last)
        noise = self.rng.normal(0.0, self.sigma, size=len(a))
        rho = shadow_correlation(np.where(fresh, 0.0, d_now - np.nan_to_num(last)),
                                 self.decorrelation_distance)
        new = np.where(fresh, noise, rho * old + np.sqrt(1.0 - rho * rho) * noise)
        self._value[a, b] = self._value[b, a] = new
        self._sep[a, b] = self._sep[b, a] = d_now
        out = np.zeros((n, n))
        out[iu] = new
        out[(iu[1], iu[0])] = new
        return out


# --- scalar reception rules ----------------------------------------------------

def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def sinr_db(tx, rx, interferers, cfg: ChannelConfig, shadows=None) -> float:
    """SINR (dB) at ``rx``; points are road-plane ``(x, y)`` pairs.

    ``shadows`` lists the shadowing in dB of the link to ``rx`` from ``tx``
    first and then from each interferer; ``None`` means no shadowing.
    """
    if shadows is None:
        shadows = [0.0] * (1 + len(interferers))
    signal = dbm_to_mw(rx_power_dbm(_dist(tx, rx), shadows[0], cfg))
    interference = sum(float(dbm_to_mw(rx_power_dbm(_dist(k, rx), sh, cfg)))
                       for k, sh in zip(interferers, shadows[1:]))
    noise = float(dbm_to_mw(cfg.noise_dbm))
    return float(mw_to_dbm(signal / (noise + interference)))


def sinr_receive(tx, rx, interferers_same_tb, rx_transmits: bool, cfg: ChannelConfig,
                 shadows=None) -> bool:
    if rx_transmits:
        return False
    return sinr_db(tx, rx, interferers_same_tb, cfg, shadows) >= cfg.sinr_threshold


def range_receive(tx, rx, interferers_same_tb, rx_transmits: bool, cfg: ChannelConfig) -> bool:
    if rx_transmits or _dist(tx, rx) > cfg.range:
        return False
    return all(_dist(k, rx) > cfg.range for k in interferers_same_tb)
