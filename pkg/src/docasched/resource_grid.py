"""Periodic sidelink resource pool: subchannels x subframes of transmission blocks.

TB ids are laid out row-major over subchannels, so ids ``0..F-1`` fill
subchannel 0, ``F..2F-1`` fill subchannel 1, and so on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class PoolConfig:
    subchannels: int = 1
    subframes: int = 10
    subframe_duration: float = 1.0  # ms

    def __post_init__(self):
        if self.subchannels < 1 or self.subframes < 1:
            raise ValueError("pool needs at least one subchannel and one subframe")
        if not self.subframe_duration > 0:
            raise ValueError("subframe_duration must be positive")

    @property
    def n_tbs(self) -> int:
        return self.subchannels * self.subframes


def tb_coords(tb: int, pool: PoolConfig) -> tuple[int, int]:
    """Return ``(subchannel, subframe)`` of a TB id."""
    tb = int(tb)
    if not 0 <= tb < pool.n_tbs:
        raise ValueError(f"TB id {tb} outside pool of {pool.n_tbs} TBs")
    return divmod(tb, pool.subframes)


def tb_id(subchannel: int, subframe: int, pool: PoolConfig) -> int:
    if not (0 <= subchannel < pool.subchannels and 0 <= subframe < pool.subframes):
        raise ValueError(f"cell ({subchannel}, {subframe}) outside pool")
    return subchannel * pool.subframes + subframe


def tb_subframe(tbs, pool: PoolConfig):
    """Vectorized subframe lookup for an array of TB ids."""
    return np.asarray(tbs) % pool.subframes


def occupancy(assignments: Mapping[object, int], pool: PoolConfig) -> np.ndarray:
    """Number of vehicles assigned to each TB, as an int array of length N."""
    tbs = np.fromiter((int(t) for t in assignments.values()), dtype=np.int64,
                      count=len(assignments))
    return occupancy_from_array(tbs, pool)


def occupancy_from_array(tbs, pool: PoolConfig) -> np.ndarray:
    tbs = np.asarray(tbs, dtype=np.int64)
    if tbs.size and (tbs.min() < 0 or tbs.max() >= pool.n_tbs):
        raise ValueError("assignment references a TB outside the pool")
    return np.bincount(tbs, minlength=pool.n_tbs)
