"""Named scenario presets with their training defaults."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .channel import E1_IDEAL, E2_FULL, E2_RANGE, ChannelConfig
from .resource_grid import PoolConfig
from .rl import E1, E2, TrainConfig
from .sim import Scenario
from .world import DocaConfig


def kmh(v: float) -> float:
    return v / 3.6


@dataclass(frozen=True)
class ScenarioPreset:
    name: str
    doca: DocaConfig
    pool: PoolConfig
    channel: ChannelConfig
    train: TrainConfig
    # (preset name, epochs) stages run before this preset's own epochs
    curriculum: tuple = field(default=())

    @property
    def scenario(self) -> Scenario:
        return Scenario(self.name, self.doca, self.pool, self.channel)


def _e1(name, vehicles, speed_kmh, subchannels, actions, epochs, lr="1e-4", reward_stat="min"):
    return ScenarioPreset(
        name,
        DocaConfig(speed=kmh(speed_kmh), target_population=vehicles),
        PoolConfig(subchannels=subchannels, subframes=10),
        ChannelConfig(model=E1_IDEAL, tx_power=23.0),
        TrainConfig(actions_per_epoch=actions, epochs=epochs, lr_actor=lr, lr_critic=lr,
                    encoding=E1, reward_stat=reward_stat),
    )


def _e2(name, model, epochs, curriculum=()):
    return ScenarioPreset(
        name,
        DocaConfig(speed=kmh(50), target_population=30),
        PoolConfig(subchannels=2, subframes=10),
        ChannelConfig(model=model, tx_power=-5.0),
        TrainConfig(actions_per_epoch=120, epochs=epochs, lr_actor="e2:1e-3",
                    lr_critic="e2:1e-3", encoding=E2, history_k=30),
        curriculum,
    )


PRESETS: dict[str, ScenarioPreset] = {
    "E1-A": _e1("E1-A", 10, 140, 1, 20, 400),
    "E1-B": _e1("E1-B", 12, 140, 2, 30, 1400),
    # overloaded: some transmission always collides, so the worst PRR in a
    # window is pinned at 0 and only the mean PRR separates actions
    "E1-C": _e1("E1-C", 24, 70, 2, 48, 1200, lr="step:1e-4:1e-5:1000", reward_stat="mean"),
    # 760 simplified-channel epochs, then 170 on the full channel: 930 in total
    "E2-RANGE": _e2("E2-RANGE", E2_RANGE, 760),
    "E2": _e2("E2", E2_FULL, 170, curriculum=(("E2-RANGE", 760),)),
}


def get_preset(name: str) -> ScenarioPreset:
    try:
        return PRESETS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def with_train(preset: ScenarioPreset, **changes) -> ScenarioPreset:
    return replace(preset, train=replace(preset.train, **changes))
