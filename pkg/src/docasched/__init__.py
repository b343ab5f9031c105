"""Resource scheduling for sidelink V2V broadcast in an out-of-coverage highway
stretch: simulator, baseline schedulers and an actor-critic scheduler."""
from .resource_grid import PoolConfig
from .world import DocaConfig
from .channel import ChannelConfig
from .sim import Scenario, SchedulingEnv, evaluate, brute_force_prr
from .presets import PRESETS, get_preset

__version__ = "0.1.0"
