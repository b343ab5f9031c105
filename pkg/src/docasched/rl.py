"""State encoders, rewards, the advantage actor-critic update and the
multi-worker training loop."""
from __future__ import annotations

import csv
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import nn
from .sched import AssignContext, HistoryEntry, Scheduler
from .sim import Scenario, SchedulingEnv, evaluate

E1 = "e1"
E2 = "e2"


class NoTransmissions(ValueError):
    """Raised by the reward functions for an empty PRR list."""


# --- seeding ---------------------------------------------------------------------

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    """Seed for worker ``index``: two splitmix64 rounds over (master, index)."""
    return splitmix64(splitmix64(int(master) & _MASK) ^ (int(index) & _MASK))


# --- states ------------------------------------------------------------------------

def encode_e1(occ) -> np.ndarray:
    """-1 for a free TB, 0 for exactly one vehicle, 1 for more than one."""
    occ = np.asarray(occ)
    if np.any(occ < 0):
        raise ValueError("occupancy counts must be non-negative")
    return np.where(occ == 0, -1, np.where(occ == 1, 0, 1)).astype(np.int64)


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=float) + 0.5).astype(np.int64)


def encode_e2(history: Sequence[HistoryEntry], direction: int, now: float, k: int = 30) -> np.ndarray:
    """3 x K matrix of the last K-1 actions plus the requester column.

    Row 0 holds whole seconds between an action and the next one (the newest
    action is measured against ``now``), row 1 the direction, row 2 the TB.
    Missing history is left-padded with ``(0, 0, -1)`` columns.
    """
    if k < 1:
        raise ValueError("K must be at least 1")
    hist = list(history)[-(k - 1):] if k > 1 else []
    for a, b in zip(hist, hist[1:]):
        if b.time < a.time:
            raise ValueError("history must be ordered oldest to newest")
    state = np.zeros((3, k), dtype=np.int64)
    state[2, :] = -1
    pad = k - 1 - len(hist)
    if hist:
        times = np.array([h.time for h in hist] + [now], dtype=float)
        gaps = np.diff(times)
        if np.any(gaps < 0):
            raise ValueError("requester arrives before the last action")
        state[0, pad:k - 1] = round_half_up(gaps)
        state[1, pad:k - 1] = [h.direction for h in hist]
        state[2, pad:k - 1] = [h.tb for h in hist]
    state[:, k - 1] = (0, direction, -1)
    return state


def e1_features(state) -> np.ndarray:
    return np.asarray(state, dtype=float)[None, :]


def e2_features(state, n_tbs: int) -> np.ndarray:
    x = np.asarray(state, dtype=float).copy()
    x[2] /= n_tbs
    return x


# --- rewards -----------------------------------------------------------------------

REWARD_STATS = ("min", "mean")


def _prr_array(prr) -> np.ndarray:
    prr = np.asarray(prr, dtype=float)
    if prr.size == 0:
        raise NoTransmissions("no transmissions in the reward window")
    if np.any((prr < 0) | (prr > 1)):
        raise ValueError("PRR values must lie in [0, 1]")
    return prr


def _penalty(prr: np.ndarray, stat: str) -> float:
    if stat not in REWARD_STATS:
        raise ValueError(f"unknown reward statistic {stat!r}")
    level = prr.min() if stat == "min" else prr.mean()
    return -10.0 * (1.0 - float(level))


def reward_e1(prr, stat: str = "min") -> float:
    """+10 when every PRR is at least 0.9, else ``-10 * (1 - stat(PRR))``.

    ``stat`` is the worst PRR by default; ``"mean"`` penalizes the average
    instead, which still ranks actions when some collision is unavoidable.
    """
    prr = _prr_array(prr)
    if prr.min() >= 0.9:
        return 10.0
    return _penalty(prr, stat)


def reward_e2(prr, unused: int, bonus: bool = True, stat: str = "min") -> float:
    """``reward_e1`` minus the number of unused TBs.

    With ``bonus=False`` the +10 branch is dropped and the PRR term is always
    ``-10 * (1 - stat(PRR))``.
    """
    if unused < 0:
        raise ValueError("unused resource count must be non-negative")
    if bonus:
        return reward_e1(prr, stat) - unused
    return _penalty(_prr_array(prr), stat) - unused


# --- policy ------------------------------------------------------------------------

SAMPLE = "sample"
GREEDY = "greedy"


def sample_index(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


def select_action(actor: nn.Network, features, mode: str = SAMPLE,
                  rng: np.random.Generator | None = None) -> int:
    probs = actor.forward(features)
    if mode == GREEDY:
        return int(np.argmax(probs))
    if mode != SAMPLE:
        raise ValueError(f"unknown mode {mode!r}")
    return sample_index(probs, rng.random())


class Transition(NamedTuple):
    state: np.ndarray  # network input
    action: int
    reward: float


def discounted_returns(rewards, discount: float = 1.0, bootstrap: float = 0.0) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


@dataclass
class UpdateInfo:
    returns: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    entropy: float


def actor_critic_update(trajectory: Sequence[Transition], actor: nn.Network, critic: nn.Network,
                        discount: float = 1.0, entropy_coef: float = 0.01,
                        reward_offset: float = 0.0):
    """Loss gradients for one worker's epoch.

    Actor loss ``-sum(log pi(a|s) * A + beta * H(pi(.|s)))`` and critic loss
    ``sum((R - V(s))**2)`` with undiscounted-by-default returns bootstrapped
    with 0 at the epoch end.  ``reward_offset`` is subtracted from every
    reward first (differential returns of the average-reward setting).
    Returns ``(actor_grads, critic_grads, info)``; descending these gradients
    ascends the policy objective.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    x = np.stack([t.state for t in trajectory])
    actions = np.array([t.action for t in trajectory])
    rewards = np.array([t.reward for t in trajectory], dtype=float)
    if not np.all(np.isfinite(rewards)):
        raise nn.TrainingDivergence("non-finite reward")
    returns = discounted_returns(rewards - reward_offset, discount)
    values, c_cache = critic.forward(x, return_cache=True)
    values = values[:, 0]
    adv = returns - values
    if not np.all(np.isfinite(adv)):
        raise nn.TrainingDivergence("non-finite advantage")
    probs, a_cache = actor.forward(x, return_cache=True)
    logp = np.log(np.clip(probs, 1e-300, None))
    ent = -(probs * logp).sum(axis=1)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(actions)), actions] = 1.0
    d_logits = (probs - onehot) * adv[:, None]
    if entropy_coef:
        d_logits += entropy_coef * probs * (logp + ent[:, None])
    actor_grads = actor.backward(x, d_logits, cache=a_cache, wrt="logits")
    critic_grads = critic.backward(x, (2.0 * (values - returns))[:, None], cache=c_cache)
    return actor_grads, critic_grads, UpdateInfo(returns, values, adv, float(ent.mean()))


# --- learning-rate schedules ---------------------------------------------------------

def lr_schedule(schedule):
    """Parse a schedule.

    ``1e-4`` or ``const:1e-4``: constant.  ``step:1e-4:1e-5:1000``: the second
    value once the epoch exceeds 1000.  ``e2:1e-3``: ``base / floor(1 + 0.01 * ep**1.1)``.
    """
    if isinstance(schedule, (int, float)):
        value = float(schedule)
        return lambda ep: value
    parts = str(schedule).split(":")
    kind = parts[0]
    try:
        if len(parts) == 1:
            value = float(kind)
            return lambda ep: value
        nums = [float(p) for p in parts[1:]]
    except ValueError:
        raise ValueError(f"bad learning-rate schedule {schedule!r}") from None
    if kind == "const" and len(nums) == 1:
        return lambda ep: nums[0]
    if kind == "step" and len(nums) == 3:
        hi, lo, at = nums
        return lambda ep: hi if ep <= at else lo
    if kind == "e2" and len(nums) == 1:
        base = nums[0]
        return lambda ep: base / np.floor(1.0 + 0.01 * ep ** 1.1)
    raise ValueError(f"bad learning-rate schedule {schedule!r}")


# --- training ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    workers: int = 16
    actions_per_epoch: int = 20
    epochs: int = 400
    lr_actor: str = "1e-4"
    lr_critic: str = "1e-4"
    discount: float = 1.0
    entropy_coef: float = 0.01
    # "average": returns of rewards minus a running average reward
    reward_baseline: str = "average"
    baseline_rate: float = 0.1
    seed: int = 0
    sync: bool = True
    encoding: str = E1
    history_k: int = 30
    reward_cap_periods: int = 10
    # statistic of the window's PRRs in the penalty branch: "min" or "mean"
    reward_stat: str = "min"
    e2_bonus: bool = True
    optimizer: str = "rmsprop"
    rms_decay: float = 0.99
    rms_eps: float = 1e-6
    conv_filters: int = 16
    hidden: int = 64
    branch_filters: int = 8

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.actions_per_epoch < 1:
            raise ValueError("actions_per_epoch must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be non-negative")
        if self.reward_baseline not in ("average", "none"):
            raise ValueError(f"unknown reward baseline {self.reward_baseline!r}")
        if self.reward_stat not in REWARD_STATS:
            raise ValueError(f"unknown reward statistic {self.reward_stat!r}")
        if self.encoding not in (E1, E2):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        lr_schedule(self.lr_actor), lr_schedule(self.lr_critic)

    def to_dict(self) -> dict:
        return asdict(self)


def build_networks(cfg: TrainConfig, n_tbs: int, rng: np.random.Generator):
    if cfg.encoding == E1:
        return (nn.e1_actor(n_tbs, cfg.conv_filters, cfg.hidden, rng=rng),
                nn.e1_critic(n_tbs, cfg.conv_filters, cfg.hidden, rng=rng))
    return (nn.e2_actor(cfg.history_k, n_tbs, cfg.branch_filters, cfg.conv_filters, rng=rng),
            nn.e2_critic(cfg.history_k, cfg.branch_filters, cfg.conv_filters, rng=rng))


def features_for(encoding: str, n_tbs: int, occupancy, history, direction, now_s, k):
    if encoding == E1:
        return e1_features(encode_e1(occupancy))
    return e2_features(encode_e2(history, direction, now_s, k), n_tbs)


class Worker:
    """One environment instance feeding (state, action, reward) triples."""

    def __init__(self, index: int, scenario: Scenario, cfg: TrainConfig, seed: int):
        self.index = index
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.env = SchedulingEnv(scenario, None, self.rng, history_len=max(cfg.history_k - 1, 1))
        self.env.reset()
        self.vehicle = None
        self.empty_windows = 0

    def observe(self) -> np.ndarray:
        env = self.env
        self.vehicle = v = env.admit()
        ctx = env.context(v)
        return features_for(self.cfg.encoding, env.pool.n_tbs, ctx.occupancy, env.history,
                            v.direction, env.now / 1000.0, self.cfg.history_k)

    def act(self, tb: int) -> float:
        env = self.env
        t0 = env.now
        env.commit(self.vehicle, tb)
        unused = int(np.count_nonzero(env.occupancy() == 0))
        cap = self.cfg.reward_cap_periods * env.scenario.doca.cam_period
        log = env.run_interval(horizon=t0 + cap)
        env.run_interval(collect=False)
        prr = log.prr
        if prr.size == 0:
            self.empty_windows += 1
            return 0.0 if self.cfg.encoding == E1 else -float(unused)
        if self.cfg.encoding == E1:
            return reward_e1(prr, self.cfg.reward_stat)
        return reward_e2(prr, unused, self.cfg.e2_bonus, self.cfg.reward_stat)


@dataclass
class TrainResult:
    actor: nn.Network
    critic: nn.Network
    curve: list[dict] = field(default_factory=list)
    diverged: bool = False
    empty_windows: int = 0


class _AverageReward:
    """Running average reward, updated once per submitted batch of rewards.

    ``offset`` returns the estimate to subtract for this batch (the batch mean
    itself on the first call).
    """

    def __init__(self, cfg: TrainConfig):
        self.enabled = cfg.reward_baseline == "average"
        self.rate = cfg.baseline_rate
        self.value = None

    def offset(self, rewards) -> float:
        if not self.enabled:
            return 0.0
        m = float(np.mean(rewards))
        self.value = m if self.value is None else self.value + self.rate * (m - self.value)
        return self.value


def _optimizer(cfg, net):
    if cfg.optimizer == "rmsprop":
        return nn.RMSProp(net, cfg.rms_decay, cfg.rms_eps)
    return nn.make_optimizer(cfg.optimizer, net)


def train(scenario: Scenario, cfg: TrainConfig, init=None, epoch_offset: int = 0,
          progress=None, stop=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of multi-worker actor-critic training.

    ``init`` optionally supplies ``(actor, critic)`` to continue from; epochs
    are numbered from ``epoch_offset`` for the learning-rate schedules.
    ``stop(curve)`` is checked after every completed epoch and ends training
    early when it returns True.
    """
    n_tbs = scenario.pool.n_tbs
    net_rng = np.random.default_rng(derive_seed(cfg.seed, 1 << 32))
    if init is None:
        actor, critic = build_networks(cfg, n_tbs, net_rng)
    else:
        actor, critic = init[0].clone(), init[1].clone()
    workers = [Worker(i, scenario, cfg, derive_seed(cfg.seed, i)) for i in range(cfg.workers)]
    result = TrainResult(actor, critic)
    runner = _train_sync if cfg.sync else _train_async
    try:
        runner(workers, actor, critic, cfg, epoch_offset, result, progress, stop)
    except nn.TrainingDivergence:
        result.diverged = True
    result.empty_windows = sum(w.empty_windows for w in workers)
    return result


def _curve_row(epoch, means, lr_a, lr_c):
    means = np.asarray(means, dtype=float)
    return {"epoch": epoch, "mean_reward": float(means.mean()), "min_reward": float(means.min()),
            "max_reward": float(means.max()), "lr_actor": lr_a, "lr_critic": lr_c}


def _train_sync(workers, actor, critic, cfg, offset, result, progress, stop):
    sched_a, sched_c = lr_schedule(cfg.lr_actor), lr_schedule(cfg.lr_critic)
    opt_a, opt_c = _optimizer(cfg, actor), _optimizer(cfg, critic)
    avg = _AverageReward(cfg)
    for ep in range(offset, offset + cfg.epochs):
        lr_a, lr_c = float(sched_a(ep)), float(sched_c(ep))
        good = ([p.copy() for p in actor.params], [p.copy() for p in critic.params])
        trajs = [[] for _ in workers]
        try:
            for _ in range(cfg.actions_per_epoch):
                feats = np.stack([w.observe() for w in workers])
                probs = actor.forward(feats)
                for w, x, p, traj in zip(workers, feats, probs, trajs):
                    a = sample_index(p, w.rng.random())
                    traj.append(Transition(x, a, w.act(a)))
            rho = avg.offset([tr.reward for t in trajs for tr in t])
            grads = [actor_critic_update(t, actor, critic, cfg.discount, cfg.entropy_coef, rho)
                     for t in trajs]
            for ga, gc, _ in grads:
                opt_a.step(actor, ga, lr_a)
                opt_c.step(critic, gc, lr_c)
        except nn.TrainingDivergence:
            actor.set_params(good[0])
            critic.set_params(good[1])
            raise
        means = [np.mean([t.reward for t in traj]) for traj in trajs]
        row = _curve_row(ep, means, lr_a, lr_c)
        result.curve.append(row)
        if progress is not None:
            progress(row)
        if stop is not None and stop(result.curve):
            break


def _train_async(workers, actor, critic, cfg, offset, result, progress, stop):
    """Lock-protected A3C: each worker thread snapshots, collects, and pushes."""
    sched_a, sched_c = lr_schedule(cfg.lr_actor), lr_schedule(cfg.lr_critic)
    opt_a, opt_c = _optimizer(cfg, actor), _optimizer(cfg, critic)
    lock = threading.Lock()
    avg = _AverageReward(cfg)
    rewards: dict[int, list[float]] = {}
    errors = []
    halted = threading.Event()

    def run(w):
        try:
            for ep in range(offset, offset + cfg.epochs):
                if halted.is_set():
                    break
                with lock:
                    a_snap, c_snap = actor.clone(), critic.clone()
                traj = []
                for _ in range(cfg.actions_per_epoch):
                    x = w.observe()
                    a = select_action(a_snap, x, SAMPLE, w.rng)
                    traj.append(Transition(x, a, w.act(a)))
                with lock:
                    rho = avg.offset([t.reward for t in traj])
                ga, gc, _ = actor_critic_update(traj, a_snap, c_snap, cfg.discount,
                                                cfg.entropy_coef, rho)
                with lock:
                    opt_a.step(actor, ga, float(sched_a(ep)))
                    opt_c.step(critic, gc, float(sched_c(ep)))
                    rewards.setdefault(ep, []).append(float(np.mean([t.reward for t in traj])))
                    if len(rewards[ep]) == len(workers):
                        row = _curve_row(ep, rewards[ep], float(sched_a(ep)), float(sched_c(ep)))
                        result.curve.append(row)
                        if progress is not None:
                            progress(row)
                        if stop is not None and stop(result.curve):
                            halted.set()
        except Exception as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(w,), daemon=True) for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    result.curve.sort(key=lambda r: r["epoch"])
    if errors:
        raise errors[0]


CURVE_COLUMNS = ["epoch", "mean_reward", "min_reward", "max_reward", "lr_actor", "lr_critic"]


def write_curve_csv(path, curve):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in CURVE_COLUMNS[1:]])


def read_curve_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


# --- deployment ------------------------------------------------------------------------

class RLScheduler(Scheduler):
    """Assigns TBs with a trained actor (greedy by default)."""

    name = "rl"

    def __init__(self, actor: nn.Network, encoding: str = E1, history_k: int = 30,
                 mode: str = GREEDY):
        self.actor = actor
        self.encoding = encoding
        self.history_k = history_k
        self.mode = mode

    def assign(self, ctx: AssignContext, rng):
        x = features_for(self.encoding, ctx.pool.n_tbs, ctx.occupancy, ctx.action_history,
                         ctx.direction, ctx.entry_time, self.history_k)
        return select_action(self.actor, x, self.mode, rng)


def evaluate_policy(actor: nn.Network, scenario: Scenario, min_actions: int,
                    rng: np.random.Generator, encoding: str = E1, history_k: int = 30,
                    mode: str = GREEDY):
    return evaluate(RLScheduler(actor, encoding, history_k, mode), scenario, min_actions, rng)
