"""Command-line entry point: ``docasched train|eval|compare|inspect-checkpoint``.

Settings resolve in this order, later winning: built-in defaults, the preset,
``--config`` file, ``DOCASCHED_*`` environment variables, command-line flags.
Keys are dotted (``train.epochs``, ``doca.speed``, ``channel.tx_power``,
``mode4.keep_probability``, ``seed``, ``actions``).  Environment variables
map ``DOCASCHED_TRAIN__EPOCHS=5`` to ``train.epochs=5``.
"""
from __future__ import annotations

import argparse
import dataclasses
import inspect
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import nn, rl
from .channel import ChannelConfig
from .presets import PRESETS, ScenarioPreset, get_preset
from .resource_grid import PoolConfig
from .sched import Mode4Scheduler, make_scheduler
from .sim import Scenario, evaluate, write_summary_csv, write_tx_csv
from .world import DocaConfig

ENV_PREFIX = "DOCASCHED_"

SECTIONS = {"doca": DocaConfig, "pool": PoolConfig, "channel": ChannelConfig,
            "train": rl.TrainConfig, "mode4": Mode4Scheduler}
TOP_LEVEL = {"seed": int, "actions": int, "scheduler": str, "preset": str}


class UsageError(Exception):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


# --- config resolution ---------------------------------------------------------------

def _field_types(section: str) -> dict:
    cls = SECTIONS[section]
    if dataclasses.is_dataclass(cls):
        defaults = cls()
        return {f.name: type(getattr(defaults, f.name)) for f in dataclasses.fields(cls)}
    params = inspect.signature(cls.__init__).parameters
    return {n: type(p.default) for n, p in params.items() if n != "self"}


def _coerce(key: str, raw):
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise UsageError(f"unknown config section in {key!r}", key)
        types = _field_types(section)
        if name not in types:
            raise UsageError(f"unknown config key {key!r}", key)
        kind = types[name]
    elif key in TOP_LEVEL:
        kind = TOP_LEVEL[key]
    else:
        raise UsageError(f"unknown config key {key!r}", key)
    if not isinstance(raw, str):
        if kind is tuple and isinstance(raw, list):
            return tuple(raw)
        return raw
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(v) for v in raw.strip("()[] ").split(","))
        if kind is type(None):
            return None if raw.strip().lower() in ("none", "null", "") else float(raw)
    except ValueError:
        raise UsageError(f"bad value {raw!r} for {key}", key) from None
    return raw


def parse_pairs(pairs, source: str) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"{source}: expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip()
        out[k] = _coerce(k, v.strip())
    return out


def read_config_file(path) -> dict:
    """JSON (flat dotted keys or nested sections) or ``key = value`` lines."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc.msg} at line {exc.lineno}") from None
        flat = {}
        for k, v in data.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    flat[f"{k}.{kk}"] = vv
            else:
                flat[k] = v
        return {k: _coerce(k, v) for k, v in flat.items()}
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    return parse_pairs([ln for ln in lines if ln], f"config file {path}")


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    pairs = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            pairs.append(f"{key}={environ[name]}")
    return parse_pairs(pairs, "environment")


@dataclasses.dataclass
class Resolved:
    preset: ScenarioPreset
    doca: DocaConfig
    pool: PoolConfig
    channel: ChannelConfig
    train: rl.TrainConfig
    mode4: dict
    seed: int = 0
    actions: int = 1000
    scheduler: str = "rl"

    @property
    def scenario(self) -> Scenario:
        return Scenario(self.preset.name, self.doca, self.pool, self.channel)

    def to_dict(self) -> dict:
        return {"preset": self.preset.name, "seed": self.seed, "actions": self.actions,
                "scheduler": self.scheduler, "doca": dataclasses.asdict(self.doca),
                "pool": dataclasses.asdict(self.pool), "channel": dataclasses.asdict(self.channel),
                "train": self.train.to_dict(), "mode4": dict(self.mode4),
                "curriculum": [list(s) for s in self.preset.curriculum]}


def resolve(args, environ=None) -> Resolved:
    layers = []
    if getattr(args, "config", None):
        layers.append(read_config_file(args.config))
    layers.append(env_overrides(environ))
    flags = {}
    for key, attr in (("preset", "preset"), ("seed", "seed"), ("actions", "actions"),
                      ("scheduler", "scheduler"), ("train.epochs", "epochs"),
                      ("train.workers", "workers")):
        v = getattr(args, attr, None)
        if v is not None:
            flags[key] = v
    if getattr(args, "sync", None) is not None:
        flags["train.sync"] = args.sync
    flags.update(parse_pairs(getattr(args, "set", None) or [], "--set"))
    layers.append(flags)

    preset_name = "E1-A"
    for layer in layers:
        preset_name = layer.get("preset", preset_name)
    try:
        preset = get_preset(preset_name)
    except ValueError as exc:
        raise UsageError(str(exc), "preset") from None

    merged: dict = {}
    for layer in layers:
        merged.update(layer)
    sections = {s: {} for s in SECTIONS}
    top = {}
    for k, v in merged.items():
        if "." in k:
            s, n = k.split(".", 1)
            sections[s][n] = v
        elif k != "preset":
            top[k] = v
    try:
        doca = dataclasses.replace(preset.doca, **sections["doca"])
        pool = dataclasses.replace(preset.pool, **sections["pool"])
        channel = dataclasses.replace(preset.channel, **sections["channel"])
        train = dataclasses.replace(preset.train, **sections["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return Resolved(preset, doca, pool, channel, train, sections["mode4"],
                    seed=int(top.get("seed", 0)), actions=int(top.get("actions", 1000)),
                    scheduler=str(top.get("scheduler", "rl")))


# --- commands ----------------------------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc.strerror}", "out") from None
    return out


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_train(args) -> int:
    cfg = resolve(args)
    out = _out_dir(args.out)
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    stages = [(name, epochs) for name, epochs in cfg.preset.curriculum]
    stages.append((None, train_cfg.epochs))
    curve: list[dict] = []
    nets = None
    offset = 0
    diverged = False
    stage_log = []
    t0 = time.time()
    for name, epochs in stages:
        scenario = cfg.scenario
        if name is not None:
            stage = get_preset(name)
            scenario = Scenario(stage.name, cfg.doca, cfg.pool,
                                dataclasses.replace(cfg.channel, model=stage.channel.model))
        stage_cfg = dataclasses.replace(train_cfg, epochs=epochs)
        every = max(1, epochs // 20)

        def progress(row, label=scenario.name):
            if row["epoch"] % every == 0:
                _log(f"[{label}] epoch {row['epoch']} mean reward {row['mean_reward']:.3f}")

        res = rl.train(scenario, stage_cfg, init=nets, epoch_offset=offset,
                       progress=None if args.quiet else progress)
        curve.extend(res.curve)
        nets = (res.actor, res.critic)
        stage_log.append({"scenario": scenario.name, "channel": scenario.channel.model,
                          "epochs": epochs, "empty_reward_windows": res.empty_windows})
        offset += epochs
        if res.diverged:
            diverged = True
            break
    meta = {"preset": cfg.preset.name, "seed": cfg.seed, "encoding": train_cfg.encoding,
            "history_k": train_cfg.history_k, "n_tbs": cfg.pool.n_tbs,
            "epochs_completed": len(curve), "diverged": diverged}
    nn.save_checkpoint(out / "checkpoint.bin", nets[0], nets[1], meta)
    rl.write_curve_csv(out / "learning_curve.csv", curve)
    manifest = {"command": "train", "config": cfg.to_dict(), "stages": stage_log,
                "diverged": diverged, "wall_seconds": round(time.time() - t0, 3),
                "files": ["checkpoint.bin", "learning_curve.csv"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if diverged:
        raise RuntimeError("training diverged; last good parameters saved")
    last = curve[-1]["mean_reward"] if curve else float("nan")
    print(f"trained {cfg.preset.name} for {len(curve)} epochs, final mean reward {last:.3f}")
    return 0


def _load_actor(path, cfg: Resolved):
    if path is None:
        raise UsageError("--checkpoint is required for the rl scheduler", "checkpoint")
    try:
        header = nn.read_header(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc.strerror}", "checkpoint") from None
    expect_actor, _ = rl.build_networks(cfg.train, cfg.pool.n_tbs, np.random.default_rng(0))
    actor, _, meta = nn.load_checkpoint(path, expect_actor=expect_actor.describe())
    return actor, header


def _scheduler(kind: str, cfg: Resolved, checkpoint):
    if kind == "rl":
        actor, _ = _load_actor(checkpoint, cfg)
        return rl.RLScheduler(actor, cfg.train.encoding, cfg.train.history_k)
    params = dict(cfg.mode4) if kind == "mode4" else {}
    try:
        return make_scheduler(kind, **params)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc), "scheduler") from None


def cmd_eval(args) -> int:
    cfg = resolve(args)
    out = _out_dir(args.out)
    if args.checkpoint and cfg.scheduler != "rl":
        raise UsageError("--checkpoint only applies to the rl scheduler", "checkpoint")
    sched = _scheduler(cfg.scheduler, cfg, args.checkpoint)
    ev = evaluate(sched, cfg.scenario, cfg.actions, np.random.default_rng(cfg.seed))
    row = {"scenario": cfg.preset.name, "scheduler": cfg.scheduler, "seed": cfg.seed,
           **ev.stats.as_row()}
    write_summary_csv(out / "summary.csv", [row])
    write_tx_csv(out / "transmissions.csv", ev.log)
    (out / "manifest.json").write_text(json.dumps(
        {"command": "eval", "config": cfg.to_dict(), "checkpoint": args.checkpoint,
         "actions_evaluated": ev.actions}, indent=2, sort_keys=True))
    print(f"{cfg.preset.name} {cfg.scheduler}: mean PRR {ev.stats.mean:.4f} "
          f"median {ev.stats.median:.4f} over {ev.stats.count} transmissions")
    return 0


def cmd_compare(args) -> int:
    cfg = resolve(args)
    out = _out_dir(args.out)
    kinds = [k.strip() for k in args.schedulers.split(",") if k.strip()]
    if len(kinds) < 2:
        raise UsageError("compare needs at least two schedulers", "schedulers")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = []
    from .sim import PrrStats
    for kind in kinds:
        samples = []
        for seed in seeds:
            sched = _scheduler(kind, cfg, args.checkpoint)
            ev = evaluate(sched, cfg.scenario, cfg.actions, np.random.default_rng(seed))
            samples.append(ev.log.prr)
        stats = PrrStats.from_samples(np.concatenate(samples))
        rows.append({"scenario": cfg.preset.name, "scheduler": kind,
                     "seed": ";".join(map(str, seeds)), **stats.as_row()})
        print(f"{kind}: mean PRR {stats.mean:.4f} median {stats.median:.4f}")
    write_summary_csv(out / "compare.csv", rows)
    (out / "manifest.json").write_text(json.dumps(
        {"command": "compare", "config": cfg.to_dict(), "schedulers": kinds, "seeds": seeds,
         "checkpoint": args.checkpoint}, indent=2, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    try:
        header = nn.read_header(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}",
                         "checkpoint") from None
    actor = nn.Network.from_description(header["actor"])
    critic = nn.Network.from_description(header["critic"])
    summary = {"format": header["format"], "version": header["version"], "meta": header["meta"],
               "actor": {"input_shape": actor.input_shape, "layers": header["actor"]["layers"],
                         "parameters": actor.n_params},
               "critic": {"input_shape": critic.input_shape, "layers": header["critic"]["layers"],
                          "parameters": critic.n_params}}
    print(json.dumps(summary, indent=2, default=list))
    return 0


# --- argument parsing -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="docasched", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, scheduler=False):
        sp.add_argument("--preset", help=f"one of {', '.join(PRESETS)} (default E1-A)")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", default="runs/latest", help="output directory")
        sp.add_argument("--config", help="key=value or JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--actions", type=int, help="minimum evaluated actions")
        mode = sp.add_mutually_exclusive_group()
        mode.add_argument("--sync", dest="sync", action="store_true", default=None)
        mode.add_argument("--async", dest="sync", action="store_false")
        if scheduler:
            sp.add_argument("--scheduler", help="random, roundrobin, mode4 or rl")
            sp.add_argument("--checkpoint")

    t = sub.add_parser("train", help="train the actor-critic scheduler")
    common(t)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one scheduler")
    common(e, scheduler=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="evaluate several schedulers side by side")
    common(c, scheduler=True)
    c.add_argument("--schedulers", default="rl,mode4,random")
    c.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    c.set_defaults(func=cmd_compare)

    i = sub.add_parser("inspect-checkpoint", help="print a checkpoint header")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def _error_line(code: str, message: str, key=None) -> str:
    message = " ".join(str(message).split())
    extra = f" key={key}" if key else ""
    return f"docasched: error: code={code}{extra} msg={json.dumps(message)}"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(_error_line("usage", exc, exc.key), file=sys.stderr)
        return 2
    except nn.ArchitectureMismatch as exc:
        print(_error_line("checkpoint", exc), file=sys.stderr)
        return 3
    except (ValueError, RuntimeError, OSError) as exc:
        print(_error_line(type(exc).__name__, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
