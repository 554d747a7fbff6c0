"""``sgi`` command line: collect, pretrain, finetune, eval, verify.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import agent, envsim
from . import evalstats as es
from .checkpoint import load_checkpoint, save_checkpoint
from .nets import NetConfig

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2
SCHEMA_VERSION = 1
REGIMES = ("random", "exploratory", "policy", "mixed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    seed: int = 0
    episode_cap: int = envsim.EPISODE_CAP


@dataclass(frozen=True)
class DatasetConfig:
    regime: str = "random"
    transitions: int = 20_000
    seed: int = 0
    action_repeat: bool = True
    checkpoints: tuple[str, ...] = ()
    epsilon: float = 0.1
    epsilon_end: float | None = None
    epsilon_horizon: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"dataset.regime must be one of {REGIMES}, got {self.regime!r}")
        if self.transitions <= 0:
            raise ConfigError("dataset.transitions must be positive")

    def schedule(self) -> envsim.EpsilonSchedule:
        end = self.epsilon if self.epsilon_end is None else self.epsilon_end
        return envsim.EpsilonSchedule(self.epsilon, end, self.epsilon_horizon)


@dataclass(frozen=True)
class EvalConfig:
    resamples: int = 5000
    level: float = 0.95
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seeds: tuple[int, ...] = (0,)
    env: EnvConfig = field(default_factory=EnvConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetConfig = field(default_factory=NetConfig)
    pretrain: agent.PretrainConfig = field(default_factory=agent.PretrainConfig)
    finetune: agent.FinetuneConfig = field(default_factory=agent.FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def config_hash(self) -> str:
        return agent.config_hash(self)


# fields that are filled from elsewhere in the document rather than set directly
_DERIVED = {
    agent.PretrainConfig: {"net"},
    agent.FinetuneConfig: {"net", "env_seed", "seed"},
}


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return build_dataclass(tp, value, where)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} entries")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is frozenset or origin is frozenset:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def build_dataclass(cls, data, where: str = "config"):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys and wrong types."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init} - _DERIVED.get(cls, set())
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def resolve_config(raw: dict | None) -> ExperimentConfig:
    cfg = build_dataclass(ExperimentConfig, raw or {})
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg.schema_version}")
    if not cfg.seeds:
        raise ConfigError("seeds must not be empty")
    pre = dataclasses.replace(cfg.pretrain, net=cfg.network)
    fin = dataclasses.replace(cfg.finetune, net=cfg.network, env_seed=cfg.env.seed, seed=cfg.seeds[0])
    return dataclasses.replace(cfg, pretrain=pre, finetune=fin)


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return resolve_config({})
    text = Path(path).read_text()
    if path.endswith(".json"):
        raw = json.loads(text)
    else:
        import yaml

        raw = yaml.safe_load(text)
    return resolve_config(raw)


def parse_seeds(text: str) -> list[int]:
    """'3', '0,2,5' or an inclusive range '0..9'."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo_i, hi_i + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def _stamp(record: dict, cfg: ExperimentConfig) -> dict:
    return {"run_config": cfg.config_hash(), "version": __version__, **record}


class JsonlLog:
    """Append-only line-delimited JSON log."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# subcommands


def cmd_collect(args, cfg: ExperimentConfig) -> int:
    ds = cfg.dataset
    if args.regime:
        ds = dataclasses.replace(ds, regime=args.regime)
    if args.n is not None:
        ds = dataclasses.replace(ds, transitions=args.n)
    if args.seed is not None:
        ds = dataclasses.replace(ds, seed=args.seed)
    if args.checkpoint:
        ds = dataclasses.replace(ds, checkpoints=tuple(args.checkpoint))
    cfg = dataclasses.replace(cfg, dataset=ds)
    env = envsim.GridPixEnv(cfg.env.seed, cfg.env.episode_cap)
    if ds.regime in ("random", "exploratory"):
        data = envsim.collect_random(env, ds.transitions, ds.seed, action_repeat=ds.action_repeat,
                                     random_starts=ds.regime == "exploratory")
    else:
        if not ds.checkpoints:
            raise ConfigError(f"regime {ds.regime!r} needs at least one --checkpoint")
        cks = [load_checkpoint(p) for p in ds.checkpoints]
        for path, ck in zip(ds.checkpoints, cks):
            ck.provenance.setdefault("id", Path(path).stem)
        if ds.regime == "policy":
            if len(cks) != 1:
                raise ConfigError("regime 'policy' takes exactly one checkpoint")
            data = envsim.collect_policy(env, cks[0], ds.schedule(), ds.transitions, ds.seed)
        else:
            per = ds.transitions // len(cks)
            data = envsim.build_mixed_dataset(cks, per, env, ds.seed, epsilon=ds.schedule())
    data.metadata.update({"config_hash": cfg.config_hash(), "tool_version": __version__, "regime": ds.regime})
    out = Path(args.out)
    envsim.write_dataset(data, out)
    stats = envsim.dataset_stats(data)
    stats["action_histogram"] = [int(x) for x in stats["action_histogram"]]
    print(json.dumps({"dataset": str(out), "sha256": file_digest(out), **stats}, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    pre = cfg.pretrain
    if args.objectives is not None:
        pre = dataclasses.replace(pre, objectives=args.objectives)
    if args.steps is not None:
        pre = dataclasses.replace(pre, steps=args.steps)
    if args.seed is not None:
        pre = dataclasses.replace(pre, seed=args.seed)
    cfg = dataclasses.replace(cfg, pretrain=pre)
    data = envsim.read_dataset(args.dataset)
    frame_shape = (envsim.STACK,) + data.episodes[0].frames.shape[1:]
    if frame_shape != cfg.network.encoder.in_shape:
        raise ConfigError(f"dataset observations {frame_shape} do not fit encoder input "
                          f"{cfg.network.encoder.in_shape}")
    out = Path(args.out)
    log = JsonlLog(args.log or out.with_suffix(".jsonl"))
    ck, records = agent.pretrain(data, pre, progress=lambda r: log.write(_stamp(r, cfg)))
    ck.provenance.update({"run_config": cfg.config_hash(), "version": __version__,
                          "dataset_sha256": file_digest(args.dataset)})
    save_checkpoint(ck, out)
    last = records[-1] if records else {}
    print(json.dumps({"checkpoint": str(out), "sha256": file_digest(out),
                      "objectives": ck.provenance["objectives"], "final": last}, sort_keys=True))
    return EXIT_OK


def _finetune_one(seed: int, ck_path, cfg: ExperimentConfig, out_dir: Path, force: bool) -> dict:
    fin = dataclasses.replace(cfg.finetune, seed=seed)
    ck = load_checkpoint(ck_path) if ck_path else None
    env = envsim.GridPixEnv(cfg.env.seed, cfg.env.episode_cap)
    log = JsonlLog(out_dir / f"log_seed{seed}.jsonl")
    res = agent.finetune(env, ck, fin, force=force, progress=lambda r: log.write(_stamp(r, cfg)))
    log.write(_stamp(res.log[-1], cfg))
    with (out_dir / f"returns_seed{seed}.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "return"])
        for i, r in enumerate(res.eval_returns):
            w.writerow([i, repr(float(r))])
    final = agent.AgentCheckpoint(res.network, {
        "id": f"finetune-seed{seed}", "pretrained": ck is not None, "scheme": fin.scheme,
        "trained_blocks": [g.name for g in res.groups], "run_config": cfg.config_hash(), "version": __version__,
    })
    save_checkpoint(final, out_dir / f"agent_seed{seed}.sgic")
    for snap in res.snapshots:
        snap.provenance.update({"run_config": cfg.config_hash(), "version": __version__})
        save_checkpoint(snap, out_dir / f"{snap.provenance['id']}.sgic")
    return {"seed": seed, "mean_return": res.eval_mean, "episodes_trained": len(res.episode_returns)}


def cmd_finetune(args, cfg: ExperimentConfig) -> int:
    if not args.scratch and not args.checkpoint:
        raise ConfigError("pass a checkpoint path or --scratch")
    fin = cfg.finetune
    if args.scheme:
        fin = dataclasses.replace(fin, scheme=args.scheme)
    if args.budget is not None:
        fin = dataclasses.replace(fin, budget=args.budget)
    cfg = dataclasses.replace(cfg, finetune=fin)
    seeds = parse_seeds(args.seeds) if args.seeds else list(cfg.seeds)
    ck_path = None if args.scratch else args.checkpoint
    if ck_path is not None:
        ck = load_checkpoint(ck_path)  # fail fast on format or fingerprint problems
        if ck.fingerprint != cfg.network.fingerprint() and not args.force:
            raise agent.CheckpointFormatError("checkpoint architecture fingerprint differs from the config "
                                              "(use --force to override)")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = max(1, min(len(seeds), int(os.environ.get("SGI_THREADS", os.cpu_count() or 1))))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda s: _finetune_one(s, ck_path, cfg, out_dir, args.force), seeds))
    summary = {"scheme": fin.scheme, "scratch": ck_path is None, "runs": results,
               "mean_return": float(np.mean([r["mean_return"] for r in results]))}
    (out_dir / "summary.json").write_text(json.dumps(_stamp(summary, cfg), indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    table = es.read_scores_csv(args.scores)
    report = es.summarize(table, n_resamples=args.resamples or cfg.eval.resamples, level=cfg.eval.level,
                          seed=cfg.eval.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        es.write_report(report, args.out)
    print(text)
    return EXIT_OK


def cmd_verify(args, cfg: ExperimentConfig) -> int:
    from . import verify

    results = verify.run_all()
    print(verify.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sgi {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        return sp

    c = with_config(sub.add_parser("collect", help="write an offline dataset"))
    c.add_argument("--out", required=True)
    c.add_argument("--regime", choices=REGIMES)
    c.add_argument("--n", type=int, help="number of transitions")
    c.add_argument("--seed", type=int)
    c.add_argument("--checkpoint", action="append", help="behaviour checkpoint (repeat for mixed)")
    c.set_defaults(func=cmd_collect)

    c = with_config(sub.add_parser("pretrain", help="self-supervised pretraining on a dataset"))
    c.add_argument("--dataset", required=True)
    c.add_argument("--out", required=True, help="checkpoint path")
    c.add_argument("--log", help="JSONL log path (default: next to the checkpoint)")
    c.add_argument("--objectives", help="objective mask, e.g. S,G,I")
    c.add_argument("--steps", type=int)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_pretrain)

    c = with_config(sub.add_parser("finetune", help="DQN finetuning plus evaluation"))
    c.add_argument("checkpoint", nargs="?")
    c.add_argument("--scratch", action="store_true", help="ignore any checkpoint and start from random weights")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--scheme", choices=agent.SCHEMES, help="default: reduced")
    c.add_argument("--seeds", help="'0..9', '1,3' or '4'")
    c.add_argument("--budget", type=int)
    c.add_argument("--force", action="store_true", help="accept an architecture fingerprint mismatch")
    c.set_defaults(func=cmd_finetune)

    c = with_config(sub.add_parser("eval", help="aggregate a score CSV"))
    c.add_argument("scores")
    c.add_argument("--out")
    c.add_argument("--resamples", type=int)
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("verify", help="gradient checks and invariant suite")
    c.set_defaults(func=cmd_verify, config=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "pretrain" and args.objectives is not None and not args.objectives.strip():
            raise ConfigError("--objectives must name at least one objective")
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, agent.CheckpointFormatError, envsim.DatasetFormatError, es.ScoreFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
