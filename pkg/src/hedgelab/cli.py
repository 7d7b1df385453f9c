"""Command-line entry point: ``hedgelab <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal assertion.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import pandas as pd

from . import __version__
from .backtest import (
    CheckpointMissingError,
    WalkForwardPlan,
    long_horizon_table,
    plan_episodes,
    run_long_horizon,
    run_walk_forward,
    write_bundle,
)
from .config import ConfigError, RunConfig, load_config, parse_years
from .distill.gp import write_hof
from .distill.pipeline import distill
from .marketdata import (
    DataCoverageError,
    HeaderMismatchError,
    chain_fingerprint,
    clean,
    load_chain,
    synthesize_market,
    write_chain,
)
from .policies import NeuralActor
from .td3 import ActorCheckpoint, train

log = logging.getLogger("hedgelab")

COMMANDS = ("ingest", "synth", "train", "backtest", "distill", "long-horizon", "report")
EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 2, 3, 4


class DataError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hedgelab", description="Deep-hedging laboratory")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="seed for training and distillation")
    p.add_argument("--out", help="output directory")
    p.add_argument("--years", help="test years, e.g. 2019 or 2017-2019 or 2017,2019")
    p.add_argument("--policies", help="comma-separated policies to evaluate")
    p.add_argument("--bootstrap-reps", type=int, help="bootstrap replications")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. td3.episodes=5000 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"out={json.dumps(args.out)}")
    if args.years:
        overrides.append(f"years.test={json.dumps(list(parse_years(args.years)))}")
    if args.policies:
        overrides.append(f"policies={json.dumps([s.strip() for s in args.policies.split(',') if s.strip()])}")
    if args.bootstrap_reps is not None:
        if args.bootstrap_reps < 1:
            raise ConfigError("--bootstrap-reps must be positive")
        overrides.append(f"bootstrap_reps={args.bootstrap_reps}")
    cfg = load_config(args.config, overrides)
    for y in cfg.years.test:
        if y - 2 < cfg.years.first:
            raise ConfigError(f"test year {y} needs at least one training year >= years.first={cfg.years.first}")
    try:
        [WalkForwardPlan.for_year(y, cfg.years.first, cfg.policies) for y in cfg.years.test]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def write_manifest(d: str, cfg: RunConfig, command: str, **extra) -> None:
    os.makedirs(d, exist_ok=True)
    man = {"tool": "hedgelab", "version": __version__, "command": command, "config_hash": cfg.hash(),
           "seed": cfg.seed, "config": cfg.to_dict(), **extra}
    with open(os.path.join(d, "manifest.json"), "w") as fh:
        fh.write(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n")


def chain_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.out, "chain.csv")


def read_chain(cfg: RunConfig) -> pd.DataFrame:
    path = chain_path(cfg)
    if not os.path.exists(path):
        raise DataError(f"{path} not found; run `hedgelab ingest` or `hedgelab synth` with the same --out first")
    df, rep = load_chain(path)
    if rep.n_rejected:
        raise DataError(f"{path} has {rep.n_rejected} malformed rows; re-run ingest")
    return df


def checkpoint_file(cfg: RunConfig, year: int) -> str:
    return os.path.join(cfg.out, "train", str(year), "checkpoint.npz")


def load_checkpoint(cfg: RunConfig, year: int) -> ActorCheckpoint:
    path = checkpoint_file(cfg, year)
    if not os.path.exists(path):
        raise DataError(f"no trained checkpoint for test year {year} at {path}; run `hedgelab train` first")
    return ActorCheckpoint.load(path)


# --------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig) -> None:
    if not cfg.data.chain:
        raise ConfigError("data.chain must name the option-chain file to ingest")
    if not os.path.exists(cfg.data.chain):
        raise DataError(f"chain file {cfg.data.chain} not found")
    df, rej = load_chain(cfg.data.chain, cfg.data.column_map or None, cfg.data.delimiter)
    kept, rep = clean(df, cfg.data.region)
    if len(kept) == 0:
        raise DataError("no quotes survive cleaning")
    os.makedirs(cfg.out, exist_ok=True)
    write_chain(kept, chain_path(cfg))
    with open(os.path.join(cfg.out, "ingest_report.tsv"), "w") as fh:
        fh.write("# load\n" + rej.to_text() + "# clean\n" + rep.to_text())
    write_manifest(cfg.out, cfg, "ingest", source=cfg.data.chain, data_fingerprint=chain_fingerprint(kept),
                   rows=len(kept))
    print(f"ingested {len(kept)} quotes ({rej.n_rejected} rejected, {rep.n_input - rep.n_kept} cleaned out)")


def cmd_synth(cfg: RunConfig) -> None:
    df = synthesize_market(cfg.synthetic)
    os.makedirs(cfg.out, exist_ok=True)
    write_chain(df, chain_path(cfg))
    write_manifest(cfg.out, cfg, "synth", data_fingerprint=chain_fingerprint(df), rows=len(df))
    print(f"wrote {len(df)} synthetic quotes to {chain_path(cfg)}")


def cmd_train(cfg: RunConfig) -> None:
    quotes = read_chain(cfg)
    for y in cfg.years.test:
        plan = WalkForwardPlan.for_year(y, cfg.years.first, cfg.policies, (cfg.seed,))
        train_eps, val_eps, _ = plan_episodes(plan, quotes)
        res = train(train_eps, replace(cfg.td3, seed=cfg.seed), val_eps, cfg.reward, cfg.cost,
                    lambda h: log.info("year %d %s", y, h))
        d = os.path.dirname(checkpoint_file(cfg, y))
        os.makedirs(d, exist_ok=True)
        res.checkpoint.save(checkpoint_file(cfg, y))
        keys = sorted({k for h in res.history for k in h})
        lines = ["\t".join(keys)] + ["\t".join(str(h.get(k, "")) for k in keys) for h in res.history]
        with open(os.path.join(d, "history.tsv"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        write_manifest(d, cfg, "train", test_year=y, train_years=list(plan.train_years),
                       validation_year=plan.validation_year, data_fingerprint=chain_fingerprint(quotes),
                       episodes_trained=res.checkpoint.episodes_trained, val_reward=res.checkpoint.val_reward)
        print(f"year {y}: checkpoint after {res.checkpoint.episodes_trained} episodes, "
              f"validation reward {res.checkpoint.val_reward}")


def cmd_backtest(cfg: RunConfig) -> None:
    ckpts = {y: load_checkpoint(cfg, y) for y in cfg.years.test}
    quotes = read_chain(cfg)
    out = os.path.join(cfg.out, "backtest")
    for y in cfg.years.test:
        plan = WalkForwardPlan.for_year(y, cfg.years.first, cfg.policies, (cfg.seed,))
        rep = run_walk_forward(plan, quotes, cfg.backtest(), seed=cfg.seed, checkpoint=ckpts[y],
                               checkpoint_path="checkpoint.npz")
        d = write_bundle(rep, out, cfg.backtest(), cfg.to_dict())
        gap = rep.diagnostics.gap_rows[0]
        print(f"year {y}: {rep.episode_counts['test']} test episodes, mean agent-BS gap {gap.mean_gap:.4f}; "
              f"bundle in {d}")


def cmd_distill(cfg: RunConfig) -> None:
    quotes = read_chain(cfg)
    for y in cfg.years.test:
        agent = NeuralActor(load_checkpoint(cfg, y), checkpoint_file(cfg, y))
        plan = WalkForwardPlan.for_year(y, cfg.years.first, cfg.policies, (cfg.seed,))
        train_eps, val_eps, _ = plan_episodes(plan, quotes)
        dcfg = replace(cfg.distill, seed=cfg.distill.seed + cfg.seed,
                       gp=replace(cfg.distill.gp, seed=cfg.distill.gp.seed + cfg.seed))
        res = distill(agent, train_eps, val_eps, dcfg, plan.validation_year, cfg.reward)
        d = os.path.join(cfg.out, "distill", str(y))
        os.makedirs(d, exist_ok=True)
        write_hof(res.entries, os.path.join(d, "hof.tsv"))
        with open(os.path.join(d, "selected.txt"), "w") as fh:
            fh.write(res.selected.to_line() + "\n")
        write_manifest(d, cfg, "distill", test_year=y, validation_year=plan.validation_year,
                       sample_info=res.sample_info, pool_size=res.pool_size)
        print(f"year {y}: selected {res.selected.expression.to_string()} (complexity {res.selected.complexity}, "
              f"{res.selected.family}, validation MAE {res.selected.val_mae:.5f})")


def cmd_long_horizon(cfg: RunConfig) -> None:
    quotes = read_chain(cfg)
    last = int(pd.to_datetime(quotes["date"]).dt.year.max())
    rows = []
    for y in cfg.years.test:
        path = checkpoint_file(cfg, y)
        try:
            rows += run_long_horizon(path, y, quotes, list(range(y, last + 1)), cfg.backtest())
        except CheckpointMissingError as exc:
            raise DataError(f"{exc}; run `hedgelab train` first") from None
    d = os.path.join(cfg.out, "long_horizon")
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "long_horizon.tsv"), "w") as fh:
        fh.write(long_horizon_table(rows, cfg.backtest()))
    write_manifest(d, cfg, "long-horizon")
    print(f"wrote {len(rows)} frozen-policy rows to {d}")


def cmd_report(cfg: RunConfig) -> None:
    from .plotting import plot_comparisons, plot_gap_surface

    base = os.path.join(cfg.out, "backtest")
    years = [y for y in cfg.years.test if os.path.exists(os.path.join(base, str(y), "comparison.tsv"))]
    if not years:
        raise DataError(f"no completed backtest under {base}; run `hedgelab backtest` first")
    d = os.path.join(cfg.out, "report")
    os.makedirs(d, exist_ok=True)
    header, rows, footers = None, [], []
    for y in years:
        with open(os.path.join(base, str(y), "comparison.tsv")) as fh:
            lines = fh.read().splitlines()
        header = lines[0]
        rows += [ln for ln in lines[1:] if not ln.startswith("#")]
        footers = [ln for ln in lines if ln.startswith("#")]
    table = "\n".join([header] + rows + footers) + "\n"
    with open(os.path.join(d, "table1.tsv"), "w") as fh:
        fh.write(table)
    figures = []
    comp = pd.read_csv(os.path.join(d, "table1.tsv"), sep="\t", comment="#")
    for metric in ("Reward", "Log Var", "Log DownVar"):
        pts = comp[metric].astype(str).str.rstrip("*").astype(float)
        path = os.path.join(d, f"comparison_{metric.lower().replace(' ', '_')}.png")
        plot_comparisons(comp["label"].tolist(), pts, comp[f"{metric} lo"], comp[f"{metric} hi"], metric, path)
        figures.append(path)
    for y in years:
        grid = pd.read_csv(os.path.join(base, str(y), "delta_gap_surface.tsv"), sep="\t", comment="#")
        m_edges = np.r_[np.sort(grid["m_lo"].unique()), grid["m_hi"].max()]
        iv_edges = np.r_[np.sort(grid["iv_lo"].unique()), grid["iv_hi"].max()]
        vals = grid["mean_gap"].to_numpy(float).reshape(len(m_edges) - 1, len(iv_edges) - 1)
        path = os.path.join(d, f"delta_gap_surface_{y}.png")
        plot_gap_surface(m_edges, iv_edges, vals, path, f"{y}: mean agent - BS delta")
        figures.append(path)
    write_manifest(d, cfg, "report", years=years, figures=[os.path.basename(f) for f in figures])
    sys.stdout.write(table)
    print(f"report written to {d} ({len(figures)} figures)")


_DISPATCH = {
    "ingest": cmd_ingest, "synth": cmd_synth, "train": cmd_train, "backtest": cmd_backtest,
    "distill": cmd_distill, "long-horizon": cmd_long_horizon, "report": cmd_report,
}


def dispatch(command: str, cfg: RunConfig) -> int:
    try:
        _DISPATCH[command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DataCoverageError, HeaderMismatchError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return dispatch(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
