"""Command-line entry point: build-kb, train, forecast, eval, verify-theory, rag-bias, ablate, sweep.

Exit codes: 0 success, 2 usage / configuration / input errors, 3 runtime failures.
Every command writes a RunManifest, on failure as well as on success.
"""

import argparse
import hashlib
import logging
import logging.config
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

from logging_config import LOGGING_CONFIG

from analysis.ablation import ablation_study
from analysis.metrics import evaluate, forecast_windows, horizon_leaks
from analysis.rag_bias import rag_bias_study
from analysis.sensitivity import K_GRID, RHO_GRID, sensitivity_sweep
from analysis.variance import NOISE_MODES, verify_variance_bound
from bootstrap.config_loader import load_run_config
from core.data import SeriesChannel, generate_synthetic, load_csv, make_windows, split_windows
from core.errors import ConfigurationError
from core.model import ModelParams
from retrieval.kb_io import load_kb, save_kb
from retrieval.knowledge_base import KnowledgeBase, build_kb
from schemas.manifest import RunManifest
from schemas.run_config import RunConfig
from schemas.train_config import TrainConfig
from training.checkpoint import Checkpoint, load_checkpoint
from training.trainer import check_kb_compatible, train
from utils.serialize import dumps
from utils.write_guard import atomic_write

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class RunContext:
    """Collects what a command read and wrote, for the manifest."""

    def __init__(self, command: str):
        self.command = command
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: Optional[RunConfig] = None

    def read(self, path: str | Path) -> Path:
        path = Path(path)
        if path.exists():
            self.inputs[str(path)] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def wrote(self, path: str | Path) -> None:
        self.outputs.append(str(path))


# ---------- shared helpers ----------
def _overrides(args: argparse.Namespace) -> dict:
    keys = ("T", "L", "patch_len", "patch_stride", "window_stride", "d", "K", "temperature", "dropout",
            "rho", "lr", "steps", "batch_size", "ablation", "seed", "threads")
    return {k: getattr(args, k, None) for k in keys}


def _load_channels(source: str, columns: Optional[str], cfg: RunConfig, ctx: RunContext) -> list[SeriesChannel]:
    if source == "synthetic":
        return generate_synthetic(cfg.synthetic)
    cols = [c.strip() for c in columns.split(",")] if columns else None
    return load_csv(ctx.read(source), cols)


def _windows(channels, cfg: TrainConfig):
    return make_windows(channels, cfg.T, cfg.L, cfg.window_stride, normalize=True, threads=cfg.threads)


def _model_cfg(cfg: TrainConfig, ckpt: Checkpoint) -> TrainConfig:
    """Geometry and ablation come from the checkpoint; retrieval settings stay with the config."""
    params = ckpt.params
    return cfg.model_copy(update={
        "T": params.T, "L": params.L, "patch": params.patch,
        "d": params.d, "d_hidden": params.d_hidden, "dropout": params.dropout,
        "ablation": ckpt.ablation,
    })


def _load_model(args, cfg: TrainConfig, ctx: RunContext) -> tuple[ModelParams, TrainConfig, Optional[KnowledgeBase]]:
    ckpt = load_checkpoint(ctx.read(args.checkpoint))
    if args.ablation is not None and cfg.ablation != ckpt.ablation:
        raise ConfigurationError(
            f"--ablation {cfg.ablation.value} does not match the checkpoint, which was trained as {ckpt.ablation.value}"
        )
    params, model_cfg = ckpt.params, _model_cfg(cfg, ckpt)
    kb = load_kb(ctx.read(args.kb), threads=cfg.threads) if args.kb else None
    if kb is not None:
        check_kb_compatible(params, kb)
    return params, model_cfg, kb


def _emit(text: str, out: Optional[str], ctx: RunContext) -> None:
    if out:
        atomic_write(out, text + "\n")
        ctx.wrote(out)
    else:
        print(text)


# ---------- commands ----------
def cmd_build_kb(args, cfg: RunConfig, ctx: RunContext) -> int:
    tc = cfg.train
    windows = _windows(_load_channels(args.input, args.columns, cfg, ctx), tc)
    if args.split == "train":
        windows, _ = split_windows(windows, tc.val_fraction)
    kb = build_kb(windows, ModelParams.init(tc), threads=tc.threads)
    save_kb(kb, args.out)
    ctx.wrote(args.out)
    ctx.wrote(f"{args.out}.json")
    print(f"KB: {len(kb)} entries, T={kb.T}, L={kb.L}, d={kb.d} -> {args.out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, ctx: RunContext) -> int:
    tc = cfg.train
    train_w, val_w = split_windows(_windows(_load_channels(args.data, args.columns, cfg, ctx), tc), tc.val_fraction)
    kb = None
    if tc.ablation.uses_retrieval:
        if args.kb:
            kb = load_kb(ctx.read(args.kb), threads=tc.threads)
        else:
            logger.info("[CLI] No --kb given; building one from the training windows")
            kb = build_kb(train_w, ModelParams.init(tc), threads=tc.threads)

    metrics = args.metrics or f"{args.out}.metrics.jsonl"
    resume = ctx.read(args.resume) if args.resume else None
    params, log = train(train_w, kb, tc, val_w, checkpoint_path=args.out, metrics_path=metrics, resume_from=resume)
    ctx.wrote(args.out)
    ctx.wrote(metrics)
    if log:
        last = log[-1]
        print(f"trained {tc.steps} steps ({tc.ablation.value}): val_mse={last['val_mse']:.6f} val_mae={last['val_mae']:.6f}")
    return EXIT_OK


def cmd_forecast(args, cfg: RunConfig, ctx: RunContext) -> int:
    params, mcfg, kb = _load_model(args, cfg.train, ctx)
    windows = _windows(_load_channels(args.input, args.columns, cfg, ctx), mcfg)
    forecasts = forecast_windows(params, kb, windows, mcfg, threads=mcfg.threads, keep_outputs=True)

    rows = []
    for f in forecasts:
        out = f.output
        diag = {
            "gamma_mean": float(out.gamma_gate.mean()),
            "lambda_mean": float(out.lambda_gate.mean()),
            "omega": ";".join(f"{w:.17g}" for w in out.omega),
            "retrieved_ids": ";".join(str(int(i)) for i in out.retrieved_ids),
            "similarities": ";".join(f"{s:.17g}" for s in out.similarities),
        }
        for step in range(f.y_hat.shape[0]):
            rows.append({
                "series_id": f.source_id[0], "window_start": f.source_id[1], "step": step,
                "y": f.y[step], "y_hat": f.y_hat[step], "y_inv": f.y_inv[step], "y_dyn": f.y_dyn[step],
                **diag,
            })
    frame = pd.DataFrame(rows, columns=["series_id", "window_start", "step", "y", "y_hat", "y_inv", "y_dyn",
                                        "gamma_mean", "lambda_mean", "omega", "retrieved_ids", "similarities"])
    atomic_write(args.out, frame.to_csv(index=False, float_format="%.17g"))
    ctx.wrote(args.out)
    print(f"forecast: {len(forecasts)} window(s) -> {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, ctx: RunContext) -> int:
    params, mcfg, kb = _load_model(args, cfg.train, ctx)
    windows = _windows(_load_channels(args.data, args.columns, cfg, ctx), mcfg)
    if args.split == "val":
        _, windows = split_windows(windows, mcfg.val_fraction)
    if kb is not None and mcfg.ablation.uses_retrieval:
        leaks = horizon_leaks(kb, windows)
        if leaks:
            logger.warning(f"[CLI] KB holds overlapping neighbours of {leaks}/{len(windows)} evaluation windows; "
                           "build it with --split train for held-out scores")
    period = args.period if args.period is not None else cfg.period
    report = evaluate(params, kb, windows, mcfg, period=period, threads=mcfg.threads)
    _emit(report.model_dump_json(indent=2), args.out, ctx)
    return EXIT_OK


def cmd_verify_theory(args, cfg: RunConfig, ctx: RunContext) -> int:
    omega = [float(w) for w in args.omega.split(",")] if args.omega else None
    seed = args.seed if args.seed is not None else cfg.train.seed
    report = verify_variance_bound(args.k, omega, args.sigma2, args.trials, seed, noise=args.noise)
    _emit(report.model_dump_json(indent=2), args.out, ctx)
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_rag_bias(args, cfg: RunConfig, ctx: RunContext) -> int:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.study.seeds
    report = rag_bias_study(
        _load_channels(args.data, args.columns, cfg, ctx), cfg.train, cfg.period, seeds,
        baseline_ablation=args.baseline or cfg.study.baseline_ablation,
        rag_ablation=args.rag or cfg.study.rag_ablation,
        plot_csv=args.plot_csv, plot_windows=cfg.study.plot_windows,
    )
    if args.plot_csv:
        ctx.wrote(args.plot_csv)
    _emit(report.model_dump_json(indent=2), args.out, ctx)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, ctx: RunContext) -> int:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.study.ablation_seeds
    arms = args.arms.split(",") if args.arms else cfg.study.ablation_arms
    report = ablation_study(_load_channels(args.data, args.columns, cfg, ctx), cfg.train, cfg.period,
                            seeds, arms)
    _emit(report.model_dump_json(indent=2), args.out, ctx)
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig, ctx: RunContext) -> int:
    k_grid = [int(k) for k in args.k_grid.split(",")] if args.k_grid else list(K_GRID)
    rho_grid = [float(r) for r in args.rho_grid.split(",")] if args.rho_grid else list(RHO_GRID)
    report = sensitivity_sweep(_load_channels(args.data, args.columns, cfg, ctx), cfg.train,
                               k_grid, rho_grid, period=cfg.period)
    _emit(report.model_dump_json(indent=2), args.out, ctx)
    return EXIT_OK


COMMANDS = {
    "build-kb": cmd_build_kb,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "eval": cmd_eval,
    "verify-theory": cmd_verify_theory,
    "rag-bias": cmd_rag_bias,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


# ---------- argument parsing ----------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (default: bootstrap/ridde_config.yaml)")
    common.add_argument("--profile", default="desk", help="profile inside the config file")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--log-level", default="INFO")
    common.add_argument("--manifest", help="where to write the run manifest")
    common.add_argument("--out", help="output path")

    model = argparse.ArgumentParser(add_help=False)
    for flag, kind in (("--T", int), ("--L", int), ("--patch-len", int), ("--patch-stride", int),
                       ("--window-stride", int), ("--d", int), ("--K", int), ("--temperature", float),
                       ("--dropout", float), ("--rho", float), ("--lr", float), ("--steps", int),
                       ("--batch-size", int)):
        model.add_argument(flag, type=kind, default=None)
    model.add_argument("--ablation", default=None, help="full, no_dis, no_idd, no_retrieval or plain")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--columns", help="comma-separated CSV columns (default: all)")

    parser = argparse.ArgumentParser(prog="ridde", description="Retrieval-guided decomposition forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-kb", parents=[common, model, data], help="embed windows into a knowledge base")
    p.add_argument("--input", required=True, help="CSV path or 'synthetic'")
    p.add_argument("--split", choices=("train", "all"), default="train")

    p = sub.add_parser("train", parents=[common, model, data], help="train a model")
    p.add_argument("--data", required=True, help="CSV path or 'synthetic'")
    p.add_argument("--kb")
    p.add_argument("--metrics", help="metrics JSONL (default: <out>.metrics.jsonl)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("forecast", parents=[common, model, data], help="forecast every window of an input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kb")
    p.add_argument("--input", required=True, help="CSV path or 'synthetic'")

    p = sub.add_parser("eval", parents=[common, model, data], help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kb")
    p.add_argument("--data", required=True, help="CSV path or 'synthetic'")
    p.add_argument("--period", type=int, default=None)
    p.add_argument("--split", choices=("val", "all"), default="val")

    p = sub.add_parser("verify-theory", parents=[common], help="Monte Carlo check of the retrieval variance bound")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--sigma2", type=float, required=True)
    p.add_argument("--trials", type=int, default=100000)
    p.add_argument("--omega", help="comma-separated weights (default: uniform)")
    p.add_argument("--noise", choices=NOISE_MODES, default="gaussian")

    p = sub.add_parser("rag-bias", parents=[common, model, data], help="retrieval bias study")
    p.add_argument("--data", default="synthetic", help="CSV path or 'synthetic'")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--baseline", help="baseline ablation")
    p.add_argument("--rag", help="retrieval ablation")
    p.add_argument("--plot-csv")

    p = sub.add_parser("ablate", parents=[common, model, data], help="component ablation study")
    p.add_argument("--data", default="synthetic", help="CSV path or 'synthetic'")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--arms", help="comma-separated ablations")

    p = sub.add_parser("sweep", parents=[common, model, data], help="K and rho sensitivity sweep")
    p.add_argument("--data", default="synthetic", help="CSV path or 'synthetic'")
    p.add_argument("--k-grid")
    p.add_argument("--rho-grid")
    return parser


def manifest_path(args: argparse.Namespace) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if args.out:
        return Path(f"{args.out}.manifest.json")
    return Path("runs") / f"{args.command}.manifest.json"


def setup_logging(level: str) -> None:
    Path("logs").mkdir(exist_ok=True)
    config = dict(LOGGING_CONFIG)
    config["handlers"] = {k: dict(v) for k, v in LOGGING_CONFIG["handlers"].items()}
    config["handlers"]["console"]["level"] = level.upper()
    logging.config.dictConfig(config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    ctx = RunContext(args.command)
    started = time.perf_counter()
    status, code, error = "ok", EXIT_OK, None

    try:
        if args.command in ("build-kb", "forecast", "train") and not args.out:
            raise ValueError(f"{args.command} requires --out")
        ctx.config = load_run_config(ctx.read(args.config) if args.config else None, args.profile, _overrides(args))
        code = COMMANDS[args.command](args, ctx.config, ctx)
        if code != EXIT_OK:
            status = "failed"
    except (ValueError, FileNotFoundError) as e:
        logger.error(f"[CLI] {args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        status, code, error = "error", EXIT_USAGE, str(e)
    except RuntimeError as e:
        logger.exception(f"[CLI] {args.command} aborted")
        print(f"error: {e}", file=sys.stderr)
        status, code, error = "error", EXIT_RUNTIME, str(e)
    finally:
        cfg = ctx.config
        manifest = RunManifest(
            command=args.command,
            resolved_config=cfg.model_dump(mode="json") if cfg is not None else {},
            seed=cfg.train.seed if cfg is not None else (args.seed or 0),
            input_hashes=ctx.inputs,
            output_paths=ctx.outputs,
            tool_version=TOOL_VERSION,
            wall_time_s=round(time.perf_counter() - started, 3),
            status=status,
            exit_code=code,
            error=error,
        )
        path = manifest_path(args)
        atomic_write(path, dumps(manifest))
        logger.debug(f"[CLI] Manifest written to {path}")
    return code


if __name__ == "__main__":
    sys.exit(main())
