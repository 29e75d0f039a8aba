"""
Command-line entry point

    python -m mino <command> [--config run.json] [--output-dir DIR] [--threads N]
                   [--section.field=value ...]

Commands: gen-data, sample-gp, train, generate, eval, plot. Each command
writes its fully resolved configuration to <output-dir>/config.<command>.json.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from . import plotting
from .config import (PlotKind, RunConfig, load_run_config, resolve_output_dir, resolve_path,
                     write_resolved_config)
from .data_io import gen_mesh_gp, read_container, read_mesh, write_container, write_mesh
from .exceptions import ConfigError, MinoError
from .flow_matching import Trainer, generate
from .gaussian_field import GaussianProcessSampler, sample_gp
from .geometry import Box, make_grid_point_set
from .metrics import evaluate, metric_consistency_curve, swd_variance_study
from .model import VelocityModel, load_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class MinoArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as ConfigError instead of exiting"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = MinoArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--output-dir", help="Output directory (default: $MINO_OUTPUT_DIR or ./runs)")
    common.add_argument("--threads", type=int,
                        help="Thread count for numerical libraries; applied only when launched as "
                             "`python -m mino`, before numpy loads its BLAS")

    parser = MinoArgumentParser(prog="mino", allow_abbrev=False,
                                description="Mesh-informed neural operator flow matching toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=MinoArgumentParser)
    sub.add_parser("gen-data", parents=[common], allow_abbrev=False, help="Generate a Mesh-GP dataset")
    sub.add_parser("sample-gp", parents=[common], allow_abbrev=False, help="Draw Gaussian-process samples")
    sub.add_parser("train", parents=[common], allow_abbrev=False, help="Train a velocity model")
    gen = sub.add_parser("generate", parents=[common], allow_abbrev=False, help="Generate samples")
    gen.add_argument("--positions", help="Container whose point set is the target discretization")
    sub.add_parser("eval", parents=[common], allow_abbrev=False, help="Compute the metric suite")
    sub.add_parser("plot", parents=[common], allow_abbrev=False, help="Emit plot data (CSV/SVG)")
    return parser


def split_overrides(extra: List[str]) -> List[str]:
    """Unrecognized arguments must all be --section.field=value overrides"""
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"Unrecognized argument {item!r}; overrides look like --section.field=value")
    return extra


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> None:
    points = cfg.points.build()
    train, test = gen_mesh_gp(points, cfg.data.n_train, cfg.data.n_test, cfg.data.seed, spec=cfg.data.target_gp)
    provenance = {"generator": "gen_mesh_gp", "target_gp": cfg.data.target_gp.model_dump(mode="json"),
                  "seed": cfg.data.seed}
    write_mesh(resolve_path(out, cfg.paths.mesh), points, {"points": cfg.points.model_dump(mode="json")})
    write_container(resolve_path(out, cfg.paths.train), train, {**provenance, "split": "train"})
    write_container(resolve_path(out, cfg.paths.test), test, {**provenance, "split": "test"})


def cmd_sample_gp(cfg: RunConfig, out: Path, args) -> None:
    points = cfg.points.build()
    batch = sample_gp(cfg.sample.gp, points, cfg.sample.n_samples, cfg.sample.seed, cfg.sample.n_channels)
    write_container(resolve_path(out, cfg.paths.gp_samples), batch,
                    {"generator": "sample_gp", "gp": cfg.sample.gp.model_dump(mode="json"), "seed": cfg.sample.seed})


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    dataset = read_container(resolve_path(out, cfg.paths.train))
    ckpt_path = resolve_path(out, cfg.paths.checkpoint)
    history_path = resolve_path(out, cfg.paths.loss_history)

    start_epoch = 0
    previous = None
    if cfg.resume and ckpt_path.exists():
        checkpoint = load_checkpoint(ckpt_path)
        model = checkpoint.model
        start_epoch = int(checkpoint.training_state.get("epoch", -1)) + 1
        if history_path.exists():
            previous = pd.read_csv(history_path)
            previous = previous[previous["epoch"] < start_epoch]
    else:
        if cfg.model.pos_dim != dataset.points.dim or cfg.model.f_dim != dataset.f_dim:
            raise ConfigError(
                f"Model expects pos_dim={cfg.model.pos_dim}, f_dim={cfg.model.f_dim} but the dataset has "
                f"{dataset.points.dim} and {dataset.f_dim}")
        model = VelocityModel(cfg.model)
        checkpoint = None

    trainer = Trainer(model, dataset, cfg.train)
    if checkpoint is not None and checkpoint.optimizer_m is not None:
        trainer.optimizer.load_state(checkpoint.optimizer_m, checkpoint.optimizer_v, checkpoint.optimizer_step)
        trainer.global_step = checkpoint.optimizer_step

    def save(epoch: int, mean_loss: float) -> None:
        model.save(ckpt_path, {"epoch": epoch, "mean_loss": mean_loss, "seed": cfg.train.seed},
                   trainer.optimizer)

    history = trainer.fit(start_epoch, on_epoch_end=save)
    if previous is not None:
        history = pd.concat([previous, history], ignore_index=True)
    plotting.write_table(history, history_path)


def cmd_generate(cfg: RunConfig, out: Path, args) -> None:
    model = VelocityModel.load(resolve_path(out, cfg.paths.checkpoint))
    positions = args.positions if getattr(args, "positions", None) else resolve_path(out, cfg.paths.mesh)
    points = read_mesh(positions)
    batch = generate(model, cfg.train.base_gp, points, cfg.generate.n_samples, cfg.solver,
                     cfg.generate.seed, cfg.generate.batch_size)
    write_container(resolve_path(out, cfg.paths.generated), batch,
                    {"generator": "generate", "solver": cfg.solver.model_dump(mode="json"),
                     "seed": cfg.generate.seed, "positions": str(positions)})


def cmd_eval(cfg: RunConfig, out: Path, args) -> None:
    generated = read_container(resolve_path(out, cfg.paths.generated))
    reference = read_container(resolve_path(out, cfg.paths.test))
    report = evaluate(generated, reference, cfg.metrics)
    path = resolve_path(out, cfg.paths.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    logger.info(f"Metric report written to {path}")


def _plot_inputs(cfg: RunConfig, out: Path):
    x = read_container(cfg.plot.input or resolve_path(out, cfg.paths.generated))
    y = read_container(cfg.plot.reference or resolve_path(out, cfg.paths.test))
    return x, y


def cmd_plot(cfg: RunConfig, out: Path, args) -> None:
    plot_dir = resolve_path(out, cfg.paths.plots)
    kind = cfg.plot.kind

    if kind == PlotKind.LOSS:
        history = pd.read_csv(resolve_path(out, cfg.paths.loss_history))
        plotting.loss_curve(history, plot_dir)
    elif kind == PlotKind.CONSISTENCY:
        x, y = _plot_inputs(cfg, out)
        curve = metric_consistency_curve(x, y, cfg.plot.ratios, cfg.metrics, cfg.plot.seed)
        plotting.consistency_curve(curve, plot_dir)
    elif kind == PlotKind.SPECTRA:
        x, y = _plot_inputs(cfg, out)
        plotting.spectra_plot({"input": x, "reference": y}, plot_dir)
    elif kind == PlotKind.HEATMAP:
        x = read_container(cfg.plot.input or resolve_path(out, cfg.paths.generated))
        plotting.heatmap(x, cfg.plot.sample_index, plot_dir)
    else:
        points = make_grid_point_set(cfg.plot.grid, Box.unit(2))
        sampler_x = GaussianProcessSampler(cfg.plot.gp_x, points)
        sampler_y = GaussianProcessSampler(cfg.plot.gp_y, points)
        n = cfg.plot.n_samples
        study = swd_variance_study(lambda s: sampler_x.sample_batch(n, np.random.default_rng(s)),
                                   lambda s: sampler_y.sample_batch(n, np.random.default_rng(s)),
                                   cfg.plot.n_run_values, cfg.plot.n_trials, cfg.metrics.n_projections,
                                   cfg.plot.seed)
        plotting.swd_variance_plot(study, plot_dir)


COMMANDS: Dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "sample-gp": cmd_sample_gp,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes"""
    try:
        args, extra = build_parser().parse_known_args(argv)
        cfg = load_run_config(args.config, split_overrides(extra))
        if args.threads is not None and args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        if args.threads is not None and os.getenv("OMP_NUM_THREADS") != str(args.threads):
            logger.warning(f"--threads {args.threads} ignored: BLAS is already loaded, "
                           "launch with python -m mino or set OMP_NUM_THREADS")
        out = resolve_output_dir(cfg, args.output_dir)
        write_resolved_config(cfg, out, args.command)
        logger.info(f"Running {args.command} in {out}")
        COMMANDS[args.command](cfg, out, args)
        return EXIT_OK
    except (ConfigError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (MinoError, ArithmeticError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME


def main(argv: Optional[List[str]] = None) -> None:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("LOG_LEVEL", "INFO"),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    sys.exit(run(argv))
