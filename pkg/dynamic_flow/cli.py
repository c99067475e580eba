"""Command-line entry point: gen, train, eval, sweep, analyze, ablate.

Exit codes: 0 success, 2 usage or configuration problem (including missing
files), 3 numerical failure during training.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd

from .config import ConfigurationError, ModelConfig, RunConfig, TrainConfig, load_run_config, settings, write_run_config
from .engine import fit
from .errors import CheckpointFormatError, ContractError, DatasetFormatError, NonFiniteError
from .metrics import EvalReport, bottleneck_histogram, evaluate, iteration_allocation, rank_difficulty, sweep_report
from .models import DynamicFlowModel
from .reports import log_frame, trace_frame, write_csv
from .synthdata import SynthSample, file_checksum, load_dataset, make_dataset, save_dataset
from .workflows.ablation import DEFAULT_VARIANTS, build_ablation_workflow

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

RUN_CONFIG_NAME = "run_config.env"


def _output_dir(cfg: RunConfig) -> Path:
    directory = settings.resolve_output_dir(cfg.out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise ConfigurationError(f"{flag} is required for this command")
    return value


def _load_samples(path: Optional[str], flag: str = "--dataset") -> List[SynthSample]:
    samples = load_dataset(_require(path, flag))
    if not samples:
        raise ConfigurationError(f"dataset {path} holds no samples")
    return samples


def _model_config(cfg: RunConfig, samples: Sequence[SynthSample]) -> ModelConfig:
    return cfg.build_model_config(samples[0].shape[0])


def _load_model(cfg: RunConfig, samples: Sequence[SynthSample]) -> DynamicFlowModel:
    return DynamicFlowModel.load(_require(cfg.checkpoint, "--checkpoint"), _model_config(cfg, samples))


def cmd_gen(cfg: RunConfig) -> int:
    if cfg.n < 1:
        raise ConfigurationError("--n must be at least 1; empty datasets are refused")
    if settings.output_dir:
        target = Path(settings.output_dir) / Path(cfg.out or "dataset.bin").name
    elif cfg.out:
        target = Path(cfg.out)
    else:
        target = _output_dir(cfg) / "dataset.bin"
    samples = make_dataset(
        cfg.n, cfg.seed, hard_fraction=cfg.hard_fraction, height=cfg.height, width=cfg.width
    )
    save_dataset(samples, target)
    write_run_config(cfg, target.parent / RUN_CONFIG_NAME)
    print(f"{len(samples)} samples written to {target} sha256={file_checksum(target)}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    samples = _load_samples(cfg.dataset)
    out_dir = _output_dir(cfg)
    write_run_config(cfg, out_dir / RUN_CONFIG_NAME)
    train_cfg = cfg.train_config()
    model = DynamicFlowModel(_model_config(cfg, samples), seed=cfg.seed)
    if cfg.init:
        model.load_state_dict(DynamicFlowModel.load(cfg.init, model.config).state_dict())
    checkpoint = out_dir / "checkpoint.bin"

    result = fit(model, samples, train_cfg, snapshot=lambda current, _step: current.save(checkpoint))
    write_csv(log_frame(result.log), out_dir / "train_log.csv")
    if result.aborted:
        logger.error("Training aborted; last good checkpoint kept", extra={"checkpoint": str(checkpoint)})
        print(f"training aborted: {result.error}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"checkpoint written to {checkpoint}")
    return EXIT_OK


def _eval_options(cfg: RunConfig, *, variant: Optional[str] = None) -> Dict[str, Any]:
    policy_variant = TrainConfig(variant=variant or cfg.variant).policy_variant
    return {"t_test": cfg.t_test, "t_fixed": cfg.t_fixed, "variant": policy_variant}


def cmd_eval(cfg: RunConfig) -> int:
    samples = _load_samples(cfg.eval_dataset or cfg.dataset)
    model = _load_model(cfg, samples)
    out_dir = _output_dir(cfg)
    write_run_config(cfg, out_dir / RUN_CONFIG_NAME)
    results = evaluate(model, samples, cfg.r, mode=cfg.mode, workers=cfg.workers, **_eval_options(cfg))
    report = EvalReport.from_results(results)
    write_csv(report.summary(), out_dir / "report.csv")
    write_csv(report.per_sample, out_dir / "samples.csv")
    write_csv(trace_frame(result.trace for result in results), out_dir / "trace.csv")
    print(f"evaluated {len(results)} samples into {out_dir}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    if not cfg.r_list:
        raise ConfigurationError("--r needs at least one value for sweep")
    samples = _load_samples(cfg.eval_dataset or cfg.dataset)
    model = _load_model(cfg, samples)
    out_dir = _output_dir(cfg)
    write_run_config(cfg, out_dir / RUN_CONFIG_NAME)
    table = sweep_report(model, samples, cfg.r_list, mode=cfg.mode, workers=cfg.workers, **_eval_options(cfg))
    write_csv(table, out_dir / "sweep.csv")
    print(f"swept {len(cfg.r_list)} r values into {out_dir / 'sweep.csv'}")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    samples = _load_samples(cfg.eval_dataset or cfg.dataset)
    model = _load_model(cfg, samples)
    out_dir = _output_dir(cfg)
    write_run_config(cfg, out_dir / RUN_CONFIG_NAME)
    options = _eval_options(cfg)
    options["t_fixed"] = cfg.t_test

    fixed = evaluate(model, samples, cfg.r, mode="fixed", workers=cfg.workers, record_steps=True, **options)
    histogram = bottleneck_histogram([result.step_epe for result in fixed], tol=cfg.tol)
    write_csv(histogram.frame(), out_dir / "bottleneck.csv")

    gated = evaluate(model, samples, cfg.r, mode="policy", workers=cfg.workers, **_eval_options(cfg))
    ranked = rank_difficulty([result.epe for result in fixed])
    allocation = pd.concat(
        [
            iteration_allocation(gated, cfg.t_test).assign(grouping="generator"),
            iteration_allocation(gated, cfg.t_test, ranked).assign(grouping="ranked"),
        ],
        ignore_index=True,
    )
    write_csv(allocation[["grouping", "group", "n", "entered_percent"]], out_dir / "allocation.csv")
    print(f"bottleneck histogram written to {out_dir / 'bottleneck.csv'}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    samples = _load_samples(cfg.dataset)
    eval_samples = _load_samples(cfg.eval_dataset or cfg.dataset, "--eval-dataset")
    out_dir = _output_dir(cfg)
    write_run_config(cfg, out_dir / RUN_CONFIG_NAME)
    base = cfg.train_config()
    model_config = _model_config(cfg, samples)

    def train_backbone() -> Dict[str, Any]:
        model = DynamicFlowModel(model_config, seed=cfg.seed)
        phase = base.model_copy(update={"phase": "backbone", "steps": base.backbone_steps or base.steps})
        _checked(fit(model, samples, phase))
        return model.state_dict()

    def train_policy(variant: str, backbone_state: Dict[str, Any]) -> Dict[str, Any]:
        model = DynamicFlowModel(model_config, seed=cfg.seed)
        model.load_state_dict(backbone_state)
        _checked(fit(model, samples, base.model_copy(update={"phase": "policy", "variant": variant})))
        return model.state_dict()

    def evaluate_variant(variant: str, state: Dict[str, Any], mode: str) -> Dict[str, Any]:
        model = DynamicFlowModel(model_config, seed=cfg.seed)
        model.load_state_dict(state)
        options = _eval_options(cfg, variant=None if variant == "fixed" else variant)
        if mode == "fixed":
            options["t_fixed"] = cfg.t_test
        results = evaluate(model, eval_samples, cfg.r, mode=mode, workers=cfg.workers, **options)
        row = EvalReport.from_results(results).summary(("all",)).iloc[0]
        return row.to_dict()

    workflow = build_ablation_workflow(
        train_backbone=train_backbone, train_policy=train_policy, evaluate=evaluate_variant
    )
    state = workflow.invoke({"variants": list(DEFAULT_VARIANTS)})
    write_csv(state["table"], out_dir / "ablation.csv")
    print(f"ablation table written to {out_dir / 'ablation.csv'}")
    return EXIT_OK


def _checked(result) -> None:
    if result.aborted:
        raise NonFiniteError(result.error or "training diverged")


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat KEY=VALUE run configuration file.")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset")
    common.add_argument("--eval-dataset", dest="eval_dataset")
    common.add_argument("--checkpoint")
    common.add_argument("--variant", choices=["full", "l1", "B", "P", "exit"])
    common.add_argument("--t-train", dest="t_train", type=int)
    common.add_argument("--t-test", dest="t_test", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--embedding", choices=["normalized", "literal"], help="Iteration embedding phase.")
    common.add_argument(
        "--detach-policy-input",
        dest="detach_policy_input",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Stop policy gradients at the aggregated features.",
    )

    parser = argparse.ArgumentParser(prog="dynamic-flow", description="Dynamic optical flow experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="Generate a synthetic dataset.")
    gen.add_argument("--n", type=int)
    gen.add_argument("--out")
    gen.add_argument("--height", type=int)
    gen.add_argument("--width", type=int)
    gen.add_argument("--hard-fraction", dest="hard_fraction", type=float)

    train = sub.add_parser("train", parents=[common], help="Train the backbone and/or the policy.")
    train.add_argument("--phase", choices=["two_phase", "backbone", "policy", "joint"])
    train.add_argument("--freeze-backbone", dest="freeze_backbone", action="store_true")
    train.add_argument("--init", help="Checkpoint to start from.")
    train.add_argument("--steps", type=int)
    train.add_argument("--backbone-steps", dest="backbone_steps", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--optimizer", choices=["plain", "momentum", "adam"])

    for name, text in (("eval", "Evaluate at one r."), ("sweep", "Evaluate over a list of r."), ("analyze", "Bottleneck analysis.")):
        command = sub.add_parser(name, parents=[common], help=text)
        command.add_argument("--r", help="Resource preference (comma-separated list for sweep).")
        command.add_argument("--mode", choices=["policy", "exit", "fixed"])
        command.add_argument("--T", dest="t_fixed", type=int, help="Update count for --mode fixed.")
        command.add_argument("--tol", type=float)

    ablate = sub.add_parser("ablate", parents=[common], help="Run the ablation matrix.")
    ablate.add_argument("--r")
    ablate.add_argument("--steps", type=int)
    ablate.add_argument("--backbone-steps", dest="backbone_steps", type=int)
    ablate.add_argument("--batch-size", dest="batch_size", type=int)
    ablate.add_argument("--lr", type=float)
    ablate.add_argument("--optimizer", choices=["plain", "momentum", "adam"])
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values = {key: value for key, value in vars(args).items() if key not in ("config", "freeze_backbone")}
    if getattr(args, "freeze_backbone", False):
        values["phase"] = "policy"
    raw_r = values.pop("r", None)
    if raw_r is not None:
        values["r_list" if args.command == "sweep" else "r"] = raw_r
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=settings.log_level.upper(),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        ConfigurationError,
        ContractError,
        DatasetFormatError,
        CheckpointFormatError,
        FileNotFoundError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


__all__ = ["COMMANDS", "build_parser", "main"]
