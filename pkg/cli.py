"""
Command-line entry point.

    python cli.py gen-data --n-per-class 8 --dim 20 --seed 0 --out data/
    python cli.py pretrain --data data/manifest.csv --mode cscrl --out runs/pt
    python cli.py finetune --data data/manifest.csv --ckpt runs/pt/pretrain.ckpt --out runs/ft
    python cli.py evaluate --data data/manifest.csv --ckpt runs/ft/finetune.ckpt --split test --out runs/ft
    python cli.py analyze hubs --data data/manifest.csv --ckpt runs/ft/finetune.ckpt --out runs/an

Effective settings are resolved as defaults < `--config` file < flags and are
echoed into `<out>/<subcommand>.run.json`. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

import argparse
import itertools
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import analysis
from data import (
    SyntheticConfig,
    cross_domain_index,
    generate_synthetic,
    load_manifest,
    load_split,
    sample_mask,
    save_manifest,
    write_dataset,
)
from errors import ConfigError, GradCheckError, SchemaError, UsageError
from model import ModelConfig, build_model
from training import (
    FinetuneConfig,
    Metrics,
    PretrainConfig,
    checkpoint_records,
    compare_convergence,
    compute_metrics,
    evaluate,
    finetune,
    load_checkpoint,
    load_model,
    mask_seed,
    predict_scores,
    pretrain,
    run_grad_check,
    save_checkpoint,
)
from utils import (
    RunSession,
    RunState,
    configure_threads,
    file_sha256,
    load_config_file,
    log_event,
    logger,
)

GRAD_CHECK_PATHS = ("cscrl", "mae", "finetune")
ANALYSES = ("attention", "hubs", "variance", "fourier", "landscape", "reconstruct")


@dataclass(frozen=True)
class Option:
    name: str
    type: Callable[[str], Any]
    default: Any = None
    help: str = ""
    required: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def _parse_bool(raw: str) -> bool:
    value = str(raw).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_floats(raw: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in str(raw).split(",") if v.strip())


def _common(required_data: bool = True) -> List[Option]:
    options = [
        Option("out", str, ".", "output directory for every artifact"),
        Option("seed", int, 0, "master seed"),
    ]
    if required_data:
        options.append(Option("data", str, None, "dataset manifest (id,path,label,split)", required=True))
    return options


MODEL_OPTIONS = [
    Option("patch_size", int, 10),
    Option("encoder_dim", int, 32),
    Option("encoder_depth", int, 2),
    Option("encoder_heads", int, 2),
    Option("decoder_dim", int, 24),
    Option("decoder_depth", int, 1),
    Option("decoder_heads", int, 2),
]

PRETRAIN_OPTIONS = [
    Option("mode", str, "cscrl", "cscrl or mae"),
    Option("mask_ratio", float, 0.76),
    Option("beta1", float, 0.99, "pixel-loss weight; β₂ = (1 − β₁)/2"),
    Option("epochs", int, 300),
    Option("batch_size", int, 8),
    Option("lr", float, 1.5e-4),
    Option("warmup_epochs", int, 40),
    Option("weight_decay", float, 0.05),
    Option("max_steps", int, None, "stop after this many optimizer steps"),
    Option("log_every", int, 10),
]

FINETUNE_OPTIONS = [
    Option("epochs", int, 50),
    Option("batch_size", int, 16),
    Option("lr", float, 1e-3),
    Option("layer_decay", float, 0.75),
    Option("weight_decay", float, 0.05),
    Option("warmup_epochs", int, 5),
    Option("label_smoothing", float, 0.1),
    Option("dropout", float, 0.1),
    Option("mixup_alpha", float, 0.8),
    Option("head_init_scale", float, 0.001),
]

SCHEMAS: Dict[str, List[Option]] = {
    "gen-data": _common(required_data=False)
    + [
        Option("n_per_class", int, 8, "samples per class; val and test each get 20%"),
        Option("dim", int, 20, "edge length of the cubic volumes"),
        Option("num_regions", int, 4),
        Option("radius", int, None, "region radius in voxels (default dim // 6)"),
        Option("variance", float, 0.02, "region intensity variance"),
        Option("rho", float, 0.8, "inter-region correlation strength"),
        Option("noise_std", float, 0.05),
        Option("domain_offset", float, 0.0),
        Option("domain_noise_scale", float, 1.0),
    ],
    "pretrain": _common() + PRETRAIN_OPTIONS + MODEL_OPTIONS,
    "finetune": _common()
    + FINETUNE_OPTIONS
    + MODEL_OPTIONS
    + [
        Option("ckpt", str, None, "pretraining checkpoint"),
        Option("from_scratch", _parse_bool, False, "train the encoder from random init"),
    ],
    "evaluate": _common()
    + [
        Option("ckpt", str, None, "fine-tuned checkpoint", required=True),
        Option("split", str, "test"),
    ],
    "analyze": _common()
    + [
        Option("ckpt", str, None, "checkpoint to analyze", required=True),
        Option("split", str, "test", "landscape always uses the full train split"),
        Option("max_samples", int, 16, "sample cap for every analysis except landscape"),
        Option("layer", int, 0, "0-based encoder block for attention maps"),
        Option("top_k", int, 5),
        Option("steps", int, 41, "landscape grid points per axis"),
        Option("span", float, 1.0),
        Option("weight_decay", float, 0.05),
        Option("mask_ratio", float, 0.76),
    ],
    "grad-check": _common(required_data=False)
    + [
        Option("path", str, "all", "cscrl, mae, finetune or all"),
        Option("tolerance", float, 1e-4),
        Option("num_samples", int, 200),
    ],
    "sweep": _common()
    + MODEL_OPTIONS
    + [
        Option("beta1s", _parse_floats, (0.9, 0.99, 0.999)),
        Option("mask_ratios", _parse_floats, (0.66, 0.76, 0.84)),
        Option("pretrain_epochs", int, 300),
        Option("pretrain_warmup_epochs", int, 40),
        Option("pretrain_lr", float, 1.5e-4),
        Option("finetune_epochs", int, 50),
        Option("finetune_warmup_epochs", int, 5),
        Option("finetune_lr", float, 1e-3),
        Option("max_steps", int, None),
    ],
    "compare": _common()
    + [o for o in PRETRAIN_OPTIONS if o.name != "mode"]
    + MODEL_OPTIONS,
    "cross-domain": _common(required_data=False)
    + [
        Option("source", str, None, "source-domain manifest", required=True),
        Option("target", str, None, "target-domain manifest", required=True),
    ],
}


@dataclass
class RunConfig:
    subcommand: str
    values: Dict[str, Any]
    config_file: Optional[str] = None
    extras: Dict[str, Any] = field(default_factory=dict)


class CLIParser:
    """argparse front-end whose flags default to "unset" so layering works."""

    def __init__(self):
        self.parser = argparse.ArgumentParser(
            prog="cscrl", description="Connectome-semantic masked pretraining toolkit"
        )
        commands = self.parser.add_subparsers(dest="command", metavar="<command>")
        commands.required = True
        self.subparsers: Dict[str, argparse.ArgumentParser] = {}
        for name, options in SCHEMAS.items():
            sub = commands.add_parser(name)
            if name == "analyze":
                sub.add_argument("kind", choices=ANALYSES)
            sub.add_argument("--config", dest="config", default=None, help="key = value file")
            for opt in options:
                if opt.type is _parse_bool:
                    sub.add_argument(
                        opt.flag, dest=opt.name, action="store_true", default=argparse.SUPPRESS, help=opt.help
                    )
                else:
                    sub.add_argument(
                        opt.flag, dest=opt.name, type=opt.type, default=argparse.SUPPRESS, help=opt.help
                    )
            self.subparsers[name] = sub

    def parse(self, argv: Sequence[str]) -> RunConfig:
        args = vars(self.parser.parse_args(list(argv)))
        command = args.pop("command")
        config_file = args.pop("config", None)
        extras = {"kind": args.pop("kind")} if "kind" in args else {}
        return RunConfig(command, resolve(command, args, config_file), config_file, extras)

    def usage(self, command: Optional[str]) -> str:
        parser = self.subparsers.get(command, self.parser)
        return parser.format_usage()


def resolve(command: str, flags: Dict[str, Any], config_file: Optional[str] = None) -> Dict[str, Any]:
    """defaults < config file < flags, with every key checked against the schema."""
    schema = {opt.name: opt for opt in SCHEMAS[command]}
    values = {name: opt.default for name, opt in schema.items()}

    if config_file is not None:
        if not Path(config_file).is_file():
            raise UsageError(f"config file {config_file} not found")
        for key, raw in load_config_file(config_file).items():
            if key not in schema:
                raise UsageError(f"unknown key {key!r} in {config_file} for {command}")
            try:
                values[key] = schema[key].type(raw)
            except ValueError as e:
                raise UsageError(f"bad value for {key!r} in {config_file}: {e}")

    for key, value in flags.items():
        if key not in schema:
            raise UsageError(f"unknown option {key!r} for {command}")
        values[key] = value

    missing = [schema[k].flag for k, v in values.items() if schema[k].required and v is None]
    if missing:
        raise UsageError(f"the following arguments are required: {', '.join(missing)}")
    return values


# config builders


def model_config(values: Dict, volumes: np.ndarray, mode: str = "cscrl") -> ModelConfig:
    return ModelConfig(
        volume_dims=tuple(int(d) for d in volumes.shape[1:4]),
        channels=int(volumes.shape[4]),
        patch_size=values["patch_size"],
        encoder_dim=values["encoder_dim"],
        encoder_depth=values["encoder_depth"],
        encoder_heads=values["encoder_heads"],
        decoder_dim=values["decoder_dim"],
        decoder_depth=values["decoder_depth"],
        decoder_heads=values["decoder_heads"],
        mode=mode,
    )


def pretrain_config(values: Dict, mode: str = "cscrl") -> PretrainConfig:
    return PretrainConfig(
        batch_size=values["batch_size"],
        base_lr=values["lr"],
        warmup_epochs=values["warmup_epochs"],
        weight_decay=values["weight_decay"],
        epochs=values["epochs"],
        mask_ratio=values["mask_ratio"],
        mode=mode,
        beta1=values["beta1"],
        seed=values["seed"],
        max_steps=values["max_steps"],
        log_every=values["log_every"],
    )


def finetune_config(values: Dict) -> FinetuneConfig:
    return FinetuneConfig(
        batch_size=values["batch_size"],
        base_lr=values["lr"],
        layer_decay=values["layer_decay"],
        weight_decay=values["weight_decay"],
        warmup_epochs=values["warmup_epochs"],
        epochs=values["epochs"],
        label_smoothing=values["label_smoothing"],
        dropout=values["dropout"],
        mixup_alpha=values["mixup_alpha"],
        head_init_scale=values["head_init_scale"],
        seed=values["seed"],
    )


# subcommands


def run_gen_data(run: RunConfig, out: Path) -> Dict:
    values = run.values
    n = values["n_per_class"]
    if n < 1:
        raise UsageError("--n-per-class must be >= 1")
    held = int(0.2 * n)
    cfg = SyntheticConfig(
        dims=(values["dim"],) * 3,
        num_regions=values["num_regions"],
        radius=values["radius"],
        variance=values["variance"],
        rho=values["rho"],
        noise_std=values["noise_std"],
        samples_per_class={"train": n - 2 * held, "val": held, "test": held},
        seed=values["seed"],
        domain_offset=values["domain_offset"],
        domain_noise_scale=values["domain_noise_scale"],
    )
    volumes, _, index = generate_synthetic(cfg)
    index = write_dataset(volumes, index, out)
    logger.info(f"Wrote {len(index.entries)} volumes to {out} ({index.counts()})")
    return {"counts": index.counts()}


def _load(path: str, split: str) -> Tuple[np.ndarray, np.ndarray]:
    return load_split(load_manifest(Path(path).resolve()), split)


def run_pretrain(run: RunConfig, out: Path) -> Dict:
    values = run.values
    volumes, _ = _load(values["data"], "train")
    cfg = pretrain_config(values, values["mode"])
    model_cfg = model_config(values, volumes, values["mode"])
    model = build_model(model_cfg, seed=cfg.seed)
    result = pretrain(volumes, cfg, model, out / "pretrain_history.csv")

    weights = cfg.weights
    save_checkpoint(
        checkpoint_records(result.model, result.optimizer),
        out / "pretrain.ckpt",
        metadata={
            "model_config": model_cfg.to_dict(),
            "pretrain_config": asdict(cfg),
            "beta2": weights.beta2,
            "steps": int(result.history["step"].iloc[-1]),
            "epoch": result.epochs_run,
            "mode": cfg.mode,
            "seed": cfg.seed,
            "session": {**result.session.metadata, "duration_seconds": result.session.get_duration()},
        },
    )
    return {"beta1": weights.beta1, "beta2": weights.beta2, "epochs_run": result.epochs_run}


def _finetune_model_config(values: Dict, volumes: np.ndarray) -> Tuple[ModelConfig, Optional[Dict]]:
    if values["ckpt"] is None and not values["from_scratch"]:
        raise UsageError("finetune needs --ckpt or --from-scratch")
    if values["ckpt"] is not None and values["from_scratch"]:
        raise UsageError("--ckpt and --from-scratch are mutually exclusive")
    if values["from_scratch"]:
        return model_config(values, volumes), None
    tensors, metadata = load_checkpoint(values["ckpt"])
    if "model_config" not in metadata:
        raise SchemaError(f"{values['ckpt']}: sidecar metadata lacks model_config")
    return ModelConfig.from_dict(metadata["model_config"]), tensors


def run_finetune(run: RunConfig, out: Path) -> Dict:
    values = run.values
    index = load_manifest(Path(values["data"]).resolve())
    train = load_split(index, "train")
    val = load_split(index, "val")
    model_cfg, tensors = _finetune_model_config(values, train[0])
    cfg = finetune_config(values)
    result = finetune(train, val, cfg, model_cfg, tensors, out / "finetune_history.csv")

    save_checkpoint(
        checkpoint_records(result.model),
        out / "finetune.ckpt",
        metadata={
            "model_config": result.model.cfg.to_dict(),
            "finetune_config": asdict(cfg),
            "best_epoch": result.best_epoch,
            "val_metrics": result.best_metrics.to_dict(),
            "session": {**result.session.metadata, "duration_seconds": result.session.get_duration()},
        },
    )
    _write_json(out / "metrics_val.json", {"best_epoch": result.best_epoch, **result.best_metrics.to_dict()})
    return {"best_epoch": result.best_epoch, "val_acc": result.best_metrics.acc}


def run_evaluate(run: RunConfig, out: Path) -> Dict:
    values = run.values
    model, _ = load_model(values["ckpt"])
    index = load_manifest(Path(values["data"]).resolve())
    volumes, labels = load_split(index, values["split"])
    scores = predict_scores(model, volumes)
    metrics = compute_metrics(labels, scores)

    split = values["split"]
    pd.DataFrame(
        {"id": [e.id for e in index.split(split)], "label": labels, "score": scores}
    ).to_csv(out / f"predictions_{split}.csv", index=False)
    _write_json(out / f"metrics_{split}.json", metrics.to_dict())
    logger.info(
        f"{split}: ACC={metrics.acc:.4f} SEN={metrics.sen:.4f} SPE={metrics.spe:.4f} AUC={metrics.auc:.4f}"
    )
    return metrics.to_dict()


def run_analyze(run: RunConfig, out: Path) -> Dict:
    values = run.values
    kind = run.extras["kind"]
    model, _ = load_model(values["ckpt"])
    if kind == "landscape":
        split = "train"
        volumes, labels = _load(values["data"], split)
    else:
        split = values["split"]
        volumes, labels = _load(values["data"], split)
        volumes, labels = volumes[: values["max_samples"]], labels[: values["max_samples"]]

    if kind in ("attention", "hubs"):
        attn = analysis.attention_map(model, volumes, values["layer"])
        if kind == "attention":
            analysis.write_frame(analysis.attention_frame(attn), out / f"attention_layer{attn.layer}.csv")
        else:
            hubs = analysis.hub_patches(attn, values["top_k"], model.cfg.grid)
            analysis.write_frame(hubs.to_frame(), out / f"hubs_layer{attn.layer}.csv")
    elif kind == "variance":
        variances = analysis.feature_variance(model, volumes)
        analysis.write_frame(analysis.variance_frame(variances), out / "variance.csv")
    elif kind == "fourier":
        spectrum, delta = analysis.spectrum_frames(analysis.fourier_profile(model, volumes))
        analysis.write_frame(spectrum, out / "spectrum.csv")
        analysis.write_frame(delta, out / "spectrum_delta.csv")
    elif kind == "landscape":
        surface = analysis.loss_landscape(
            model,
            volumes,
            labels,
            steps=values["steps"],
            span=values["span"],
            seeds=(values["seed"], values["seed"] + 1),
            weight_decay=values["weight_decay"],
        )
        analysis.write_frame(surface.to_frame(), out / "landscape.csv")
    else:
        parts = [
            sample_mask(model.cfg.num_tokens, values["mask_ratio"], mask_seed(values["seed"], 0, i))
            for i in range(len(volumes))
        ]
        analysis.dump_reconstructions(model, volumes, parts, out / "reconstructions")
    return {"kind": kind, "split": split, "samples": int(len(volumes))}


def run_grad_check_command(run: RunConfig, out: Path) -> Dict:
    values = run.values
    if values["path"] == "all":
        paths = GRAD_CHECK_PATHS
    elif values["path"] in GRAD_CHECK_PATHS:
        paths = (values["path"],)
    else:
        raise UsageError(f"--path must be one of {GRAD_CHECK_PATHS + ('all',)}")

    rows, failures = [], []
    for path in paths:
        try:
            report = run_grad_check(path, values["tolerance"], values["seed"], values["num_samples"])
            rows.append({"path": path, "checked": report.checked, "zero_gradient": len(report.zero_gradient),
                         "max_rel_error": report.max_rel_error, "passed": True})
        except GradCheckError as e:
            failures.extend(f"{path}:{p}" for p in e.failures)
            rows.append({"path": path, "checked": None, "zero_gradient": None,
                         "max_rel_error": None, "passed": False})
    pd.DataFrame(rows).to_csv(out / "grad_check.csv", index=False)
    if failures:
        raise GradCheckError(failures)
    return {"paths": list(paths)}


def run_cell(
    splits: Dict[str, Tuple[np.ndarray, np.ndarray]],
    model_cfg: ModelConfig,
    pretrain_cfg: PretrainConfig,
    finetune_cfg: FinetuneConfig,
) -> Metrics:
    """Pretrain → fine-tune → test-split metrics for one configuration."""
    model = build_model(model_cfg, seed=pretrain_cfg.seed)
    pretrained = pretrain(splits["train"][0], pretrain_cfg, model)
    tensors = {n: t.detach().float().clone() for n, t in pretrained.model.state_dict().items()}
    tuned = finetune(splits["train"], splits["val"], finetune_cfg, model_cfg, tensors)
    return evaluate(tuned.model, *splits["test"])


def run_sweep(run: RunConfig, out: Path) -> Dict:
    values = run.values
    beta1s, ratios = values["beta1s"], values["mask_ratios"]
    if not beta1s or not ratios:
        raise UsageError("sweep ranges must be nonempty")

    index = load_manifest(Path(values["data"]).resolve())
    splits = {name: load_split(index, name) for name in ("train", "val", "test")}
    model_cfg = model_config(values, splits["train"][0])
    finetune_cfg = FinetuneConfig(
        epochs=values["finetune_epochs"],
        warmup_epochs=values["finetune_warmup_epochs"],
        base_lr=values["finetune_lr"],
        seed=values["seed"],
    )

    rows = []
    for beta1, ratio in itertools.product(beta1s, ratios):
        pretrain_cfg = PretrainConfig(
            epochs=values["pretrain_epochs"],
            warmup_epochs=values["pretrain_warmup_epochs"],
            base_lr=values["pretrain_lr"],
            mask_ratio=ratio,
            beta1=beta1,
            seed=values["seed"],
            max_steps=values["max_steps"],
        )
        metrics = run_cell(splits, model_cfg, pretrain_cfg, finetune_cfg)
        rows.append({"beta1": beta1, "mask_ratio": ratio, "acc": metrics.acc, "auc": metrics.auc})
        log_event("SWEEP_CELL", rows[-1])

    pd.DataFrame(rows, columns=["beta1", "mask_ratio", "acc", "auc"]).to_csv(out / "sweep.csv", index=False)
    return {"cells": len(rows)}


def run_compare(run: RunConfig, out: Path) -> Dict:
    values = run.values
    volumes, _ = _load(values["data"], "train")
    frame = compare_convergence(volumes, pretrain_config(values), model_config(values, volumes))
    frame.to_csv(out / "convergence.csv", index=False)
    return {"rows": len(frame)}


def run_cross_domain(run: RunConfig, out: Path) -> Dict:
    values = run.values
    source = load_manifest(Path(values["source"]).resolve())
    target = load_manifest(Path(values["target"]).resolve())
    index = cross_domain_index(source, target, values["seed"])
    save_manifest(index, out / "manifest.csv")
    return {"counts": index.counts()}


HANDLERS: Dict[str, Callable[[RunConfig, Path], Dict]] = {
    "gen-data": run_gen_data,
    "pretrain": run_pretrain,
    "finetune": run_finetune,
    "evaluate": run_evaluate,
    "analyze": run_analyze,
    "grad-check": run_grad_check_command,
    "sweep": run_sweep,
    "compare": run_compare,
    "cross-domain": run_cross_domain,
}


# run metadata


def _write_json(path: Path, payload: Dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def input_hashes(run: RunConfig) -> Dict[str, str]:
    """SHA-256 of every input file: manifests, their volumes, checkpoints, config."""
    hashes = {}
    for key in ("data", "source", "target"):
        manifest = run.values.get(key)
        if manifest and Path(manifest).is_file():
            hashes[str(manifest)] = file_sha256(manifest)
            index = load_manifest(Path(manifest).resolve())
            for entry in index.entries:
                path = index.resolve(entry)
                if path.is_file():
                    hashes[str(path)] = file_sha256(path)
    for path in (run.values.get("ckpt"), run.config_file):
        if path and Path(path).is_file():
            hashes[str(path)] = file_sha256(path)
    return hashes


def write_run_metadata(run: RunConfig, out: Path, session: RunSession, result: Dict) -> Path:
    path = out / f"{run.subcommand}.run.json"
    _write_json(
        path,
        {
            "subcommand": run.subcommand,
            **run.extras,
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in run.values.items()},
            "config_file": run.config_file,
            "seeds": {"seed": run.values.get("seed")},
            "inputs": input_hashes(run),
            "state": session.state.name,
            "duration_seconds": session.get_duration(),
            "result": result,
        },
    )
    return path


def dispatch(argv: Sequence[str]) -> int:
    """Run one subcommand; returns the process exit code."""
    cli = CLIParser()
    command = next((a for a in argv if a in SCHEMAS), None)
    try:
        run = cli.parse(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        sys.stderr.write(cli.usage(command))
        sys.stderr.write(f"cscrl {command}: error: {e}\n")
        return 2

    configure_threads()
    out = Path(run.values["out"])
    out.mkdir(parents=True, exist_ok=True)
    session = RunSession(run.subcommand)
    session.set_state(RunState.RUNNING)
    log_event("RUN_STARTED", {"subcommand": run.subcommand, "out": out}, state=session.state)

    result: Dict = {}
    code = 0
    try:
        result = HANDLERS[run.subcommand](run, out) or {}
        session.set_state(RunState.COMPLETED)
    except (UsageError, ConfigError) as e:
        session.set_state(RunState.FAILED, error=str(e))
        sys.stderr.write(cli.usage(run.subcommand))
        sys.stderr.write(f"cscrl {run.subcommand}: error: {e}\n")
        code = 2
    except Exception as e:
        session.set_state(RunState.FAILED, error=str(e))
        logger.error(f"{run.subcommand} failed: {e}", exc_info=True)
        code = 1

    write_run_metadata(run, out, session, result)
    log_event(
        "RUN_FINISHED",
        {"subcommand": run.subcommand, "exit_code": code, "duration": session.get_duration_formatted()},
        state=session.state,
    )
    return code


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
