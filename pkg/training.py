"""
Optimization, pretraining / fine-tuning loops, evaluation metrics, the
finite-difference gradient checker and the binary checkpoint codec.
"""

import copy
import hashlib
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import auc, confusion_matrix, roc_curve

from data import SyntheticConfig, generate_synthetic, patchify_batch, sample_mask
from errors import (
    BadMagicError,
    ConfigError,
    GradCheckError,
    MetricError,
    NumericError,
    SchemaError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from model import (
    CLASSIFIER_PREFIXES,
    CSCRL,
    MaskBatch,
    ModelConfig,
    build_model,
)
from objective import (
    LossWeights,
    classification_loss,
    mixup,
    pretrain_losses,
    sample_mixup,
    smooth_labels,
)
from utils import RunSession, RunState, log_event, logger

PathLike = Union[str, Path]

ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8

PRETRAIN_HISTORY_COLUMNS = ["epoch", "step", "lr", "L_pixel", "L_c", "L_nc", "L_all"]
FINETUNE_HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "val_acc", "val_auc"]


@dataclass
class PretrainConfig:
    batch_size: int = 8
    base_lr: float = 1.5e-4
    warmup_epochs: int = 40
    weight_decay: float = 0.05
    epochs: int = 300
    mask_ratio: float = 0.76
    mode: str = "cscrl"
    beta1: float = 0.99
    seed: int = 0
    max_steps: Optional[int] = None
    log_every: int = 10

    @property
    def weights(self) -> LossWeights:
        return LossWeights.from_beta1(self.beta1)

    def validate(self) -> None:
        if self.warmup_epochs >= self.epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})"
            )
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.batch_size < 1 or self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError(f"invalid optimization settings in {self}")
        self.weights.validate()


@dataclass
class FinetuneConfig:
    batch_size: int = 16
    base_lr: float = 1e-3
    layer_decay: float = 0.75
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    epochs: int = 50
    label_smoothing: float = 0.1
    dropout: float = 0.1
    mixup_alpha: float = 0.8
    head_init_scale: float = 0.001
    num_classes: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.warmup_epochs >= self.epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})"
            )
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.head_init_scale < 0:
            raise ConfigError("head_init_scale must be >= 0")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ConfigError("layer_decay must lie in (0, 1]")
        if self.batch_size < 1 or self.base_lr <= 0 or self.mixup_alpha < 0:
            raise ConfigError(f"invalid optimization settings in {self}")


@dataclass
class Metrics:
    acc: float
    sen: float
    spe: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> Dict:
        return asdict(self)


# schedules


def lr_at(epoch: int, cfg) -> float:
    """Linear warmup then half-cosine decay, evaluated per epoch."""
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def layer_lr_scales(decay: float, depth: int) -> List[float]:
    """Multipliers for [patch embed, block 1..depth, head]: decay^(depth+1-g)."""
    if not 0.0 < decay <= 1.0:
        raise ConfigError(f"layer decay must lie in (0, 1], got {decay}")
    return [decay ** (depth + 1 - g) for g in range(depth + 2)]


# optimizer


def param_groups(
    model: CSCRL,
    weight_decay: float,
    layer_decay: Optional[float] = None,
    include: Optional[Callable[[str], bool]] = None,
) -> List[Dict]:
    """AdamW groups split by decay / no-decay and, optionally, layer group.

    Biases, other 1-D tensors and the mask token carry no weight decay.
    """
    scales = (
        layer_lr_scales(layer_decay, model.cfg.encoder_depth)
        if layer_decay is not None
        else None
    )
    groups: Dict[Tuple[int, bool], Dict] = OrderedDict()
    for name, param in model.named_parameters():
        if not param.requires_grad or (include is not None and not include(name)):
            continue
        no_decay = param.ndim <= 1 or name.endswith(".bias") or name == "mask_token"
        layer = model.layer_group_of(name) if scales is not None else 0
        key = (layer, no_decay)
        if key not in groups:
            groups[key] = {
                "params": [],
                "names": [],
                "weight_decay": 0.0 if no_decay else weight_decay,
                "lr_scale": scales[layer] if scales is not None else 1.0,
            }
        groups[key]["params"].append(param)
        groups[key]["names"].append(name)
    return list(groups.values())


def build_optimizer(groups: List[Dict]) -> torch.optim.AdamW:
    return torch.optim.AdamW(groups, lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS)


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float) -> None:
    """Apply one AdamW update at learning rate `lr` × each group's lr_scale.

    Raises:
        NumericError: a gradient holds NaN/Inf; the message names the parameter.
    """
    for group in optimizer.param_groups:
        names = group.get("names") or [f"param[{i}]" for i in range(len(group["params"]))]
        for name, param in zip(names, group["params"]):
            if param.grad is not None and not torch.isfinite(param.grad).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
        group["lr"] = lr * group.get("lr_scale", 1.0)
    optimizer.step()


# pretraining


@dataclass
class PretrainResult:
    model: CSCRL
    optimizer: torch.optim.Optimizer
    history: pd.DataFrame
    session: RunSession
    epochs_run: int


def mask_seed(seed: int, step: int, sample: int) -> int:
    """Independent per-(step, sample) mask seed."""
    return int(np.random.SeedSequence([seed, step, sample]).generate_state(1)[0])


def pretrain(
    volumes: np.ndarray,
    cfg: PretrainConfig,
    model: CSCRL,
    history_path: Optional[PathLike] = None,
) -> PretrainResult:
    """Masked-reconstruction pretraining with a fresh mask per sample per step.

    Args:
        volumes: (S, H, W, D, C) training volumes.
        cfg: optimization settings; `cfg.mode` must match the model.
        model: freshly built or resumed network.
        history_path: optional CSV destination for the per-step history.
    """
    cfg.validate()
    if len(volumes) == 0:
        raise ConfigError("pretraining needs a nonempty dataset")
    if cfg.mode != model.cfg.mode:
        raise ConfigError(f"config mode {cfg.mode!r} does not match model mode {model.cfg.mode!r}")

    session = RunSession("pretrain")
    session.set_state(RunState.RUNNING, mode=cfg.mode, seed=cfg.seed)

    dtype = next(model.parameters()).dtype
    tokens = patchify_batch(torch.as_tensor(volumes, dtype=dtype), model.cfg.patch_size)
    num_tokens = tokens.shape[1]
    weights = cfg.weights
    optimizer = build_optimizer(param_groups(model, cfg.weight_decay))
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)

    rows = []
    step = 0
    epoch = 0
    model.train()
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = rng.permutation(len(tokens))
            for start in range(0, len(order), cfg.batch_size):
                batch_idx = torch.as_tensor(order[start : start + cfg.batch_size])
                step += 1
                parts = [
                    sample_mask(num_tokens, cfg.mask_ratio, mask_seed(cfg.seed, step, j))
                    for j in range(len(batch_idx))
                ]
                mask = MaskBatch.from_partitions(parts)
                if logger.isEnabledFor(logging.DEBUG):
                    logger.debug(
                        f"step {step}: batch {batch_idx.tolist()}, "
                        f"first masked indices {parts[0].masked_idx[:5].tolist()}"
                    )
                outputs = model.forward_pretrain(tokens[batch_idx], mask)
                loss, report = pretrain_losses(outputs, weights, cfg.mode)
                if not math.isfinite(report.total):
                    raise NumericError(f"pretraining loss is {report.total} at step {step}")

                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer_step(optimizer, lr)

                rows.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "lr": lr,
                        **report.as_row(),
                        "sigma_g1": report.sigma_g1,
                        "sigma_g2": report.sigma_g2,
                    }
                )
                if cfg.log_every and step % cfg.log_every == 0:
                    log_event(
                        "PRETRAIN_STEP",
                        {"step": step, "epoch": epoch, **{k: f"{v:.6f}" for k, v in report.as_row().items()}},
                        state=session.state,
                    )
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    except Exception as e:
        session.set_state(RunState.FAILED, error=str(e), step=step)
        raise

    history = pd.DataFrame(rows)
    if history_path is not None:
        write_history(history, history_path, PRETRAIN_HISTORY_COLUMNS)
    session.set_state(RunState.COMPLETED, steps=step)
    logger.info(f"Pretraining finished after {step} steps in {session.get_duration_formatted()}")
    return PretrainResult(model, optimizer, history, session, epoch + 1)


def compare_convergence(
    volumes: np.ndarray, cfg: PretrainConfig, model_cfg: ModelConfig
) -> pd.DataFrame:
    """Pixel-loss curves of both modes from the same seed: `step,mode,L_pixel`."""
    frames = []
    for mode in ("cscrl", "mae"):
        model = build_model(replace(model_cfg, mode=mode), seed=cfg.seed)
        result = pretrain(volumes, replace(cfg, mode=mode), model)
        frame = result.history[["step", "L_pixel"]].copy()
        frame.insert(1, "mode", mode)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


# fine-tuning and evaluation


@dataclass
class FinetuneResult:
    model: CSCRL
    history: pd.DataFrame
    best_epoch: int
    best_metrics: Metrics
    session: RunSession


def _classifier_only(name: str) -> bool:
    return name.startswith(CLASSIFIER_PREFIXES)


def restore_encoder(model: CSCRL, tensors: Dict[str, torch.Tensor]) -> None:
    """Load encoder weights from checkpoint tensors; projectors/decoder are ignored."""
    wanted = list(model.encoder_state_dict())
    missing = [n for n in wanted if n not in tensors]
    if missing:
        raise SchemaError(f"checkpoint is missing tensor {missing[0]!r}")
    state = {n: tensors[n] for n in wanted}
    model.load_state_dict(state, strict=False)


def finetune(
    train: Tuple[np.ndarray, np.ndarray],
    val: Tuple[np.ndarray, np.ndarray],
    cfg: FinetuneConfig,
    model_cfg: ModelConfig,
    checkpoint: Optional[Dict[str, torch.Tensor]] = None,
    history_path: Optional[PathLike] = None,
) -> FinetuneResult:
    """Supervised fine-tuning of the encoder plus a fresh GAP head.

    With `checkpoint=None` the encoder is trained from scratch. The returned
    model carries the best-on-validation weights (ACC, then AUC, then the
    later epoch).
    """
    cfg.validate()
    train_x, train_y = train
    val_x, val_y = val
    for labels in (train_y, val_y):
        if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
            raise ConfigError(
                f"labels span [{labels.min()}, {labels.max()}] but num_classes={cfg.num_classes}"
            )

    model_cfg = replace(model_cfg, dropout=cfg.dropout, num_classes=cfg.num_classes)
    model = build_model(model_cfg, seed=cfg.seed)
    if checkpoint is not None:
        restore_encoder(model, checkpoint)
    model.reset_head(cfg.seed, cfg.head_init_scale)

    session = RunSession("finetune")
    session.set_state(
        RunState.RUNNING, seed=cfg.seed, pretrained=checkpoint is not None
    )

    optimizer = build_optimizer(
        param_groups(model, cfg.weight_decay, cfg.layer_decay, include=_classifier_only)
    )
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    train_x_t = torch.as_tensor(train_x, dtype=dtype)
    train_y_t = torch.as_tensor(train_y, dtype=torch.long)

    rows = []
    best_key = None
    best_state = None
    best_epoch = -1
    best_metrics = None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            model.train()
            order = rng.permutation(len(train_x_t))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                idx = torch.as_tensor(order[start : start + cfg.batch_size])
                x = train_x_t[idx]
                targets = smooth_labels(train_y_t[idx], cfg.num_classes, cfg.label_smoothing).to(dtype)
                if cfg.mixup_alpha > 0 and len(idx) >= 2:
                    x, targets = mixup(x, targets, sample_mixup(len(idx), cfg.mixup_alpha, rng))
                loss = classification_loss(model.classify(x), targets)
                if not torch.isfinite(loss):
                    raise NumericError(f"fine-tuning loss is {loss.item()} in epoch {epoch}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer_step(optimizer, lr)
                losses.append(loss.item())

            metrics = evaluate(model, val_x, val_y)
            rows.append(
                {
                    "epoch": epoch,
                    "lr": lr,
                    "train_loss": float(np.mean(losses)),
                    "val_acc": metrics.acc,
                    "val_auc": metrics.auc,
                }
            )
            log_event(
                "FINETUNE_EPOCH",
                {"epoch": epoch, "train_loss": f"{rows[-1]['train_loss']:.6f}",
                 "val_acc": f"{metrics.acc:.4f}", "val_auc": f"{metrics.auc:.4f}"},
                state=session.state,
            )

            key = (metrics.acc, metrics.auc)
            if best_key is None or key >= best_key:
                best_key = key
                best_state = copy.deepcopy(model.state_dict())
                best_epoch = epoch
                best_metrics = metrics
    except Exception as e:
        session.set_state(RunState.FAILED, error=str(e))
        raise

    model.load_state_dict(best_state)
    model.eval()
    log_event("BEST_CHECKPOINT", {"epoch": best_epoch, **best_metrics.to_dict()})
    history = pd.DataFrame(rows, columns=FINETUNE_HISTORY_COLUMNS)
    if history_path is not None:
        write_history(history, history_path, FINETUNE_HISTORY_COLUMNS)
    session.set_state(RunState.COMPLETED, best_epoch=best_epoch)
    return FinetuneResult(model, history, best_epoch, best_metrics, session)


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int, auc_value: float = float("nan")) -> Metrics:
    total = tp + fp + tn + fn
    return Metrics(
        acc=(tp + tn) / total,
        sen=tp / (tp + fn) if tp + fn else float("nan"),
        spe=tn / (tn + fp) if tn + fp else float("nan"),
        auc=auc_value,
        tp=int(tp),
        fp=int(fp),
        tn=int(tn),
        fn=int(fn),
    )


def compute_metrics(labels: Sequence[int], scores: Sequence[float], threshold: float = 0.5) -> Metrics:
    """Binary metrics with class 1 as the positive (patient) class.

    AUC integrates the ROC by trapezoids over every distinct score threshold.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.size == 0:
        raise MetricError("cannot evaluate an empty split")
    if np.unique(labels).size < 2:
        raise MetricError("AUC is undefined for a single-class split")
    predictions = (scores >= threshold).astype(int)
    tn, fp, fn, tp = confusion_matrix(labels, predictions, labels=[0, 1]).ravel()
    fpr, tpr, _ = roc_curve(labels, scores, drop_intermediate=False)
    return metrics_from_counts(tp, fp, tn, fn, float(auc(fpr, tpr)))


@torch.no_grad()
def predict_scores(model: CSCRL, volumes: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Positive-class probabilities, evaluated in eval mode."""
    model.eval()
    dtype = next(model.parameters()).dtype
    scores = []
    for start in range(0, len(volumes), batch_size):
        x = torch.as_tensor(volumes[start : start + batch_size], dtype=dtype)
        scores.append(model.classify(x).softmax(dim=-1)[:, 1].double().numpy())
    return np.concatenate(scores)


def evaluate(model: CSCRL, volumes: np.ndarray, labels: np.ndarray) -> Metrics:
    if len(volumes) == 0:
        raise MetricError("cannot evaluate an empty split")
    return compute_metrics(labels, predict_scores(model, volumes))


# objectives for gradient checking / landscapes


def pretrain_objective(
    model: CSCRL, tokens: torch.Tensor, mask: MaskBatch, weights: LossWeights
) -> Callable[[], torch.Tensor]:
    def objective() -> torch.Tensor:
        return pretrain_losses(model.forward_pretrain(tokens, mask), weights, model.cfg.mode)[0]

    return objective


def finetune_objective(
    model: CSCRL, volumes: torch.Tensor, targets: torch.Tensor, draw=None
) -> Callable[[], torch.Tensor]:
    def objective() -> torch.Tensor:
        x, y = (volumes, targets) if draw is None else mixup(volumes, targets, draw)
        return classification_loss(model.classify(x), y)

    return objective


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    zero_gradient: List[str] = field(default_factory=list)
    errors: Dict[str, float] = field(default_factory=dict)


def grad_check(
    objective: Callable[[], torch.Tensor],
    model: torch.nn.Module,
    tolerance: float = 1e-4,
    seed: int = 0,
    num_samples: int = 200,
    rel_step: float = 1e-3,
    error_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients against fourth-order central differences.

    Every parameter tensor contributes one sampled entry first. Further
    entries are drawn only where the analytic gradient is nonzero, until
    `num_samples` entries have been compared (or no such entry exists). The
    step for entry θ is rel_step · max(|θ|, 0.1). The relative error of an
    entry is |g − ĝ| / max(|g|, |ĝ|, error_floor). Entries whose analytic
    gradient is exactly zero and whose numeric gradient vanishes are reported
    as zero-gradient (dead paths) rather than compared.

    Raises:
        GradCheckError: listing every parameter path over `tolerance`.
    """
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    objective().backward()
    analytic = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in params
    }

    report = GradCheckReport(max_rel_error=0.0, checked=0)
    failures = []

    def compare(i: int, flat: int) -> None:
        name, param = params[i]
        view = param.view(-1)
        original = view[flat].item()
        h = rel_step * max(abs(original), 0.1)

        values = {}
        for k in (-2, -1, 1, 2):
            view[flat] = original + k * h
            values[k] = objective().item()
        view[flat] = original

        numeric = (values[-2] - 8 * values[-1] + 8 * values[1] - values[2]) / (12 * h)
        exact = analytic[name].view(-1)[flat].item()
        path = f"{name}[{flat}]"
        if exact == 0.0 and abs(numeric) < 1e-12:
            report.zero_gradient.append(path)
            return

        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), error_floor)
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(f"{path}: analytic {exact:.6e}, numeric {numeric:.6e}, rel {rel:.2e}")
        report.checked += 1
        report.errors[path] = rel
        report.max_rel_error = max(report.max_rel_error, rel)
        if rel > tolerance:
            failures.append(path)

    rng = np.random.default_rng(seed)
    live = []
    for i, (name, _) in enumerate(params):
        nonzero = torch.nonzero(analytic[name].view(-1)).view(-1).numpy()
        if nonzero.size:
            live.append((i, nonzero))

    with torch.no_grad():
        for i, (_, param) in enumerate(params):
            compare(i, int(rng.integers(param.numel())))
        while report.checked < num_samples and live:
            i, nonzero = live[int(rng.integers(len(live)))]
            compare(i, int(nonzero[rng.integers(nonzero.size)]))

    logger.info(
        f"Gradient check: {report.checked} entries checked, "
        f"{len(report.zero_gradient)} zero-gradient, max rel error {report.max_rel_error:.3e}"
    )
    if failures:
        raise GradCheckError(failures)
    return report


def tiny_model_config(mode: str = "cscrl") -> ModelConfig:
    """20³ volumes, P=10, encoder 32/2 blocks/2 heads, decoder 24/1 block/2 heads."""
    return ModelConfig(
        volume_dims=(20, 20, 20),
        patch_size=10,
        encoder_dim=32,
        encoder_depth=2,
        encoder_heads=2,
        decoder_dim=24,
        decoder_depth=1,
        decoder_heads=2,
        mode=mode,
    )


def run_grad_check(
    path: str = "cscrl", tolerance: float = 1e-4, seed: int = 0, num_samples: int = 200
) -> GradCheckReport:
    """Gradient check of the tiny model in double precision.

    `path` is "cscrl" or "mae" (pretraining loss) or "finetune" (smoothed
    cross-entropy through the classification head).
    """
    mode = "cscrl" if path == "finetune" else path
    model = build_model(tiny_model_config(mode), seed=seed).double()
    model.reset_head(seed, 1.0)
    volumes, labels, _ = generate_synthetic(
        SyntheticConfig(dims=(20, 20, 20), samples_per_class={"train": 1}, seed=seed)
    )
    x = torch.as_tensor(volumes, dtype=torch.float64)

    if path == "finetune":
        targets = smooth_labels(torch.as_tensor(labels), 2, 0.1).double()
        objective = finetune_objective(model, x, targets)
    else:
        tokens = patchify_batch(x, model.cfg.patch_size)
        parts = [sample_mask(tokens.shape[1], 0.5, seed + j) for j in range(len(tokens))]
        objective = pretrain_objective(
            model, tokens, MaskBatch.from_partitions(parts), LossWeights()
        )
    return grad_check(objective, model, tolerance=tolerance, seed=seed, num_samples=num_samples)


# checkpoints

CHECKPOINT_MAGIC = b"CSRL"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1}
_TAG_DTYPES = {0: ("<f4", torch.float32), 1: ("<f8", torch.float64)}


def checkpoint_records(
    model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer] = None
) -> List[Tuple[str, torch.Tensor]]:
    """Model state plus AdamW moments as (name, tensor) records."""
    records = list(model.state_dict().items())
    if optimizer is not None:
        for group in optimizer.param_groups:
            for name, param in zip(group.get("names", []), group["params"]):
                state = optimizer.state.get(param)
                if not state:
                    continue
                for key in ("exp_avg", "exp_avg_sq", "step"):
                    value = torch.as_tensor(state[key])
                    if not value.is_floating_point():
                        value = value.double()
                    records.append((f"optim.{name}.{key}", value))
    return records


def save_checkpoint(
    records: Iterable[Tuple[str, torch.Tensor]],
    path: PathLike,
    metadata: Optional[Dict] = None,
) -> str:
    """Write the binary checkpoint and its `.meta.json` sidecar.

    Returns:
        The git-style (blob SHA-1) content hash of the checkpoint bytes.
    """
    records = list(records)
    names = [name for name, _ in records]
    duplicates = {n for n in names if names.count(n) > 1}
    if duplicates:
        raise SchemaError(f"duplicate tensor name(s): {sorted(duplicates)}")

    chunks = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(records))]
    for name, tensor in records:
        tensor = tensor.detach().cpu()
        if tensor.dtype not in _DTYPE_TAGS:
            tensor = tensor.float()
        tag = _DTYPE_TAGS[tensor.dtype]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", tensor.ndim) + struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        chunks.append(struct.pack("<B", tag))
        chunks.append(tensor.contiguous().numpy().astype(_TAG_DTYPES[tag][0]).tobytes())

    blob = b"".join(chunks)
    path = Path(path)
    path.write_bytes(blob)
    content_hash = hashlib.sha1(f"blob {len(blob)}\0".encode() + blob).hexdigest()

    meta = dict(metadata or {})
    meta["content_hash"] = content_hash
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
    log_event("CHECKPOINT_SAVED", {"path": str(path), "tensors": len(records), "hash": content_hash})
    return content_hash


def meta_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".meta.json")


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.raw):
            raise TruncatedPayloadError(f"{self.path}: truncated record at byte {self.offset}")
        chunk = self.raw[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: PathLike) -> Tuple["OrderedDict[str, torch.Tensor]", Dict]:
    """Read a checkpoint and its sidecar metadata (empty dict if absent)."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    version, count = reader.unpack("<IQ")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")

    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (tag,) = reader.unpack("<B")
        if tag not in _TAG_DTYPES:
            raise SchemaError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        np_dtype, torch_dtype = _TAG_DTYPES[tag]
        numel = int(np.prod(shape)) if shape else 1
        payload = reader.take(numel * np.dtype(np_dtype).itemsize)
        if name in tensors:
            raise SchemaError(f"{path}: duplicate tensor name {name!r}")
        array = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(array).to(torch_dtype)

    sidecar = meta_path(path)
    metadata = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return tensors, metadata


def restore_model(model: torch.nn.Module, tensors: Dict[str, torch.Tensor]) -> None:
    """Strict load: every model tensor must be present in the checkpoint."""
    for name in model.state_dict():
        if name not in tensors:
            raise SchemaError(f"checkpoint is missing tensor {name!r}")
    model.load_state_dict({n: tensors[n] for n in model.state_dict()})


def restore_optimizer(optimizer: torch.optim.Optimizer, tensors: Dict[str, torch.Tensor]) -> None:
    for group in optimizer.param_groups:
        for name, param in zip(group.get("names", []), group["params"]):
            prefix = f"optim.{name}."
            if f"{prefix}exp_avg" not in tensors:
                continue
            optimizer.state[param] = {
                "step": tensors[f"{prefix}step"].to(torch.float32),
                "exp_avg": tensors[f"{prefix}exp_avg"].to(param.dtype).clone(),
                "exp_avg_sq": tensors[f"{prefix}exp_avg_sq"].to(param.dtype).clone(),
            }


def load_model(path: PathLike) -> Tuple[CSCRL, Dict]:
    """Rebuild a model from a checkpoint whose sidecar carries `model_config`."""
    tensors, metadata = load_checkpoint(path)
    if "model_config" not in metadata:
        raise SchemaError(f"{path}: sidecar metadata lacks model_config")
    model = CSCRL(ModelConfig.from_dict(metadata["model_config"]))
    restore_model(model, tensors)
    model.eval()
    return model, metadata


def write_history(history: pd.DataFrame, path: PathLike, columns: List[str]) -> None:
    history.reindex(columns=columns).to_csv(path, index=False)
