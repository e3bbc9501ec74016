"""One-stage training of the two-branch model, metrics and schedules."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Split, Splits, make_views
from .errors import ConfigurationError, ContractViolation, TrainingDiverged
from .losses import class_prior, composite_loss, crcl_loss, cross_entropy, logit_adjusted_ce
from .qnn import ModelConfig, Network, build_network, forward_two_branch
from .rng import seed_streams
from .tensor import ParamGroup, Tensor

log = logging.getLogger(__name__)

OBJECTIVES = ("ccqnet", "ce")
LR_DIRECTIONS = ("quadratic_slower", "linear_slower")


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 200
    base_lr: float = 0.1
    alpha: float = 5e-5
    lr_direction: str = "quadratic_slower"
    tau_lc: float = 1.0
    objective: str = "ccqnet"
    aug_prob: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.alpha < 1:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 (batch norm)")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")
        if self.base_lr < 0:
            raise ConfigurationError("base_lr must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.lr_direction not in LR_DIRECTIONS:
            raise ConfigurationError(f"lr_direction must be one of {LR_DIRECTIONS}, got {self.lr_direction!r}")


def cosine_lr(base: float, t: float, total: float) -> float:
    if not 0 <= t <= total:
        raise ConfigurationError(f"epoch {t} outside [0, {total}]")
    return base * 0.5 * (1.0 + math.cos(math.pi * t / total))


def group_rates(cfg: TrainConfig, epoch: int) -> tuple[float, float]:
    """(linear, quadratic) learning rates for an epoch."""
    lr = cosine_lr(cfg.base_lr, epoch, cfg.epochs)
    if cfg.lr_direction == "quadratic_slower":
        return lr, cfg.alpha * lr
    return cfg.alpha * lr, lr


def sgd_step(groups: dict[str, ParamGroup], lr_linear: float, lr_quadratic: float) -> None:
    """Plain SGD with one rate per group; gradients are cleared afterwards."""
    rates = {"linear": lr_linear, "quadratic": lr_quadratic}
    for tag, group in groups.items():
        for p in group.members:
            if p.grad is None:
                raise ContractViolation(f"parameter {p.name or '?'} in group {tag!r} has no gradient")
    for tag, group in groups.items():
        lr = rates[tag]
        for p in group.members:
            if lr != 0.0:
                p.data -= lr * p.grad
            p.grad = None


def ib_rate(n_normal: int, n_fault: int) -> float:
    if n_fault <= 0:
        raise ConfigurationError("fault count must be positive")
    return n_normal / n_fault


# ---------------------------------------------------------------- metrics


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows true, columns predicted
    acc: float
    f1: float
    mcc: float
    micro_acc: float

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "f1": self.f1,
            "mcc": self.mcc,
            "micro_acc": self.micro_acc,
            "n_samples": int(self.confusion.sum()),
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den != 0)


def metrics_from_confusion(cm) -> EvalReport:
    """Macro precision ("ACC"), macro F1 and multi-class MCC.

    Zero denominators contribute 0, including the MCC of a constant predictor.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ConfigurationError("cannot score an empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    acc = float(_safe_div(tp, tp + fp).mean())
    f1 = float(_safe_div(2 * tp, 2 * tp + fp + fn).mean())
    c = tp.sum()
    s = float(total)
    p = cm.sum(axis=0).astype(np.float64)
    t = cm.sum(axis=1).astype(np.float64)
    den = math.sqrt((s * s - (p * p).sum()) * (s * s - (t * t).sum()))
    mcc = float((c * s - (p * t).sum()) / den) if den > 0 else 0.0
    return EvalReport(cm, acc, f1, mcc, float(c / s))


def predict(network: Network, x: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits and unit-norm projections for a [N, n] array."""
    logits, emb = [], []
    for lo in range(0, len(x), batch_size):
        feats = network.features(Tensor(x[lo : lo + batch_size, None, :]), training=False)
        logits.append(network.heads.classify(feats).data)
        emb.append(network.heads.project(feats).data)
    return np.concatenate(logits), np.concatenate(emb)


def evaluate(network: Network, split: Split, batch_size: int = 256) -> EvalReport:
    if len(split) == 0:
        raise ConfigurationError("cannot evaluate an empty split")
    logits, _ = predict(network, split.x, batch_size)
    return metrics_from_confusion(confusion_matrix(split.y, logits.argmax(axis=1), network.cfg.n_classes))


# ---------------------------------------------------------------- training loop


@dataclass
class EpochStats:
    epoch: int
    lr_linear: float
    lr_quadratic: float
    train_crcl: float
    train_lce: float
    val_acc: float
    val_f1: float
    val_mcc: float

    FIELDS = ("epoch", "lr_linear", "lr_quadratic", "train_crcl", "train_lce", "val_acc", "val_f1", "val_mcc")


@dataclass
class TrainResult:
    network: Network  # holds the best-validation parameters
    history: list[EpochStats]
    step_losses: list[float]
    best_epoch: int
    best_val_f1: float
    prior: np.ndarray
    best_state: dict = field(repr=False, default_factory=dict)


def write_stats_csv(path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EpochStats.FIELDS)
        for row in history:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """ceil(n / B) batches from a fresh permutation; the last one is topped up at random."""
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        idx = perm[lo : lo + batch_size]
        if len(idx) < batch_size:
            idx = np.concatenate([idx, rng.integers(0, n, batch_size - len(idx))])
        yield idx


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    splits: Splits,
    stats_csv=None,
    freeze_quadratic: bool = False,
) -> TrainResult:
    """Train on ``splits.train``, keep the epoch with the best validation macro-F1.

    ``freeze_quadratic`` zeroes the quadratic group's learning rate.
    """
    cfg.validate()
    n_classes = model_cfg.n_classes
    if splits.n_classes != n_classes:
        raise ConfigurationError(f"data has {splits.n_classes} classes, model expects {n_classes}")
    if splits.train.x.shape[1] != model_cfg.backbone.input_len:
        raise ConfigurationError(
            f"window length {splits.train.x.shape[1]} != model input_len {model_cfg.backbone.input_len}"
        )
    streams = seed_streams(cfg.seed)
    network = build_network(model_cfg, streams["init"])
    # the CE baseline never touches the projection head
    groups = network.param_groups(exclude=("head.proj",) if cfg.objective == "ce" else ())
    prior = class_prior(splits.train.y, n_classes)
    train_x, train_y = splits.train.x, splits.train.y

    history: list[EpochStats] = []
    step_losses: list[float] = []
    best_f1, best_epoch, best_state = -math.inf, -1, {}
    for epoch in range(cfg.epochs):
        lr_l, lr_q = group_rates(cfg, epoch)
        if freeze_quadratic:
            lr_q = 0.0
        crcl_sum = lce_sum = 0.0
        steps = 0
        for step, idx in enumerate(_batches(len(train_y), cfg.batch_size, streams["order"])):
            raw, y = train_x[idx], train_y[idx]
            if cfg.objective == "ccqnet":
                views = make_views(raw, streams["augment"], cfg.aug_prob)
                logits, emb = forward_two_branch(network, raw, views, training=True)
                crcl = crcl_loss(emb, np.concatenate([y, y]), reduction="mean")
                lce = logit_adjusted_ce(logits, y, prior, cfg.tau_lc, reduction="mean")
                loss = composite_loss(crcl, lce)
                crcl_val = crcl.item()
            else:
                lce = cross_entropy(network(Tensor(raw[:, None, :]), training=True), y, reduction="mean")
                loss, crcl_val = lce, 0.0
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} step {step} "
                    f"(lr_linear={lr_l:.3g}, lr_quadratic={lr_q:.3g}, crcl={crcl_val}, lce={lce.item()})"
                )
            loss.backward()
            sgd_step(groups, lr_l, lr_q)
            step_losses.append(value)
            crcl_sum += crcl_val
            lce_sum += lce.item()
            steps += 1

        val = evaluate(network, splits.val)
        stats = EpochStats(epoch, lr_l, lr_q, crcl_sum / steps, lce_sum / steps, val.acc, val.f1, val.mcc)
        history.append(stats)
        log.info(
            "epoch %d lr=%.4g crcl=%.4f lce=%.4f val_f1=%.4f",
            epoch,
            lr_l,
            stats.train_crcl,
            stats.train_lce,
            val.f1,
        )
        if stats_csv is not None:
            write_stats_csv(stats_csv, history)
        if val.f1 > best_f1:
            best_f1, best_epoch, best_state = val.f1, epoch, network.state_dict()

    network.load_state_dict(best_state)
    return TrainResult(network, history, step_losses, best_epoch, best_f1, prior, best_state)
