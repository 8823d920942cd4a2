"""Label-smoothed multi-branch training: loss, SGD with momentum, schedule,
and the epoch loop.

The per-branch losses are fused by arithmetic mean, which keeps the trunk
gradient magnitude comparable to a single-branch net regardless of the
branch count. Weight decay is folded into the gradient before momentum
(v <- mu*v + g + lambda*theta; theta <- theta - lr*v); BN gamma/beta and
biases are exempt from decay.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Mapping, Optional, Sequence

import numpy as np

from . import data as data_io
from .augment import AugmentConfig, RngStream, augment_pipeline, epoch_shuffle
from .model import BranchedNetConfig, BranchedNetwork, build_branched_net
from .tensor import Tape, Tensor, residual_add, reverse_pass, scale, softmax_cross_entropy


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; message carries the epoch/batch diagnostics."""


@dataclass
class TrainConfig:
    batch_size: int = 128
    total_epochs: int = 95
    base_lr: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_interval_epochs: int = 30
    weight_decay: float = 0.0001
    momentum: float = 0.9
    smoothing_epsilon: float = 0.1
    seed: int = 0
    num_classes: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.smoothing_epsilon <= 1.0:
            raise ValueError(
                f"smoothing_epsilon must be in [0,1], got {self.smoothing_epsilon}")
        if self.total_epochs < 0:
            raise ValueError(f"total_epochs must be >= 0, got {self.total_epochs}")
        if self.lr_decay_interval_epochs < 1:
            raise ValueError("lr_decay_interval_epochs must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")


class OptimizerState:
    """One zero-initialized velocity buffer per parameter, matching shapes."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.velocities: dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in params.items()}


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    branch_losses: tuple[float, ...]
    wall_seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    eval_reports: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# loss

def smooth_labels(y: int, num_classes: int, epsilon: float) -> np.ndarray:
    """Probability vector with 1 - eps + eps/K on the true class and eps/K
    elsewhere. The float rounding residue of the sum is folded back into
    the true class so the vector sums to exactly 1.0 (strict downstream
    validators, np.random.choice)."""
    k = num_classes
    if not 0 <= y < k:
        raise ValueError(f"class index {y} out of range [0, {k})")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0,1], got {epsilon}")
    p = np.full(k, epsilon / k, dtype=np.float64)
    p[y] += 1.0 - epsilon
    for _ in range(4):
        residue = p.sum() - 1.0
        if residue == 0.0:
            break
        p[y] -= residue
    return p


def smooth_label_matrix(labels: Sequence[int], num_classes: int,
                        epsilon: float) -> np.ndarray:
    return np.stack([smooth_labels(int(y), num_classes, epsilon) for y in labels])


def smoothed_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean batch cross entropy against smoothed target rows; the gradient
    w.r.t. the logits is (softmax(logits) - targets) / N."""
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError(f"targets must be 2-D [N,K], got shape {t.shape}")
    row_sums = t.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        worst = int(np.abs(row_sums - 1.0).argmax())
        raise ValueError(
            f"target row {worst} sums to {row_sums[worst]!r}, not 1 within 1e-9")
    return softmax_cross_entropy(logits, t)


def combined_branch_loss(branch_logits: Sequence[Tensor], targets: np.ndarray,
                         return_branch_losses: bool = False):
    """Arithmetic mean of per-branch smoothed cross entropies.

    The trunk gradient is the mean of the branch contributions; each
    branch's own parameters see only their (1/K_b)-scaled loss gradient.
    """
    if not branch_logits:
        raise ValueError("combined_branch_loss needs at least one branch")
    shapes = {t.shape for t in branch_logits}
    if len(shapes) != 1:
        raise ValueError(f"branch logits must share one shape, got {sorted(shapes)}")
    losses = [smoothed_cross_entropy(logits, targets) for logits in branch_logits]
    total = losses[0]
    for loss in losses[1:]:
        total = residual_add(total, loss)
    combined = scale(total, 1.0 / len(losses))
    if return_branch_losses:
        return combined, losses
    return combined


# ---------------------------------------------------------------------------
# optimizer and schedule

_DECAY_EXEMPT_SUFFIXES = (".bias", ".gamma", ".beta")


def is_decay_exempt(name: str) -> bool:
    return name.endswith(_DECAY_EXEMPT_SUFFIXES)


def sgd_momentum_step(params: Mapping[str, Tensor],
                      grads: Mapping[str, np.ndarray],
                      state: OptimizerState, lr: float,
                      momentum: float, weight_decay: float) -> None:
    """v <- mu*v + g + lambda*theta; theta <- theta - lr*v (in place).

    Decay is folded into the gradient before momentum; BN gamma/beta and
    biases are exempt from decay.
    """
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.data.shape:
            raise ValueError(
                f"gradient shape {grad.shape} != parameter {name} shape {param.data.shape}")
        v = state.velocities[name]
        if v.shape != param.data.shape:
            raise ValueError(
                f"velocity shape {v.shape} != parameter {name} shape {param.data.shape}")
        effective = grad if (weight_decay == 0.0 or is_decay_exempt(name)) \
            else grad + weight_decay * param.data
        v *= momentum
        v += effective
        param.data -= lr * v


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """base_lr * factor^floor(epoch / interval), computed in decimal so the
    returned rates equal the configured literals exactly (0.05 -> 0.005,
    not 0.005000000000000001)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    steps = epoch // config.lr_decay_interval_epochs
    return float(Decimal(repr(config.base_lr)) * Decimal(repr(config.lr_decay_factor)) ** steps)


# ---------------------------------------------------------------------------
# the epoch loop

def _augment_batch(dataset, indices: np.ndarray, epoch: int,
                   augment_config: AugmentConfig, seed: int, dtype,
                   workers: int) -> np.ndarray:
    def one(i: int) -> np.ndarray:
        stream = RngStream(global_seed=seed, epoch=epoch, sample_index=int(i))
        return augment_pipeline(dataset.images[i], augment_config, stream,
                                dtype=dtype).data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tensors = list(pool.map(one, [int(i) for i in indices]))
    else:
        tensors = [one(int(i)) for i in indices]
    return np.stack(tensors)


def train(net: BranchedNetwork, dataset, train_config: TrainConfig,
          augment_config: AugmentConfig, *,
          eval_dataset=None, eval_batch_size: int = 256,
          start_epoch: int = 0, optimizer_state: Optional[OptimizerState] = None,
          workers: int = 1, log=None):
    """Run the epoch loop and return (Checkpoint, TrainHistory).

    Each epoch: fresh permutation, per-sample augmentation keyed by
    (seed, epoch, dataset index), forward of all branches, mean branch
    loss, reverse pass, SGD step at the scheduled rate. The last incomplete
    batch is kept. ``start_epoch``/``optimizer_state`` resume a checkpointed
    run; augmentation streams are keyed by epoch, so a resumed run is
    bitwise identical to an uninterrupted one.
    """
    if len(dataset.images) == 0:
        raise ValueError("training dataset is empty")
    if train_config.num_classes != net.config.num_classes:
        raise ValueError(
            f"train num_classes {train_config.num_classes} != model "
            f"num_classes {net.config.num_classes}")
    params = net.named_parameters()
    state = optimizer_state if optimizer_state is not None else OptimizerState(params)
    history = TrainHistory()
    dtype = next(iter(params.values())).dtype if params else np.float64
    n = len(dataset.images)
    kb = net.config.num_branches

    for epoch in range(start_epoch, train_config.total_epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(train_config, epoch)
        order = epoch_shuffle(n, epoch, train_config.seed)
        loss_sums = np.zeros(kb)
        batches = 0
        for lo in range(0, n, train_config.batch_size):
            batch_idx = order[lo:lo + train_config.batch_size]
            batch = Tensor(_augment_batch(dataset, batch_idx, epoch, augment_config,
                                          train_config.seed, dtype, workers))
            targets = smooth_label_matrix(dataset.labels[batch_idx],
                                          train_config.num_classes,
                                          train_config.smoothing_epsilon)
            net.zero_grad()
            try:
                with Tape() as tape:
                    branch_logits = net.forward_all_branches(batch, mode="train")
                    combined, branch_losses = combined_branch_loss(
                        branch_logits, targets, return_branch_losses=True)
            except ValueError as exc:
                if "non-finite" not in str(exc):
                    raise
                raise TrainingDivergedError(
                    f"non-finite values at epoch {epoch}, batch {batches} "
                    f"(first sample index {int(batch_idx[0])}): {exc}") from exc
            loss_value = combined.item()
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_value} at epoch {epoch}, "
                    f"batch {batches} (first sample index {int(batch_idx[0])})")
            reverse_pass(tape, combined)
            grads = {name: p.grad for name, p in params.items()}
            sgd_momentum_step(params, grads, state, lr,
                              train_config.momentum, train_config.weight_decay)
            loss_sums += [bl.item() for bl in branch_losses]
            batches += 1
        record = EpochRecord(epoch=epoch, lr=lr,
                             branch_losses=tuple(float(v) for v in
                                                 loss_sums / max(batches, 1)),
                             wall_seconds=time.perf_counter() - t0)
        history.epochs.append(record)
        if log is not None:
            losses = " ".join(f"{v:.4f}" for v in record.branch_losses)
            log(f"epoch {epoch:3d}  lr {lr:g}  branch losses {losses}  "
                f"({record.wall_seconds:.1f}s)")

    if eval_dataset is not None and len(eval_dataset.images) > 0:
        from .evaluation import evaluate
        history.eval_reports.append(
            evaluate(net, eval_dataset, batch_size=eval_batch_size,
                     augment_config=augment_config))

    checkpoint = data_io.Checkpoint(
        model_config=net.config,
        train_config=train_config,
        augment_config=augment_config,
        epoch=train_config.total_epochs,
        rng_cursor={"global_seed": train_config.seed,
                    "next_epoch": train_config.total_epochs},
        tensors=_collect_state(net, state))
    return checkpoint, history


def _collect_state(net: BranchedNetwork, state: OptimizerState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, t in net.state().items():
        tensors[f"model/{name}"] = t.data.copy()
    for name, v in state.velocities.items():
        tensors[f"optimizer/{name}"] = v.copy()
    return tensors


def restore_network(checkpoint) -> tuple[BranchedNetwork, OptimizerState]:
    """Rebuild a network and optimizer state from a checkpoint's tensors."""
    cfg: BranchedNetConfig = checkpoint.model_config
    sample = next((a for k, a in checkpoint.tensors.items() if k.startswith("model/")), None)
    dtype = sample.dtype if sample is not None else np.float64
    net = build_branched_net(cfg, seed=checkpoint.train_config.seed, dtype=dtype)
    for name, tensor in net.state().items():
        key = f"model/{name}"
        if key not in checkpoint.tensors:
            raise ValueError(f"checkpoint is missing tensor {key!r}")
        stored = checkpoint.tensors[key]
        if stored.shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint tensor {key!r} has shape {stored.shape}, "
                f"expected {tensor.data.shape}")
        tensor.data = stored.copy()
    params = net.named_parameters()
    state = OptimizerState(params)
    for name in params:
        key = f"optimizer/{name}"
        if key in checkpoint.tensors:
            state.velocities[name] = checkpoint.tensors[key].copy()
    return net, state


# ---------------------------------------------------------------------------
# history export

def history_csv(history: TrainHistory, num_branches: int) -> str:
    """Deterministic CSV: epoch, lr, per-branch mean loss. Wall time is
    deliberately not included (it would differ between otherwise identical
    runs); see timings_csv."""
    header = ["epoch", "lr"] + [f"loss_branch_{i + 1}" for i in range(num_branches)]
    lines = [",".join(header)]
    for rec in history.epochs:
        lines.append(",".join([str(rec.epoch), repr(rec.lr)]
                              + [repr(v) for v in rec.branch_losses]))
    return "\n".join(lines) + "\n"


def timings_csv(history: TrainHistory) -> str:
    lines = ["epoch,wall_seconds"]
    for rec in history.epochs:
        lines.append(f"{rec.epoch},{rec.wall_seconds:.6f}")
    return "\n".join(lines) + "\n"
