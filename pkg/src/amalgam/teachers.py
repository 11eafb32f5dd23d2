"""Teacher pretraining and the teacher registry.

A teacher is a blockified network trained on a group of binary presence
labels (multi-label decomposition: one sigmoid head per label, per-task
binary cross-entropy averaged over tasks and batch). The registry holds the
N pretrained teachers, validates that their task groups partition the label
universe, and resolves which teacher owns a selected task.
"""

from dataclasses import dataclass, field

import torch

from .blocknet import ArchitectureSpec, BlockifiedNetwork, PredictionSet, TaskSelection
from .evalmetrics import ScoreMatrix, UndefinedAPError, mean_ap
from .nncore import (
    OptimizerConfig,
    ParameterSet,
    TrainingDivergenceError,
    batch_indices,
    binary_cross_entropy_soft,
    derive_seed,
    generator,
    sgd_step,
)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3


def teacher_loss(predictions: PredictionSet, labels: dict[int, torch.Tensor]) -> torch.Tensor:
    """Mean over tasks and batch of binary cross-entropy against hard labels.

    One binary label per task per sample; labels outside {0, 1} are an error.
    Probabilities are clamped to [1e-7, 1 - 1e-7] inside the cross-entropy.
    """
    missing = [t for t in labels if t not in predictions.probs]
    if missing:
        raise KeyError(f"predictions missing tasks {missing}")
    if not labels:
        raise ValueError("no labels supplied")
    terms = []
    for task_id in sorted(labels):
        y = labels[task_id].to(torch.float32)
        p = predictions[task_id]
        if y.shape != p.shape:
            y = y.reshape(p.shape)
        if not torch.logical_or(y == 0.0, y == 1.0).all():
            raise ValueError(f"labels for task {task_id} are not binary")
        terms.append(binary_cross_entropy_soft(y, p).mean())
    return torch.stack(terms).mean()


@dataclass
class TrainingRecord:
    epochs: int = 0
    loss_curve: tuple[float, ...] = ()
    final_loss: float | None = None
    val_ap: dict[int, float] = field(default_factory=dict)


@dataclass
class TeacherModel:
    network: BlockifiedNetwork
    task_ids: tuple[int, ...]
    record: TrainingRecord = field(default_factory=TrainingRecord)

    def __post_init__(self):
        self.task_ids = tuple(self.task_ids)
        head_ids = set(self.network.spec.task_ids)
        if head_ids != set(self.task_ids):
            raise ValueError(
                f"network heads {sorted(head_ids)} do not match task ids {sorted(self.task_ids)}"
            )


@dataclass
class TeacherRegistry:
    """Ordered pretrained teachers whose task groups tile the label universe."""

    models: list[TeacherModel]
    label_universe: tuple[int, ...]

    def __post_init__(self):
        if not self.models:
            raise ValueError("registry needs at least one teacher")
        self.label_universe = tuple(sorted(self.label_universe))
        seen: set[int] = set()
        for n, teacher in enumerate(self.models):
            overlap = seen & set(teacher.task_ids)
            if overlap:
                raise ValueError(f"teacher {n} reuses task ids {sorted(overlap)}")
            seen |= set(teacher.task_ids)
        if seen != set(self.label_universe):
            raise ValueError(
                f"teacher task ids {sorted(seen)} do not cover the label universe "
                f"{list(self.label_universe)}"
            )

    def __len__(self) -> int:
        return len(self.models)

    def __getitem__(self, n: int) -> TeacherModel:
        return self.models[n]

    def teacher_for_task(self, task_id: int) -> int:
        for n, teacher in enumerate(self.models):
            if task_id in teacher.task_ids:
                return n
        raise KeyError(f"no teacher owns task {task_id}")

    def validate_selection(self, selection: TaskSelection) -> None:
        for n, task_id in selection.pairs:
            if n >= len(self.models):
                raise ValueError(f"selection names teacher {n}; registry has {len(self.models)}")
            if task_id not in self.models[n].task_ids:
                raise ValueError(
                    f"task {task_id} is not among teacher {n}'s tasks {list(self.models[n].task_ids)}"
                )

    def shared_trunk_spec(self) -> ArchitectureSpec:
        """The common trunk architecture, validated identical across teachers
        (heads may differ; blocks, wiring and shapes may not)."""
        first = self.models[0].network.spec
        key = (first.input_shape, first.block_channels, first.block_strides, first.wiring,
               first.stem_channels)
        for n, teacher in enumerate(self.models[1:], start=1):
            s = teacher.network.spec
            if (s.input_shape, s.block_channels, s.block_strides, s.wiring, s.stem_channels) != key:
                raise ValueError(f"teacher {n} trunk architecture differs from teacher 0")
        return first


def _batch_labels(label_matrix: torch.Tensor, idx: torch.Tensor, task_ids) -> dict[int, torch.Tensor]:
    return {t: label_matrix[idx, t].unsqueeze(1) for t in task_ids}


def predict_scores(net: BlockifiedNetwork, images: torch.Tensor, task_ids,
                   batch_size: int = 64) -> torch.Tensor:
    """Score a stack of images in eval mode; returns (N, len(task_ids))."""
    cols = []
    with torch.no_grad():
        for idx in batch_indices(images.shape[0], batch_size):
            preds = net.forward_collect(images[idx]).predictions
            cols.append(torch.cat([preds[t] for t in task_ids], dim=1))
    return torch.cat(cols, dim=0)


def pretrain_teacher(
    net: BlockifiedNetwork,
    images: torch.Tensor,
    label_matrix: torch.Tensor,
    task_ids,
    config: OptimizerConfig,
    epochs: int,
    val_fraction: float = 0.2,
) -> TeacherModel:
    """SGD training of one teacher on its task group's labels.

    A deterministic seeded shuffle carves off a validation split; batches are
    re-shuffled per epoch; the poly learning-rate schedule spans all epochs.
    Aborts with TrainingDivergenceError if the epoch loss exceeds 10x the
    first epoch's for 3 consecutive epochs. epochs=0 is a no-op that returns
    the untouched network.
    """
    task_ids = tuple(task_ids)
    if epochs == 0:
        return TeacherModel(net, task_ids)
    count = images.shape[0]
    split_gen = generator(derive_seed(config.seed, "teacher-split"))
    order = torch.randperm(count, generator=split_gen)
    n_val = max(1, int(round(count * val_fraction))) if val_fraction > 0 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    params = ParameterSet.from_module(net)
    velocity: dict[str, torch.Tensor] = {}
    steps_per_epoch = -(-train_idx.numel() // config.batch_size)
    total_steps = epochs * steps_per_epoch
    step = 0
    curve = []
    first_epoch_loss = None
    bad_epochs = 0
    for epoch in range(epochs):
        epoch_gen = generator(derive_seed(config.seed, f"teacher-epoch:{epoch}"))
        epoch_losses = []
        for batch in batch_indices(train_idx.numel(), config.batch_size, epoch_gen):
            idx = train_idx[batch]
            preds = net.forward_collect(images[idx]).predictions
            loss = teacher_loss(preds, _batch_labels(label_matrix, idx, task_ids))
            params.zero_grads()
            loss.backward()
            sgd_step(params, params.grads(), config, step, total_steps, velocity=velocity)
            step += 1
            epoch_losses.append(float(loss.detach()))
        mean_loss = sum(epoch_losses) / len(epoch_losses)
        curve.append(mean_loss)
        if first_epoch_loss is None:
            first_epoch_loss = mean_loss
        bad_epochs = bad_epochs + 1 if mean_loss > DIVERGENCE_FACTOR * first_epoch_loss else 0
        if bad_epochs >= DIVERGENCE_PATIENCE:
            raise TrainingDivergenceError(
                f"epoch loss {mean_loss:.4f} above {DIVERGENCE_FACTOR}x the initial "
                f"{first_epoch_loss:.4f} for {DIVERGENCE_PATIENCE} consecutive epochs"
            )
    params.zero_grads()

    val_ap: dict[int, float] = {}
    if n_val:
        scores = predict_scores(net, images[val_idx], task_ids)
        truths = torch.stack([label_matrix[val_idx, t] for t in task_ids], dim=1)
        try:
            result = mean_ap(ScoreMatrix(scores.numpy(), truths.numpy()), protocol="area")
            val_ap = {task_ids[i]: ap for i, ap in result.per_label.items()}
        except UndefinedAPError:  # tiny validation split with no positives at all
            val_ap = {}

    record = TrainingRecord(epochs=epochs, loss_curve=tuple(curve), final_loss=curve[-1], val_ap=val_ap)
    return TeacherModel(net, task_ids, record)
