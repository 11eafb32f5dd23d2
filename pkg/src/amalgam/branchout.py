"""Branch-out selection, task-net regrouping, trunk pruning, and fine-tuning.

Each selected task branches out of the shared student trunk at the block
whose converged held-out loss was lowest (ties go to the earliest block,
which maximizes sharing). A task-specific net is then regrouped as

    [student blocks 1..S] -> filter f_n^S -> [teacher-n blocks S+1..B] -> head

where the student blocks are shared by reference across task nets (they ARE
the trunk) and the teacher segments are frozen-parameter copies promoted to
trainable. Student blocks beyond max(S) are pruned. Finally the task nets
are fine-tuned end to end against the teachers' soft targets -- still no
ground-truth labels anywhere.
"""

import copy
import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .blocknet import BlockifiedNetwork, TaskSelection, block_input, head_features
from .entangle import LossTable, cache_teacher_targets
from .filters import FilterBank, FilterModule
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
from .teachers import TeacherRegistry

EVAL_BATCH = 64


@dataclass(frozen=True)
class BranchPlan:
    """Chosen branch-out block per task."""

    branch_block: dict[int, int]
    num_blocks: int

    def __post_init__(self):
        for task_id, block in self.branch_block.items():
            if not 1 <= block <= self.num_blocks:
                raise ValueError(
                    f"task {task_id} branch block {block} outside [1, {self.num_blocks}]"
                )

    @property
    def trunk_length(self) -> int:
        return max(self.branch_block.values())

    def shared_blocks(self, task_a: int, task_b: int) -> int:
        return min(self.branch_block[task_a], self.branch_block[task_b])


def select_branch_points(table: LossTable, selection: TaskSelection) -> BranchPlan:
    """Per task, the block index minimizing held-out loss; ties break toward
    the smallest index."""
    blocks = table.block_indices
    if not blocks:
        raise ValueError("loss table is empty")
    num_blocks = blocks[-1]
    if blocks != tuple(range(1, num_blocks + 1)):
        raise ValueError(f"loss table blocks {blocks} are not contiguous from 1")
    table.validate_complete(selection, num_blocks)
    chosen = {}
    for task_id in selection.task_ids:
        row = np.asarray([table.entries[(task_id, k)] for k in blocks])
        chosen[task_id] = int(np.argmin(row)) + 1  # argmin returns the first minimum
    return BranchPlan(branch_block=chosen, num_blocks=num_blocks)


# ---------------------------------------------------------------------------
# Regrouped task nets.
# ---------------------------------------------------------------------------


class TaskSpecificNet(nn.Module):
    """One task's regrouped network. Trunk blocks (and the dense stem) are the
    student's own modules, shared by reference with sibling task nets; the
    filter, teacher suffix blocks and teacher head are private copies."""

    def __init__(
        self,
        task_id: int,
        teacher_index: int,
        branch_block: int,
        wiring: str,
        trunk_stem: nn.Module | None,
        trunk_blocks: list[nn.Module],
        filt: FilterModule,
        suffix_blocks: list[nn.Module],
        head: nn.Module,
    ):
        super().__init__()
        self.task_id = task_id
        self.teacher_index = teacher_index
        self.branch_block = branch_block
        self.wiring = wiring
        self.trunk_stem = trunk_stem
        self.trunk_blocks = nn.ModuleList(trunk_blocks)
        self.filt = filt
        self.suffix_blocks = nn.ModuleList(suffix_blocks)
        self.head = head

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        stem_out = self.trunk_stem(batch) if self.trunk_stem is not None else None
        feats: list[torch.Tensor] = []
        for k, block in enumerate(self.trunk_blocks, start=1):
            feats.append(block(block_input(self.wiring, batch, stem_out, feats, k)))
        feats[-1] = self.filt(feats[-1])  # F_un^S stands in for F_u^S from here on
        for k, block in enumerate(self.suffix_blocks, start=self.branch_block + 1):
            feats.append(block(block_input(self.wiring, batch, stem_out, feats, k)))
        return self.head(head_features(self.wiring, feats))


@dataclass
class Trunk:
    """What remains of the student after pruning: blocks 1..max(S) (shared by
    the task nets) plus the dense stem when present."""

    stem: nn.Module | None
    blocks: nn.ModuleList
    length: int


def regroup(
    student: BlockifiedNetwork,
    teachers: TeacherRegistry,
    filter_bank: FilterBank,
    plan: BranchPlan,
    selection: TaskSelection,
) -> tuple[list[TaskSpecificNet], Trunk]:
    """Assemble one TaskSpecificNet per selected task and the pruned trunk.

    Teacher blocks/heads and the connecting filters are deep copies promoted
    to trainable; the teacher registry itself is never mutated. The student
    network object is left untouched -- the trunk view simply stops at
    max(S)."""
    if set(plan.branch_block) != set(selection.task_ids):
        raise ValueError(
            f"plan tasks {sorted(plan.branch_block)} do not match selection {list(selection.task_ids)}"
        )
    num_blocks = student.spec.num_blocks
    if plan.num_blocks != num_blocks:
        raise ValueError(f"plan was made for {plan.num_blocks} blocks, student has {num_blocks}")
    nets = []
    for n, task_id in selection.pairs:
        branch = plan.branch_block[task_id]
        if (n, branch) not in filter_bank:
            raise KeyError(f"filter bank is missing filter ({n}, {branch})")
        teacher_net = teachers[n].network
        filt = copy.deepcopy(filter_bank[(n, branch)])
        suffix = [copy.deepcopy(teacher_net.blocks[j]) for j in range(branch, num_blocks)]
        head = copy.deepcopy(teacher_net.heads[str(task_id)])
        net = TaskSpecificNet(
            task_id=task_id,
            teacher_index=n,
            branch_block=branch,
            wiring=student.spec.wiring,
            trunk_stem=student.stem,
            trunk_blocks=list(student.blocks[:branch]),
            filt=filt,
            suffix_blocks=suffix,
            head=head,
        )
        for p in net.parameters():
            p.requires_grad_(True)  # copied teacher segments now belong to the task net
        nets.append(net)
    trunk = Trunk(
        stem=student.stem,
        blocks=nn.ModuleList(list(student.blocks[: plan.trunk_length])),
        length=plan.trunk_length,
    )
    return nets, trunk


def write_branch_report(
    path: str, plan: BranchPlan, selection: TaskSelection, table: LossTable
) -> None:
    """CSV: task_id, teacher_id, branch_block, shared blocks with each sibling
    task ("t{j}:{min(S_i,S_j)}" entries joined by ';'), loss at the branch."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["task_id", "teacher_id", "branch_block", "shared_blocks_with_each_other_task", "loss_at_branch"]
        )
        for n, task_id in selection.pairs:
            branch = plan.branch_block[task_id]
            shared = ";".join(
                f"t{other}:{plan.shared_blocks(task_id, other)}"
                for other in selection.task_ids
                if other != task_id
            )
            writer.writerow([task_id, n, branch, shared, repr(table.entries[(task_id, branch)])])


# ---------------------------------------------------------------------------
# Fine-tuning against teacher soft targets.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 5
    heldout_fraction: float = 0.25
    temperature: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.heldout_fraction <= 0.5:
            raise ValueError(f"heldout_fraction must be in (0, 0.5], got {self.heldout_fraction}")


@dataclass
class FinetuneReport:
    before: dict[int, float] = field(default_factory=dict)
    after: dict[int, float] = field(default_factory=dict)
    loss_curve: tuple[float, ...] = ()


def _joint_parameter_set(nets: list[TaskSpecificNet]) -> ParameterSet:
    """All task-net parameters, deduplicated by tensor identity so shared
    trunk modules are stepped exactly once per update."""
    named = {}
    seen: set[int] = set()
    for i, net in enumerate(nets):
        for name, p in net.named_parameters():
            if id(p) in seen:
                continue
            seen.add(id(p))
            named[f"net{i}.{name}"] = p
    return ParameterSet(named)


def _heldout_task_losses(
    nets: list[TaskSpecificNet],
    targets: dict[int, torch.Tensor],
    images: torch.Tensor,
    heldout_idx: torch.Tensor,
) -> dict[int, float]:
    out = {}
    with torch.no_grad():
        for net in nets:
            total, count = 0.0, 0
            for batch in batch_indices(heldout_idx.numel(), EVAL_BATCH):
                idx = heldout_idx[batch]
                probs = net(images[idx])
                total += float(binary_cross_entropy_soft(targets[net.task_id][idx], probs).sum())
                count += int(probs.numel())
            out[net.task_id] = total / count
    return out


def finetune(
    nets: list[TaskSpecificNet],
    teachers: TeacherRegistry,
    images: torch.Tensor,
    config: FinetuneConfig,
) -> FinetuneReport:
    """Joint end-to-end training of all task nets against teacher soft targets
    (mean soft cross-entropy over the selected tasks). Shared trunk blocks
    receive one combined update per step. Returns per-task held-out losses
    before and after."""
    selection = TaskSelection(tuple((net.teacher_index, net.task_id) for net in nets))
    targets = cache_teacher_targets(teachers, selection, images, config.temperature)

    count = images.shape[0]
    seed = config.optimizer.seed
    order = torch.randperm(count, generator=generator(derive_seed(seed, "finetune-heldout")))
    n_held = max(1, int(round(count * config.heldout_fraction)))
    heldout_idx, train_idx = order[:n_held], order[n_held:]

    report = FinetuneReport(before=_heldout_task_losses(nets, targets, images, heldout_idx))
    if config.epochs == 0:
        report.after = dict(report.before)
        return report

    params = _joint_parameter_set(nets)
    velocity: dict[str, torch.Tensor] = {}
    opt = config.optimizer
    n_train = train_idx.numel()
    steps_per_epoch = -(-n_train // opt.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    curve = []
    first_epoch_loss = None
    bad_epochs = 0
    for epoch in range(config.epochs):
        shuffle = generator(derive_seed(seed, f"finetune-epoch:{epoch}"))
        epoch_losses = []
        for batch in batch_indices(n_train, opt.batch_size, shuffle):
            idx = train_idx[batch]
            terms = []
            for net in nets:
                probs = net(images[idx])
                terms.append(binary_cross_entropy_soft(targets[net.task_id][idx], probs).mean())
            loss = torch.stack(terms).mean()
            params.zero_grads()
            loss.backward()
            sgd_step(params, params.grads(), opt, step, total_steps, velocity=velocity)
            step += 1
            epoch_losses.append(float(loss.detach()))
        mean_loss = sum(epoch_losses) / len(epoch_losses)
        curve.append(mean_loss)
        if first_epoch_loss is None:
            first_epoch_loss = mean_loss
        bad_epochs = bad_epochs + 1 if mean_loss > 10.0 * first_epoch_loss else 0
        if bad_epochs >= 3:
            raise TrainingDivergenceError(
                f"fine-tune loss {mean_loss:.4f} exceeded 10x the initial "
                f"{first_epoch_loss:.4f} for 3 consecutive epochs"
            )
    params.zero_grads()

    report.after = _heldout_task_losses(nets, targets, images, heldout_idx)
    report.loss_curve = tuple(curve)
    return report
