"""Block-wise entangled amalgamation.

The student trunk is trained one block at a time against frozen teachers on
unlabeled images. For block k, the student's block-k feature is pushed
through each teacher's learnable channel filter and substituted into that
teacher at position k; the teacher's remaining blocks then produce
predictions for the selected tasks, and the loss is the soft binary
cross-entropy between those substituted predictions and the teacher's own
predictions, averaged over the |C| selected tasks. Only student block k and
the block-k filters receive updates; blocks before k (and their filters)
stay frozen, and teachers are never modified.

Because everything upstream of block k is frozen, the student prefix
features and the teachers' own predictions are constants: both are computed
once and cached, which keeps the per-step cost at one student block, one
filter and one teacher suffix per teacher.

Each block's converged held-out loss is recorded per task into a LossTable,
which downstream branch-point selection consumes.
"""

import csv
import os
from dataclasses import dataclass, field

import torch

from .blocknet import (
    BlockifiedNetwork,
    FeatureMap,
    ForwardTrace,
    PredictionSet,
    SpecValidationError,
    TaskHeadSpec,
    TaskSelection,
    build_network,
    dense_block_input,
)
from .filters import FilterBank, make_filter_bank
from .nncore import (
    PROB_EPS,
    OptimizerConfig,
    ParameterSet,
    batch_indices,
    binary_cross_entropy_soft,
    derive_seed,
    generator,
    sgd_step,
)
from .teachers import TeacherRegistry

EVAL_BATCH = 64

INIT_MODES = ("random", "clone")


@dataclass(frozen=True)
class AmalgamationConfig:
    """Settings for one amalgamation run.

    init_mode is "random" or "clone:N" (copy teacher N's trunk parameters
    into the student). plateau_window > 0 enables early stop of a block's
    training once the held-out loss stops improving over that many epochs.
    """

    selection: TaskSelection
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs_per_block: int = 10
    heldout_fraction: float = 0.25
    plateau_window: int = 0
    init_mode: str = "random"
    temperature: float = 1.0
    filter_reduction: int = 4

    def __post_init__(self):
        if self.epochs_per_block < 1:
            raise ValueError("epochs_per_block must be a positive integer")
        if not 0.0 < self.heldout_fraction <= 0.5:
            raise ValueError(f"heldout_fraction must be in (0, 0.5], got {self.heldout_fraction}")
        if self.plateau_window < 0:
            raise ValueError("plateau_window must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        mode = self.init_mode.split(":")[0]
        if mode not in INIT_MODES:
            raise ValueError(f"init_mode must be 'random' or 'clone:N', got '{self.init_mode}'")

    def clone_source(self) -> int | None:
        if self.init_mode.startswith("clone"):
            _, _, n = self.init_mode.partition(":")
            return int(n) if n else 0
        return None


# ---------------------------------------------------------------------------
# Loss.
# ---------------------------------------------------------------------------


def per_task_amalgamation_losses(
    teacher_preds: PredictionSet,
    substituted_preds: PredictionSet,
    selection: TaskSelection,
) -> dict[int, torch.Tensor]:
    """Batch-averaged soft cross-entropy per selected task. Teacher predictions
    are treated as constants (detached)."""
    losses = {}
    for _, task_id in selection.pairs:
        if task_id not in teacher_preds.probs or task_id not in substituted_preds.probs:
            raise KeyError(f"selected task {task_id} missing from a prediction set")
        target = teacher_preds[task_id].detach()
        losses[task_id] = binary_cross_entropy_soft(target, substituted_preds[task_id]).mean()
    return losses


def amalgamation_loss(
    teacher_preds: PredictionSet,
    substituted_preds: PredictionSet,
    selection: TaskSelection,
) -> torch.Tensor:
    """(1/|C|) * sum over selected tasks of soft binary cross-entropy between
    the teacher's own predictions and the substituted predictions."""
    losses = per_task_amalgamation_losses(teacher_preds, substituted_preds, selection)
    return torch.stack([losses[t] for t in sorted(losses)]).sum() / selection.total


def temperature_scale(probs: torch.Tensor, temperature: float) -> torch.Tensor:
    """Soften probabilities by dividing their logits by the temperature."""
    if temperature == 1.0:
        return probs
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return torch.sigmoid(torch.logit(p) / temperature)


# ---------------------------------------------------------------------------
# Loss table.
# ---------------------------------------------------------------------------


@dataclass
class LossTable:
    """Converged held-out loss per (task, block), plus the per-epoch curves."""

    entries: dict[tuple[int, int], float] = field(default_factory=dict)
    curves: dict[tuple[int, int], tuple[float, ...]] = field(default_factory=dict)

    @property
    def task_ids(self) -> tuple[int, ...]:
        return tuple(sorted({t for t, _ in self.entries}))

    @property
    def block_indices(self) -> tuple[int, ...]:
        return tuple(sorted({k for _, k in self.entries}))

    def row(self, task_id: int) -> list[float]:
        return [self.entries[(task_id, k)] for k in self.block_indices]

    def record(self, task_id: int, block_index: int, loss: float, curve=()) -> None:
        self.entries[(task_id, block_index)] = float(loss)
        if curve:
            self.curves[(task_id, block_index)] = tuple(float(v) for v in curve)

    def validate_complete(self, selection: TaskSelection, num_blocks: int) -> None:
        missing = [
            (t, k)
            for t in selection.task_ids
            for k in range(1, num_blocks + 1)
            if (t, k) not in self.entries
        ]
        if missing:
            raise ValueError(f"loss table incomplete; missing entries {missing}")


def write_loss_table(path: str, table: LossTable) -> None:
    """CSV with one row per (task, block); per-epoch curves go to sibling files
    referenced by relative path. Floats use repr() for byte-stable reruns."""
    directory = os.path.dirname(os.path.abspath(path))
    curve_dirname = os.path.splitext(os.path.basename(path))[0] + "_curves"
    os.makedirs(os.path.join(directory, curve_dirname), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "block_index", "heldout_loss", "epoch_curve_path"])
        for task_id, block_index in sorted(table.entries):
            curve_rel = ""
            curve = table.curves.get((task_id, block_index))
            if curve:
                curve_rel = f"{curve_dirname}/task{task_id}_block{block_index}.csv"
                with open(os.path.join(directory, curve_rel), "w", newline="") as cfh:
                    cwriter = csv.writer(cfh)
                    cwriter.writerow(["epoch", "heldout_loss"])
                    for epoch, value in enumerate(curve):
                        cwriter.writerow([epoch, repr(value)])
            writer.writerow(
                [task_id, block_index, repr(table.entries[(task_id, block_index)]), curve_rel]
            )


def read_loss_table(path: str) -> LossTable:
    directory = os.path.dirname(os.path.abspath(path))
    table = LossTable()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            task_id = int(row["task_id"])
            block_index = int(row["block_index"])
            table.entries[(task_id, block_index)] = float(row["heldout_loss"])
            curve_rel = row.get("epoch_curve_path") or ""
            if curve_rel:
                curve_path = os.path.join(directory, curve_rel)
                if os.path.exists(curve_path):
                    with open(curve_path, newline="") as cfh:
                        curve = [float(r["heldout_loss"]) for r in csv.DictReader(cfh)]
                    table.curves[(task_id, block_index)] = tuple(curve)
    return table


# ---------------------------------------------------------------------------
# Student construction.
# ---------------------------------------------------------------------------


def student_spec_from(teachers: TeacherRegistry, selection: TaskSelection):
    """Student architecture: the teachers' shared trunk plus one head per
    selected task (arity copied from the owning teacher's head)."""
    trunk = teachers.shared_trunk_spec()
    heads = []
    for n, task_id in selection.pairs:
        arity = teachers[n].network.spec.head_arity(task_id)
        heads.append(TaskHeadSpec(task_id, arity))
    return type(trunk)(
        input_shape=trunk.input_shape,
        block_channels=trunk.block_channels,
        block_strides=trunk.block_strides,
        task_heads=tuple(heads),
        wiring=trunk.wiring,
        stem_channels=trunk.stem_channels,
    )


def init_student(
    teachers: TeacherRegistry, config: AmalgamationConfig, seed: int
) -> BlockifiedNetwork:
    """Fresh student: random trunk by default, or a copy of one teacher's trunk
    in clone mode (heads are always freshly initialized)."""
    spec = student_spec_from(teachers, config.selection)
    student = build_network(spec, derive_seed(seed, "student-init"), producer="student")
    source = config.clone_source()
    if source is not None:
        if source >= len(teachers):
            raise SpecValidationError(f"clone source teacher {source} does not exist")
        donor = teachers[source].network
        student.blocks.load_state_dict(donor.blocks.state_dict())
        if student.stem is not None:
            student.stem.load_state_dict(donor.stem.state_dict())
    return student


# ---------------------------------------------------------------------------
# Block-wise training.
# ---------------------------------------------------------------------------


@dataclass
class AmalgamationState:
    """Mutable state of one run: the student under construction, the filter
    bank, the last completed block, and the loss table being filled in.

    The private fields cache everything the frozen prefix makes constant:
    the held-out/train index split, per-task teacher soft targets over all
    samples, the student's frozen prefix features, and (dense wiring only)
    each teacher's own full feature trace.
    """

    student: BlockifiedNetwork
    filter_bank: FilterBank
    selection: TaskSelection
    block_index: int = 0
    loss_table: LossTable = field(default_factory=LossTable)
    train_idx: torch.Tensor | None = None
    heldout_idx: torch.Tensor | None = None
    targets: dict[int, torch.Tensor] = field(default_factory=dict)
    _prefix: torch.Tensor | None = None
    _stem_cache: torch.Tensor | None = None
    _feats_cache: list[torch.Tensor] = field(default_factory=list)
    _dense_input: torch.Tensor | None = None
    _teacher_traces: dict[int, ForwardTrace] = field(default_factory=dict)


def _forward_in_batches(fn, count: int, batch: int = EVAL_BATCH) -> torch.Tensor:
    return torch.cat([fn(idx) for idx in batch_indices(count, batch)], dim=0)


def cache_teacher_targets(
    teachers: TeacherRegistry,
    selection: TaskSelection,
    images: torch.Tensor,
    temperature: float = 1.0,
) -> dict[int, torch.Tensor]:
    """Each selected task's teacher predictions over the full unlabeled set,
    computed once (teachers are frozen for the entire run)."""
    targets: dict[int, torch.Tensor] = {}
    count = images.shape[0]
    with torch.no_grad():
        for n in selection.teacher_indices:
            net = teachers[n].network
            wanted = selection.for_teacher(n)
            preds = _forward_in_batches(
                lambda idx, net=net, wanted=wanted: torch.cat(
                    [net.forward_collect(images[idx]).predictions[t] for t in wanted], dim=1
                ),
                count,
            )
            offset = 0
            for task_id in wanted:
                arity = teachers[n].network.spec.head_arity(task_id)
                targets[task_id] = temperature_scale(
                    preds[:, offset : offset + arity], temperature
                )
                offset += arity
    return targets


def _cache_teacher_trace(net: BlockifiedNetwork, images: torch.Tensor) -> ForwardTrace:
    """Full own-feature trace over all samples, assembled in batches (dense
    wiring substitution needs the teacher's own prefix features per batch)."""
    stems, feats = [], None
    with torch.no_grad():
        for idx in batch_indices(images.shape[0], EVAL_BATCH):
            trace = net.forward_collect(images[idx])
            stems.append(trace.stem)
            if feats is None:
                feats = [[f.tensor] for f in trace.features]
            else:
                for store, f in zip(feats, trace.features):
                    store.append(f.tensor)
    stem = torch.cat(stems, dim=0) if stems[0] is not None else None
    maps = [
        FeatureMap(k, torch.cat(store, dim=0), net.producer)
        for k, store in enumerate(feats, start=1)
    ]
    return ForwardTrace(stem=stem, features=maps)


def _slice_trace(trace: ForwardTrace, idx: torch.Tensor, upto_block: int) -> ForwardTrace:
    return ForwardTrace(
        stem=trace.stem[idx] if trace.stem is not None else None,
        features=[
            FeatureMap(f.block_index, f.tensor[idx], f.producer)
            for f in trace.features[: upto_block - 1]
        ],
    )


def prepare_state(
    student: BlockifiedNetwork,
    teachers: TeacherRegistry,
    config: AmalgamationConfig,
    images: torch.Tensor,
) -> AmalgamationState:
    """Validate, freeze teachers, split off the held-out set, cache teacher
    targets (and teacher traces under dense wiring), and build the filter bank."""
    teachers.validate_selection(config.selection)
    trunk = teachers.shared_trunk_spec()
    sspec = student.spec
    if (
        sspec.input_shape != trunk.input_shape
        or sspec.block_channels != trunk.block_channels
        or sspec.block_strides != trunk.block_strides
        or sspec.wiring != trunk.wiring
        or sspec.stem_channels != trunk.stem_channels
    ):
        raise SpecValidationError("student trunk architecture differs from the teachers'")

    for teacher in teachers.models:
        for p in teacher.network.parameters():
            p.requires_grad_(False)

    seed = config.optimizer.seed
    count = images.shape[0]
    order = torch.randperm(count, generator=generator(derive_seed(seed, "amalgam-heldout")))
    n_held = max(1, int(round(count * config.heldout_fraction)))
    heldout_idx, train_idx = order[:n_held], order[n_held:]
    if train_idx.numel() == 0:
        raise ValueError(f"held-out split consumed all {count} unlabeled samples")

    bank = make_filter_bank(
        teachers, trunk, reduction=config.filter_reduction, seed=derive_seed(seed, "filter-bank")
    )
    state = AmalgamationState(
        student=student,
        filter_bank=bank,
        selection=config.selection,
        train_idx=train_idx,
        heldout_idx=heldout_idx,
        targets=cache_teacher_targets(teachers, config.selection, images, config.temperature),
    )
    if sspec.wiring == "dense_concat":
        state._teacher_traces = {
            n: _cache_teacher_trace(teachers[n].network, images)
            for n in config.selection.teacher_indices
        }
    return state


def _advance_prefix_caches(state: AmalgamationState, k: int, images: torch.Tensor) -> None:
    """Bring the frozen-prefix caches up to block k (student blocks < k are
    final now). Sequential wiring caches the single input feeding block k;
    dense wiring caches the stem, every prior feature, and the assembled
    concatenated input."""
    student = state.student
    wiring = student.spec.wiring
    count = images.shape[0]
    with torch.no_grad():
        if wiring == "sequential":
            if k == 1:
                state._prefix = images
            else:
                block = student.blocks[k - 2]
                state._prefix = _forward_in_batches(
                    lambda idx: block(state._prefix[idx]), count
                )
        else:
            if k == 1:
                return  # the stem trains together with block 1; nothing is frozen yet
            if k == 2:
                state._stem_cache = _forward_in_batches(
                    lambda idx: student.stem(images[idx]), count
                )
                prev_input = state._stem_cache
            else:
                prev_input = state._dense_input
            block = student.blocks[k - 2]
            state._feats_cache.append(
                _forward_in_batches(lambda idx: block(prev_input[idx]), count)
            )
            state._dense_input = _forward_in_batches(
                lambda idx: dense_block_input(
                    state._stem_cache[idx], [f[idx] for f in state._feats_cache]
                ),
                count,
            )


def _student_block_forward(
    state: AmalgamationState, k: int, images: torch.Tensor, idx: torch.Tensor
) -> torch.Tensor:
    """F_u^k for a batch, reading frozen prefixes from the caches."""
    student = state.student
    if student.spec.wiring == "sequential":
        return student.blocks[k - 1](state._prefix[idx])
    if k == 1:
        return student.blocks[0](student.stem(images[idx]))
    return student.blocks[k - 1](state._dense_input[idx])


def _substituted_batch_losses(
    state: AmalgamationState,
    teachers: TeacherRegistry,
    k: int,
    images: torch.Tensor,
    idx: torch.Tensor,
) -> dict[int, torch.Tensor]:
    """Per-task summed (not averaged) soft cross-entropy for one batch of the
    entangled path at block k."""
    feature = _student_block_forward(state, k, images, idx)
    losses: dict[int, torch.Tensor] = {}
    for n in state.selection.teacher_indices:
        substituted = state.filter_bank[(n, k)](feature)
        teacher_net = teachers[n].network
        prefix = None
        if teacher_net.spec.wiring == "dense_concat":
            prefix = _slice_trace(state._teacher_traces[n], idx, k)
        preds = teacher_net.forward_substituted(
            k, substituted, prefix=prefix, task_ids=state.selection.for_teacher(n)
        )
        for task_id in state.selection.for_teacher(n):
            target = state.targets[task_id][idx]
            losses[task_id] = binary_cross_entropy_soft(target, preds[task_id]).sum()
    return losses


def _heldout_losses(
    state: AmalgamationState, teachers: TeacherRegistry, k: int, images: torch.Tensor
) -> dict[int, float]:
    """Exact per-task mean loss over the held-out split, in fixed batch order."""
    sums = {t: 0.0 for t in state.selection.task_ids}
    counts = {t: 0 for t in state.selection.task_ids}
    with torch.no_grad():
        for batch in batch_indices(state.heldout_idx.numel(), EVAL_BATCH):
            idx = state.heldout_idx[batch]
            for task_id, loss in _substituted_batch_losses(state, teachers, k, images, idx).items():
                sums[task_id] += float(loss)
                counts[task_id] += int(state.targets[task_id][idx].numel())
    return {t: sums[t] / counts[t] for t in sums}


def train_block(
    state: AmalgamationState,
    k: int,
    teachers: TeacherRegistry,
    images: torch.Tensor,
    config: AmalgamationConfig,
) -> tuple[AmalgamationState, dict[int, float]]:
    """Train student block k and the block-k filters; record the converged
    held-out loss per selected task.

    Blocks and filters before k are frozen (bitwise) and the poly learning
    rate restarts over this block's own step budget. The recorded value per
    task is the held-out mean loss after the block's final epoch.
    """
    if k != state.block_index + 1:
        raise ValueError(f"blocks train in order; expected block {state.block_index + 1}, got {k}")
    student = state.student
    opt = config.optimizer

    _advance_prefix_caches(state, k, images)

    # Freeze everything except block k, its filters, and (dense, k=1) the stem.
    student.set_trainable(blocks=[k], heads=False, stem=(k == 1))
    state.filter_bank.set_trainable(None, False)
    params = ParameterSet.from_module(student.blocks[k - 1], prefix=f"student.block{k}.")
    if k == 1 and student.stem is not None:
        params = params.merged(ParameterSet.from_module(student.stem, prefix="student.stem."))
    for n in state.selection.teacher_indices:
        filt = state.filter_bank[(n, k)]
        for p in filt.parameters():
            p.requires_grad_(True)
        params = params.merged(ParameterSet.from_module(filt, prefix=f"filter.{n}.{k}."))

    n_train = state.train_idx.numel()
    steps_per_epoch = -(-n_train // opt.batch_size)
    total_steps = config.epochs_per_block * steps_per_epoch
    total_count = state.selection.total

    step = 0
    velocity: dict[str, torch.Tensor] = {}
    curves: dict[int, list[float]] = {t: [] for t in state.selection.task_ids}
    overall_curve: list[float] = []
    for epoch in range(config.epochs_per_block):
        shuffle = generator(derive_seed(opt.seed, f"amalgam-block{k}-epoch{epoch}"))
        for batch in batch_indices(n_train, opt.batch_size, shuffle):
            idx = state.train_idx[batch]
            task_losses = _substituted_batch_losses(state, teachers, k, images, idx)
            loss = torch.stack(
                [task_losses[t] / state.targets[t][idx].numel() for t in sorted(task_losses)]
            ).sum() / total_count
            params.zero_grads()
            loss.backward()
            sgd_step(params, params.grads(), opt, step, total_steps, velocity=velocity)
            step += 1
        epoch_losses = _heldout_losses(state, teachers, k, images)
        for task_id, value in epoch_losses.items():
            curves[task_id].append(value)
        overall_curve.append(sum(epoch_losses.values()) / total_count)
        if config.plateau_window and len(overall_curve) > config.plateau_window:
            window = overall_curve[-config.plateau_window :]
            if min(window) >= min(overall_curve[: -config.plateau_window]) - 1e-6:
                break
    params.zero_grads()

    recorded = {t: curves[t][-1] for t in curves}
    for task_id, value in recorded.items():
        state.loss_table.record(task_id, k, value, curve=curves[task_id])
    state.block_index = k
    return state, recorded


@dataclass
class AmalgamationResult:
    student: BlockifiedNetwork
    filter_bank: FilterBank
    loss_table: LossTable
    heldout_idx: torch.Tensor | None = None


def amalgamate(
    student: BlockifiedNetwork,
    teachers: TeacherRegistry,
    config: AmalgamationConfig,
    images: torch.Tensor,
) -> AmalgamationResult:
    """Run the full block loop k = 1..B and return the trained student blocks,
    the filter bank, and the completed loss table."""
    state = prepare_state(student, teachers, config, images)
    for k in range(1, student.spec.num_blocks + 1):
        state, _ = train_block(state, k, teachers, images, config)
    state.loss_table.validate_complete(config.selection, student.spec.num_blocks)
    return AmalgamationResult(
        student=state.student,
        filter_bank=state.filter_bank,
        loss_table=state.loss_table,
        heldout_idx=state.heldout_idx,
    )
