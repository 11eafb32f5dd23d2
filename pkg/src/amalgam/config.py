"""Pipeline configuration: one JSON document with sections data / teachers /
amalgam / branchout / eval plus a top-level seed.

Pydantic models validate the document up front (unknown keys are errors);
helpers translate sections into the dataclass configs the core modules take.
Every stage seed is derived from the single top-level seed, so one integer
pins the entire pipeline.
"""

import json

from pydantic import BaseModel, ConfigDict, Field

from .blocknet import ArchitectureSpec, TaskHeadSpec, TaskSelection
from .branchout import FinetuneConfig
from .dataio import SyntheticDatasetConfig
from .entangle import AmalgamationConfig
from .nncore import OptimizerConfig, derive_seed


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    label_count: int = 8
    image_size: int = 32
    channels: int = 3
    train_count: int = 600
    val_count: int = 0
    unlabeled_count: int = 512
    presence_prob: float = 0.35
    clutter: int = 2
    noise: float = 0.05


class TeachersSection(_Section):
    count: int = 2
    partition_mode: str = "contiguous"
    block_channels: list[int] = Field(default_factory=lambda: [16, 16, 24, 24, 32, 32])
    block_strides: list[int] = Field(default_factory=lambda: [1, 2, 1, 2, 1, 2])
    wiring: str = "sequential"
    stem_channels: int = 0
    epochs: int = 30
    base_lr: float = 0.05
    power: float = 0.9
    weight_decay: float = 5e-3
    batch_size: int = 16
    val_fraction: float = 0.2


class AmalgamSection(_Section):
    tasks: str = "0:1,1:5"
    epochs_per_block: int = 20
    base_lr: float = 0.05
    power: float = 0.9
    weight_decay: float = 5e-3
    batch_size: int = 16
    heldout_fraction: float = 0.25
    plateau_window: int = 0
    init_mode: str = "random"
    temperature: float = 1.0
    filter_reduction: int = 4


class BranchoutSection(_Section):
    finetune_epochs: int = 12
    base_lr: float = 0.005
    power: float = 0.9
    weight_decay: float = 5e-3
    batch_size: int = 16
    heldout_fraction: float = 0.25


class EvalSection(_Section):
    protocol: str = "area"
    topk: int = 3


class PipelineConfig(_Section):
    seed: int = 0
    data: DataSection = Field(default_factory=DataSection)
    teachers: TeachersSection = Field(default_factory=TeachersSection)
    amalgam: AmalgamSection = Field(default_factory=AmalgamSection)
    branchout: BranchoutSection = Field(default_factory=BranchoutSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    # -- translation to core configs ----------------------------------------

    def dataset_config(self) -> SyntheticDatasetConfig:
        d = self.data
        return SyntheticDatasetConfig(
            label_count=d.label_count,
            image_size=d.image_size,
            channels=d.channels,
            train_count=d.train_count,
            val_count=d.val_count,
            unlabeled_count=d.unlabeled_count,
            presence_prob=d.presence_prob,
            clutter=d.clutter,
            noise=d.noise,
            seed=derive_seed(self.seed, "dataset"),
        )

    def teacher_spec(self, task_ids) -> ArchitectureSpec:
        t = self.teachers
        return ArchitectureSpec(
            input_shape=(self.data.channels, self.data.image_size, self.data.image_size),
            block_channels=tuple(t.block_channels),
            block_strides=tuple(t.block_strides),
            task_heads=tuple(TaskHeadSpec(int(i)) for i in task_ids),
            wiring=t.wiring,
            stem_channels=t.stem_channels,
        )

    def teacher_optimizer(self, teacher_index: int) -> OptimizerConfig:
        t = self.teachers
        return OptimizerConfig(
            base_lr=t.base_lr,
            power=t.power,
            weight_decay=t.weight_decay,
            batch_size=t.batch_size,
            seed=derive_seed(self.seed, f"pretrain:{teacher_index}"),
        )

    def selection(self) -> TaskSelection:
        return TaskSelection.parse(self.amalgam.tasks)

    def amalgam_config(self) -> AmalgamationConfig:
        a = self.amalgam
        return AmalgamationConfig(
            selection=self.selection(),
            optimizer=OptimizerConfig(
                base_lr=a.base_lr,
                power=a.power,
                weight_decay=a.weight_decay,
                batch_size=a.batch_size,
                seed=derive_seed(self.seed, "amalgamate"),
            ),
            epochs_per_block=a.epochs_per_block,
            heldout_fraction=a.heldout_fraction,
            plateau_window=a.plateau_window,
            init_mode=a.init_mode,
            temperature=a.temperature,
            filter_reduction=a.filter_reduction,
        )

    def finetune_config(self) -> FinetuneConfig:
        b = self.branchout
        return FinetuneConfig(
            optimizer=OptimizerConfig(
                base_lr=b.base_lr,
                power=b.power,
                weight_decay=b.weight_decay,
                batch_size=b.batch_size,
                seed=derive_seed(self.seed, "finetune"),
            ),
            epochs=b.finetune_epochs,
            heldout_fraction=b.heldout_fraction,
        )

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, indent=2) + "\n"


def default_config() -> PipelineConfig:
    return PipelineConfig()


def load_config(path: str) -> PipelineConfig:
    with open(path) as fh:
        return PipelineConfig.model_validate(json.load(fh))
