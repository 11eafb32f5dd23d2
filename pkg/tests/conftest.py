"""Shared fixtures: deterministic torch, tiny architectures, small datasets.

Everything here is sized for speed — real training quality is exercised only
by the acceptance suite.
"""

import pytest
import torch

from amalgam.blocknet import ArchitectureSpec, TaskHeadSpec, build_network
from amalgam.dataio import SyntheticDatasetConfig, generate_dataset
from amalgam.nncore import configure_torch
from amalgam.teachers import TeacherModel, TeacherRegistry


def pytest_configure(config):
    configure_torch()


@pytest.fixture(scope="session")
def tiny_spec():
    """3-block sequential net on 16x16 RGB with two single-logit heads."""
    return ArchitectureSpec(
        input_shape=(3, 16, 16),
        block_channels=(6, 8, 10),
        block_strides=(1, 2, 2),
        task_heads=(TaskHeadSpec(0), TaskHeadSpec(1)),
    )


@pytest.fixture(scope="session")
def tiny_dense_spec():
    return ArchitectureSpec(
        input_shape=(3, 16, 16),
        block_channels=(6, 8, 10),
        block_strides=(1, 2, 2),
        task_heads=(TaskHeadSpec(0), TaskHeadSpec(1)),
        wiring="dense_concat",
        stem_channels=4,
    )


@pytest.fixture()
def tiny_net(tiny_spec):
    return build_network(tiny_spec, init_seed=11, producer="teacher:0")


@pytest.fixture()
def tiny_dense_net(tiny_dense_spec):
    return build_network(tiny_dense_spec, init_seed=12, producer="teacher:0")


@pytest.fixture(scope="session")
def small_images():
    gen = torch.Generator().manual_seed(99)
    return torch.rand((24, 3, 16, 16), generator=gen)


def make_registry(trunk_spec: ArchitectureSpec, wiring_seed: int = 0) -> TeacherRegistry:
    """Two teachers sharing trunk geometry, owning tasks {0} and {1}."""
    base = dict(
        input_shape=trunk_spec.input_shape,
        block_channels=trunk_spec.block_channels,
        block_strides=trunk_spec.block_strides,
        wiring=trunk_spec.wiring,
        stem_channels=trunk_spec.stem_channels,
    )
    models = []
    for n, task in enumerate((0, 1)):
        spec = ArchitectureSpec(task_heads=(TaskHeadSpec(task),), **base)
        net = build_network(spec, init_seed=100 + wiring_seed * 10 + n, producer=f"teacher:{n}")
        models.append(TeacherModel(net, (task,)))
    return TeacherRegistry(models, label_universe=(0, 1))


@pytest.fixture()
def tiny_registry(tiny_spec):
    return make_registry(tiny_spec)


@pytest.fixture()
def tiny_dense_registry(tiny_dense_spec):
    return make_registry(tiny_dense_spec, wiring_seed=1)


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = SyntheticDatasetConfig(
        label_count=4,
        image_size=16,
        train_count=32,
        val_count=0,
        unlabeled_count=16,
        seed=7,
    )
    return generate_dataset(cfg)


@pytest.fixture(scope="session")
def tiny_pipeline_document():
    """A full pipeline config scaled down until a complete run takes seconds."""
    return {
        "seed": 0,
        "data": {
            "label_count": 4,
            "image_size": 16,
            "train_count": 48,
            "val_count": 0,
            "unlabeled_count": 24,
            "clutter": 1,
        },
        "teachers": {
            "count": 2,
            "block_channels": [8, 8, 12],
            "block_strides": [1, 2, 2],
            "epochs": 2,
            "batch_size": 16,
        },
        "amalgam": {"tasks": "0:1,1:2", "epochs_per_block": 1, "batch_size": 8},
        "branchout": {"finetune_epochs": 1, "batch_size": 8},
        "eval": {"topk": 2},
    }
