"""Synthetic data generation, on-disk layout, label partitioning, checkpoints."""

import numpy as np
import pytest
import torch

from amalgam.blocknet import ArchitectureSpec, TaskHeadSpec, TaskSelection, build_network
from amalgam.branchout import BranchPlan, regroup
from amalgam.dataio import (
    PALETTE,
    SHAPES,
    CheckpointError,
    DatasetError,
    SyntheticDatasetConfig,
    eval_labels_path,
    generate_dataset,
    load_checkpoint,
    load_eval_labels,
    load_filter_bank,
    load_network,
    load_split,
    load_task_bundle,
    partition_labels,
    read_meta,
    save_checkpoint,
    save_filter_bank,
    save_network,
    save_task_bundle,
    write_dataset,
)
from amalgam.filters import make_filter_bank


class TestConfig:
    def test_motif_assignment_unique(self):
        cfg = SyntheticDatasetConfig(label_count=16)
        motifs = {cfg.motif(label) [0] + str(tuple(cfg.motif(label)[1])) for label in range(16)}
        assert len(motifs) == 16

    def test_motif_cycles_shapes(self):
        cfg = SyntheticDatasetConfig(label_count=10)
        assert cfg.motif(0)[0] == SHAPES[0]
        assert cfg.motif(8)[0] == SHAPES[0]
        # the second cycle shifts colors so the (shape, color) pair stays unique
        assert not np.array_equal(cfg.motif(0)[1], cfg.motif(8)[1])

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"label_count": 0},
            {"label_count": 65},
            {"channels": 1},
            {"image_size": 8},
            {"presence_prob": 1.5},
            {"noise": -0.1},
            {"train_count": 0},
        ],
    )
    def test_rejects_bad_config(self, kwargs):
        base = dict(label_count=4)
        base.update(kwargs)
        with pytest.raises(DatasetError):
            SyntheticDatasetConfig(**base)

    def test_json_round_trip(self):
        cfg = SyntheticDatasetConfig(label_count=6, noise=0.02, seed=9)
        assert SyntheticDatasetConfig.from_json(cfg.to_json()) == cfg

    def test_split_counts_drops_empty(self):
        cfg = SyntheticDatasetConfig(label_count=4, val_count=0)
        assert set(cfg.split_counts()) == {"train", "unlabeled"}


class TestGeneration:
    def test_shapes_and_ranges(self, tiny_dataset):
        train = tiny_dataset.splits["train"]
        assert tuple(train.images.shape) == (32, 3, 16, 16)
        assert train.images.dtype == torch.float32
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0
        assert tuple(train.label_matrix.shape) == (32, 4)

    def test_unlabeled_split_has_no_labels(self, tiny_dataset):
        assert tiny_dataset.splits["unlabeled"].label_matrix is None
        assert tiny_dataset.eval_labels is not None
        assert tuple(tiny_dataset.eval_labels.shape) == (16, 4)

    def test_deterministic_by_seed(self):
        cfg = SyntheticDatasetConfig(label_count=3, image_size=16, train_count=4, unlabeled_count=2, seed=5)
        a, b = generate_dataset(cfg), generate_dataset(cfg)
        assert torch.equal(a.splits["train"].images, b.splits["train"].images)
        assert torch.equal(a.eval_labels, b.eval_labels)

    def test_seed_changes_content(self):
        base = dict(label_count=3, image_size=16, train_count=4, unlabeled_count=2)
        a = generate_dataset(SyntheticDatasetConfig(seed=1, **base))
        b = generate_dataset(SyntheticDatasetConfig(seed=2, **base))
        assert not torch.equal(a.splits["train"].images, b.splits["train"].images)

    def test_per_sample_streams_independent_of_count(self):
        # sample i is identical whether the split has 4 or 8 samples
        base = dict(label_count=3, image_size=16, unlabeled_count=2, seed=5)
        small = generate_dataset(SyntheticDatasetConfig(train_count=4, **base))
        large = generate_dataset(SyntheticDatasetConfig(train_count=8, **base))
        assert torch.equal(small.splits["train"].images, large.splits["train"].images[:4])

    def test_motif_presence_affects_pixels(self):
        # an image whose label is present differs from the same index rendered
        # without it only through that motif; crude check: presence labels align
        # with rendered color pixels often enough to learn from.
        cfg = SyntheticDatasetConfig(
            label_count=1, image_size=16, train_count=64, unlabeled_count=2,
            presence_prob=0.5, clutter=0, noise=0.0, seed=3,
        )
        ds = generate_dataset(cfg)
        present = ds.splits["train"].label_matrix[:, 0] == 1
        reds = ds.splits["train"].images[:, 0].amax(dim=(1, 2))
        assert reds[present].min() > reds[~present].max()


class TestDiskRoundTrip:
    def test_write_load(self, tiny_dataset, tmp_path):
        d = str(tmp_path / "ds")
        write_dataset(tiny_dataset, d)
        meta = read_meta(d)
        assert meta["splits"] == {"train": 32, "unlabeled": 16}
        train = load_split(d, "train")
        assert torch.equal(train.images, tiny_dataset.splits["train"].images)
        assert torch.equal(train.label_matrix, tiny_dataset.splits["train"].label_matrix)

    def test_unlabeled_loads_without_labels(self, tiny_dataset, tmp_path):
        d = str(tmp_path / "ds")
        write_dataset(tiny_dataset, d)
        unlabeled = load_split(d, "unlabeled")
        assert unlabeled.label_matrix is None

    def test_eval_labels_segregated(self, tiny_dataset, tmp_path):
        d = str(tmp_path / "ds")
        write_dataset(tiny_dataset, d)
        assert eval_labels_path(d).endswith("eval_labels.csv")
        labels = load_eval_labels(d)
        assert torch.equal(labels, tiny_dataset.eval_labels)

    def test_missing_split_raises(self, tiny_dataset, tmp_path):
        d = str(tmp_path / "ds")
        write_dataset(tiny_dataset, d)
        with pytest.raises(DatasetError, match="val"):
            load_split(d, "val")

    def test_truncated_images_detected(self, tiny_dataset, tmp_path):
        d = str(tmp_path / "ds")
        write_dataset(tiny_dataset, d)
        f = tmp_path / "ds" / "train_images.f32"
        f.write_bytes(f.read_bytes()[:-8])
        with pytest.raises(DatasetError, match="floats"):
            load_split(d, "train")


class TestPartition:
    def test_contiguous_cover(self):
        groups = partition_labels(8, 2)
        assert groups == [(0, 1, 2, 3), (4, 5, 6, 7)]

    def test_uneven_sizes_larger_first(self):
        groups = partition_labels(20, 3)
        assert [len(g) for g in groups] == [7, 7, 6]
        assert sorted(x for g in groups for x in g) == list(range(20))

    def test_random_mode_is_seeded_cover(self):
        a = partition_labels(10, 3, mode="random", seed=4)
        b = partition_labels(10, 3, mode="random", seed=4)
        assert a == b
        assert sorted(x for g in a for x in g) == list(range(10))
        assert a != partition_labels(10, 3, mode="contiguous")

    @pytest.mark.parametrize("labels,groups", [(4, 0), (4, 5)])
    def test_rejects_bad_group_counts(self, labels, groups):
        with pytest.raises(DatasetError):
            partition_labels(labels, groups)

    def test_unknown_mode(self):
        with pytest.raises(DatasetError):
            partition_labels(4, 2, mode="striped")


class TestCheckpointContainer:
    def _tensors(self):
        gen = torch.Generator().manual_seed(0)
        return {
            "a.weight": torch.rand((3, 4), generator=gen),
            "b.bias": torch.rand((5,), generator=gen),
        }

    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "x.ckpt")
        tensors = self._tensors()
        save_checkpoint(path, "network", {"note": "hi"}, tensors)
        header, loaded = load_checkpoint(path, expect_kind="network")
        assert header["meta"] == {"note": "hi"}
        assert header["version"] == 1
        for name, t in tensors.items():
            assert torch.equal(loaded[name], t)

    def test_kind_mismatch(self, tmp_path):
        path = str(tmp_path / "x.ckpt")
        save_checkpoint(path, "network", {}, self._tensors())
        with pytest.raises(CheckpointError, match="kind"):
            load_checkpoint(path, expect_kind="filter_bank")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(str(path), "network", {}, self._tensors())
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(blob)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(str(path))

    def test_header_corruption_detected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(str(path), "network", {}, self._tensors())
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0x01  # inside the JSON header
        path.write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_payload_truncation_detected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(str(path), "network", {}, self._tensors())
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError, match="payload"):
            load_checkpoint(str(path))

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(str(path), "network", {}, self._tensors())
        blob = bytearray(path.read_bytes())
        blob[5] = 9  # version u32 little-endian starts after the 5-byte magic
        path.write_bytes(blob)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(str(path))

    def test_deterministic_bytes(self, tmp_path):
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(a, "network", {"x": 1}, self._tensors())
        save_checkpoint(b, "network", {"x": 1}, self._tensors())
        assert open(a, "rb").read() == open(b, "rb").read()


class TestNetworkCheckpoints:
    def test_network_round_trip(self, tiny_spec, tmp_path, small_images):
        net = build_network(tiny_spec, init_seed=3, producer="teacher:0")
        path = str(tmp_path / "net.ckpt")
        save_network(path, net, meta={"task_ids": [0, 1]})
        loaded, meta = load_network(path)
        assert meta["task_ids"] == [0, 1]
        assert loaded.spec == tiny_spec
        a, b = net(small_images), loaded(small_images)
        for t in (0, 1):
            assert torch.equal(a[t], b[t])

    def test_spec_hash_guard(self, tiny_spec, tmp_path):
        net = build_network(tiny_spec, init_seed=3)
        path = str(tmp_path / "net.ckpt")
        save_network(path, net)
        with pytest.raises(CheckpointError, match="different architecture"):
            load_network(path, expect_spec_hash="0" * 64)

    def test_filter_bank_round_trip(self, tiny_spec, tmp_path):
        bank = make_filter_bank([0, 1], tiny_spec, reduction=2, seed=8)
        with torch.no_grad():  # give fc2 nonzero values so equality is meaningful
            for key in bank.keys():
                bank[key].fc2.weight.add_(1.0)
        path = str(tmp_path / "bank.ckpt")
        save_filter_bank(path, bank, meta={"spec_hash": tiny_spec.spec_hash()})
        loaded, meta = load_filter_bank(path)
        assert meta["spec_hash"] == tiny_spec.spec_hash()
        assert loaded.keys() == bank.keys()
        for key in bank.keys():
            assert torch.equal(loaded[key].fc2.weight, bank[key].fc2.weight)
            assert loaded[key].reduction == bank[key].reduction

    def test_task_bundle_round_trip(self, tiny_spec, tiny_registry, tmp_path, small_images):
        student = build_network(tiny_spec, init_seed=5, producer="student")
        bank = make_filter_bank([0, 1], tiny_spec, reduction=2, seed=8)
        selection = TaskSelection(((0, 0), (1, 1)))
        plan = BranchPlan({0: 2, 1: 3}, num_blocks=3)
        nets, trunk = regroup(student, tiny_registry, bank, plan, selection)
        path = str(tmp_path / "bundle.ckpt")
        save_task_bundle(path, nets, trunk, tiny_spec, meta={"finetuned": False})
        loaded_nets, loaded_trunk, meta = load_task_bundle(path)
        assert meta["finetuned"] is False
        assert loaded_trunk.length == trunk.length
        for orig, got in zip(nets, loaded_nets):
            assert got.task_id == orig.task_id
            assert got.branch_block == orig.branch_block
            assert torch.equal(got(small_images), orig(small_images))

    def test_bundle_trunk_stays_shared(self, tiny_spec, tiny_registry, tmp_path):
        student = build_network(tiny_spec, init_seed=5, producer="student")
        bank = make_filter_bank([0, 1], tiny_spec, reduction=2, seed=8)
        selection = TaskSelection(((0, 0), (1, 1)))
        nets, trunk = regroup(student, tiny_registry, bank, BranchPlan({0: 2, 1: 3}, 3), selection)
        path = str(tmp_path / "bundle.ckpt")
        save_task_bundle(path, nets, trunk, tiny_spec, meta={})
        loaded_nets, loaded_trunk, _ = load_task_bundle(path)
        # both task nets refer to the same trunk block modules after reload
        assert loaded_nets[0].trunk_blocks[0] is loaded_nets[1].trunk_blocks[0]
        assert loaded_trunk.blocks[0] is loaded_nets[0].trunk_blocks[0]
