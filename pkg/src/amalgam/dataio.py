"""Synthetic multi-label datasets, label-group partitioning, and persistence.

The synthetic generator draws colored geometric motifs (one distinct
shape+color pair per label) onto noisy backgrounds, so presence labels are
learnable by a small CNN in seconds. Splits are written as raw float32
tensors plus CSV label files; the "unlabeled" split's labels are physically
segregated into an evaluation-only file (eval_labels.csv) that training code
has no reason -- and, by test, no permission -- to open.

Checkpoints are a small self-describing binary format: a magic string,
format version, canonical JSON header (architecture, metadata, tensor
index), the header's sha256, then a little-endian float32 payload. Loads
verify the hash, the version, and that the tensor index tiles the payload
exactly.
"""

import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .blocknet import ArchitectureSpec, BlockifiedNetwork, DenseBlock, ResidualBlock, TaskHead
from .branchout import BranchPlan, TaskSpecificNet, Trunk
from .filters import FilterBank, FilterModule
from .nncore import derive_seed

MAGIC = b"AMLG1"
FORMAT_VERSION = 1

SHAPES = ("disk", "square", "triangle", "ring", "cross", "hbar", "vbar", "diamond")
# Saturated, mutually distant RGB colors; paired with shapes via a Latin-square
# rule so every label's (shape, color) combination is unique.
PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.80, 0.15],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.15, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.15, 0.75],
    ],
    dtype=np.float32,
)


class DatasetError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    label_count: int
    image_size: int = 32
    channels: int = 3
    train_count: int = 400
    val_count: int = 0
    unlabeled_count: int = 256
    presence_prob: float = 0.35
    clutter: int = 2
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.label_count < 1:
            raise DatasetError("label_count must be >= 1")
        if self.label_count > len(SHAPES) * len(PALETTE):
            raise DatasetError(f"at most {len(SHAPES) * len(PALETTE)} distinguishable labels")
        if self.channels != 3:
            raise DatasetError("motif drawing requires 3 channels")
        if self.image_size < 12:
            raise DatasetError("image_size must be >= 12 to fit motifs")
        if not 0.0 <= self.presence_prob <= 1.0:
            raise DatasetError("presence_prob must be in [0, 1]")
        if self.noise < 0 or self.clutter < 0:
            raise DatasetError("noise and clutter must be non-negative")
        if min(self.train_count, self.unlabeled_count) < 1:
            raise DatasetError("train and unlabeled splits must be nonempty")

    def motif(self, label: int) -> tuple[str, np.ndarray]:
        shape = SHAPES[label % len(SHAPES)]
        color = PALETTE[(label % len(PALETTE) + label // len(PALETTE)) % len(PALETTE)]
        return shape, color

    def split_counts(self) -> dict[str, int]:
        counts = {"train": self.train_count, "val": self.val_count, "unlabeled": self.unlabeled_count}
        return {name: n for name, n in counts.items() if n > 0}

    def to_json(self) -> dict:
        return {
            "label_count": self.label_count,
            "image_size": self.image_size,
            "channels": self.channels,
            "train_count": self.train_count,
            "val_count": self.val_count,
            "unlabeled_count": self.unlabeled_count,
            "presence_prob": self.presence_prob,
            "clutter": self.clutter,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SyntheticDatasetConfig":
        return cls(**data)


@dataclass
class LabeledSplit:
    name: str
    images: torch.Tensor
    label_matrix: torch.Tensor | None = None


@dataclass
class SyntheticDataset:
    config: SyntheticDatasetConfig
    splits: dict[str, LabeledSplit] = field(default_factory=dict)
    # Ground truth for the unlabeled split, kept out of its LabeledSplit on
    # purpose: it is written to the segregated eval_labels.csv only.
    eval_labels: torch.Tensor | None = None


# ---------------------------------------------------------------------------
# Motif drawing.
# ---------------------------------------------------------------------------


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.75)
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.45 * r) ** 2)
    if shape == "cross":
        t = max(1.5, r / 2.5)
        inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return inside & ((np.abs(dy) <= t) | (np.abs(dx) <= t))
    if shape == "hbar":
        return (np.abs(dy) <= max(1.5, r / 2.5)) & (np.abs(dx) <= r)
    if shape == "vbar":
        return (np.abs(dx) <= max(1.5, r / 2.5)) & (np.abs(dy) <= r)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise DatasetError(f"unknown shape '{shape}'")


def _render_sample(config: SyntheticDatasetConfig, rng: np.random.Generator,
                   present: np.ndarray) -> np.ndarray:
    size = config.image_size
    img = np.full((3, size, size), 0.10, dtype=np.float32)
    # Neutral gray clutter blobs that match no label's color.
    for _ in range(config.clutter):
        r = rng.uniform(1.5, size / 10.0)
        cy, cx = rng.uniform(0, size, size=2)
        mask = _shape_mask("disk", size, cy, cx, r)
        img[:, mask] = rng.uniform(0.3, 0.5)
    for label in np.flatnonzero(present):
        shape, color = config.motif(int(label))
        r = rng.uniform(size / 6.0, size / 4.0)
        cy = rng.uniform(r, size - 1 - r)
        cx = rng.uniform(r, size - 1 - r)
        mask = _shape_mask(shape, size, cy, cx, r)
        img[:, mask] = color[:, None]
    if config.noise > 0:
        img += rng.uniform(-config.noise, config.noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(config: SyntheticDatasetConfig) -> SyntheticDataset:
    """Render every split deterministically; each sample draws from its own
    generator seeded by (config seed, split name, sample index)."""
    dataset = SyntheticDataset(config=config)
    for split, count in config.split_counts().items():
        images = np.empty((count, 3, config.image_size, config.image_size), dtype=np.float32)
        labels = np.empty((count, config.label_count), dtype=np.int64)
        for i in range(count):
            rng = np.random.default_rng(derive_seed(config.seed, f"{split}:{i}"))
            present = (rng.random(config.label_count) < config.presence_prob).astype(np.int64)
            labels[i] = present
            images[i] = _render_sample(config, rng, present)
        image_tensor = torch.from_numpy(images)
        label_tensor = torch.from_numpy(labels).to(torch.float32)
        if split == "unlabeled":
            dataset.splits[split] = LabeledSplit(split, image_tensor, None)
            dataset.eval_labels = label_tensor
        else:
            dataset.splits[split] = LabeledSplit(split, image_tensor, label_tensor)
    return dataset


# ---------------------------------------------------------------------------
# Dataset on disk: meta.json + raw float32 tensors + label CSVs.
# ---------------------------------------------------------------------------


def _write_labels_csv(path: str, labels: torch.Tensor) -> None:
    count, label_count = labels.shape
    with open(path, "w", newline="") as fh:
        fh.write("sample_id," + ",".join(f"l{j}" for j in range(label_count)) + "\n")
        for i in range(count):
            row = ",".join(str(int(v)) for v in labels[i])
            fh.write(f"{i},{row}\n")


def _read_labels_csv(path: str) -> torch.Tensor:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    order = np.argsort(data[:, 0])
    return torch.from_numpy(data[order, 1:]).to(torch.float32)


def write_dataset(dataset: SyntheticDataset, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    config = dataset.config
    meta = {
        "format": "f32 raw tensors, row-major (count, channels, size, size), little-endian",
        "config": config.to_json(),
        "splits": config.split_counts(),
    }
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for split, data in dataset.splits.items():
        array = data.images.numpy()
        array.astype("<f4").tofile(os.path.join(directory, f"{split}_images.f32"))
        if data.label_matrix is not None:
            _write_labels_csv(os.path.join(directory, f"{split}_labels.csv"), data.label_matrix)
    if dataset.eval_labels is not None:
        _write_labels_csv(eval_labels_path(directory), dataset.eval_labels)


def eval_labels_path(directory: str) -> str:
    """The segregated ground truth of the unlabeled split. Only evaluation may
    read this file; the no-annotation contract is tested against its path."""
    return os.path.join(directory, "eval_labels.csv")


def read_meta(directory: str) -> dict:
    with open(os.path.join(directory, "meta.json")) as fh:
        return json.load(fh)


def load_split(directory: str, split: str) -> LabeledSplit:
    meta = read_meta(directory)
    if split not in meta["splits"]:
        raise DatasetError(f"split '{split}' not in dataset (has {sorted(meta['splits'])})")
    config = meta["config"]
    count = meta["splits"][split]
    shape = (count, config["channels"], config["image_size"], config["image_size"])
    raw = np.fromfile(os.path.join(directory, f"{split}_images.f32"), dtype="<f4")
    if raw.size != np.prod(shape):
        raise DatasetError(
            f"{split} images file has {raw.size} floats, expected {int(np.prod(shape))}"
        )
    images = torch.from_numpy(raw.reshape(shape).copy())
    labels_path = os.path.join(directory, f"{split}_labels.csv")
    labels = _read_labels_csv(labels_path) if os.path.exists(labels_path) else None
    return LabeledSplit(split, images, labels)


def load_eval_labels(directory: str) -> torch.Tensor:
    """Ground truth for the unlabeled split; call this from evaluation only."""
    return _read_labels_csv(eval_labels_path(directory))


# ---------------------------------------------------------------------------
# Label-group partitioning.
# ---------------------------------------------------------------------------


def partition_labels(label_count: int, groups: int, mode: str = "contiguous",
                     seed: int = 0) -> list[tuple[int, ...]]:
    """Disjoint cover of {0..L-1} in `groups` balanced parts: sizes differ by
    at most one, larger parts first. 'random' shuffles labels first."""
    if groups < 1 or groups > label_count:
        raise DatasetError(f"cannot split {label_count} labels into {groups} groups")
    if mode not in ("contiguous", "random"):
        raise DatasetError(f"unknown partition mode '{mode}'")
    labels = np.arange(label_count)
    if mode == "random":
        rng = np.random.default_rng(derive_seed(seed, "label-partition"))
        labels = rng.permutation(labels)
    base, rem = divmod(label_count, groups)
    out = []
    start = 0
    for g in range(groups):
        size = base + (1 if g < rem else 0)
        out.append(tuple(int(v) for v in labels[start : start + size]))
        start += size
    return out


# ---------------------------------------------------------------------------
# Checkpoint container.
# ---------------------------------------------------------------------------


def _canonical_header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str, kind: str, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    """Write the container: magic, version, header length, canonical JSON
    header, sha256(header), float32 little-endian payload."""
    index = []
    payload = io.BytesIO()
    offset = 0
    for name in sorted(tensors):
        tensor = tensors[name].detach().to(torch.float32).contiguous()
        data = tensor.numpy().astype("<f4").tobytes()
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        payload.write(data)
        offset += len(data)
    header = {"kind": kind, "version": FORMAT_VERSION, "meta": meta, "tensors": index,
              "payload_bytes": offset}
    header_bytes = _canonical_header_bytes(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        fh.write(hashlib.sha256(header_bytes).digest())
        fh.write(payload.getvalue())


def load_checkpoint(path: str, expect_kind: str | None = None) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read and fully validate a checkpoint; returns (header, tensors)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if len(blob) < len(MAGIC) + 12 or bytes(view[: len(MAGIC)]) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version = int.from_bytes(view[pos : pos + 4], "little")
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (want {FORMAT_VERSION})")
    header_len = int.from_bytes(view[pos : pos + 8], "little")
    pos += 8
    if len(blob) < pos + header_len + 32:
        raise CheckpointError(f"{path}: truncated header")
    header_bytes = bytes(view[pos : pos + header_len])
    pos += header_len
    digest = bytes(view[pos : pos + 32])
    pos += 32
    if hashlib.sha256(header_bytes).digest() != digest:
        raise CheckpointError(f"{path}: corrupt header (hash mismatch)")
    header = json.loads(header_bytes)
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"{path}: checkpoint kind '{header['kind']}', expected '{expect_kind}'")
    payload = view[pos:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: corrupt payload ({len(payload)} bytes, header says {header['payload_bytes']})"
        )
    tensors = {}
    expected_offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        if entry["offset"] != expected_offset:
            raise CheckpointError(f"{path}: tensor index does not tile the payload at '{entry['name']}'")
        expected_offset += nbytes
        raw = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(raw.reshape(shape).copy())
    if expected_offset != header["payload_bytes"]:
        raise CheckpointError(f"{path}: tensor index does not cover the payload")
    return header, tensors


# ---------------------------------------------------------------------------
# Typed wrappers.
# ---------------------------------------------------------------------------


def save_network(path: str, net: BlockifiedNetwork, meta: dict | None = None) -> None:
    full_meta = {
        "spec": net.spec.to_json(),
        "spec_hash": net.spec.spec_hash(),
        "producer": net.producer,
        **(meta or {}),
    }
    save_checkpoint(path, "network", full_meta, dict(net.state_dict()))


def load_network(path: str, expect_spec_hash: str | None = None) -> tuple[BlockifiedNetwork, dict]:
    header, tensors = load_checkpoint(path, expect_kind="network")
    spec = ArchitectureSpec.from_json(header["meta"]["spec"])
    if expect_spec_hash is not None and spec.spec_hash() != expect_spec_hash:
        raise CheckpointError(
            f"{path}: architecture hash {spec.spec_hash()[:12]} does not match the expected "
            f"{expect_spec_hash[:12]} (trained under a different architecture)"
        )
    net = BlockifiedNetwork(spec, producer=header["meta"].get("producer", "network"))
    net.load_state_dict(tensors)
    return net, header["meta"]


def save_filter_bank(path: str, bank: FilterBank, meta: dict | None = None) -> None:
    filters_meta = [
        {
            "teacher": n,
            "block": k,
            "channels": bank[(n, k)].channels,
            "reduction": bank[(n, k)].reduction,
        }
        for n, k in bank.keys()
    ]
    tensors = {}
    for n, k in bank.keys():
        for pname, p in bank[(n, k)].named_parameters():
            tensors[f"filter.{n}.{k}.{pname}"] = p
    save_checkpoint(path, "filter_bank", {"filters": filters_meta, **(meta or {})}, tensors)


def load_filter_bank(path: str) -> tuple[FilterBank, dict]:
    header, tensors = load_checkpoint(path, expect_kind="filter_bank")
    filters = {}
    for entry in header["meta"]["filters"]:
        n, k = int(entry["teacher"]), int(entry["block"])
        filt = FilterModule(n, k, channels=int(entry["channels"]), reduction=int(entry["reduction"]))
        state = {
            pname: tensors[f"filter.{n}.{k}.{pname}"] for pname, _ in filt.named_parameters()
        }
        filt.load_state_dict(state)
        filters[(n, k)] = filt
    return FilterBank(filters), header["meta"]


def _build_block(spec: ArchitectureSpec, k: int):
    cls = DenseBlock if spec.wiring == "dense_concat" else ResidualBlock
    return cls(spec.block_input_channels(k), spec.block_channels[k - 1], spec.block_strides[k - 1])


def save_task_bundle(
    path: str,
    nets: list[TaskSpecificNet],
    trunk: Trunk,
    student_spec: ArchitectureSpec,
    meta: dict | None = None,
) -> None:
    """Persist the regrouped task nets with the shared trunk stored once."""
    tensors: dict[str, torch.Tensor] = {}
    for pname, p in trunk.blocks.named_parameters():
        tensors[f"trunk.blocks.{pname}"] = p
    if trunk.stem is not None:
        for pname, p in trunk.stem.named_parameters():
            tensors[f"trunk.stem.{pname}"] = p
    tasks_meta = []
    for net in nets:
        prefix = f"task{net.task_id}"
        for pname, p in net.filt.named_parameters():
            tensors[f"{prefix}.filt.{pname}"] = p
        for pname, p in net.suffix_blocks.named_parameters():
            tensors[f"{prefix}.suffix.{pname}"] = p
        for pname, p in net.head.named_parameters():
            tensors[f"{prefix}.head.{pname}"] = p
        tasks_meta.append(
            {
                "task_id": net.task_id,
                "teacher_index": net.teacher_index,
                "branch_block": net.branch_block,
                "arity": net.head.fc.out_features,
                "filter_reduction": net.filt.reduction,
            }
        )
    full_meta = {
        "student_spec": student_spec.to_json(),
        "spec_hash": student_spec.spec_hash(),
        "trunk_length": trunk.length,
        "tasks": tasks_meta,
        **(meta or {}),
    }
    save_checkpoint(path, "task_bundle", full_meta, tensors)


def load_task_bundle(path: str) -> tuple[list[TaskSpecificNet], Trunk, dict]:
    """Rebuild the task nets with trunk modules shared by reference, exactly
    as regrouping produced them."""
    header, tensors = load_checkpoint(path, expect_kind="task_bundle")
    meta = header["meta"]
    spec = ArchitectureSpec.from_json(meta["student_spec"])
    trunk_length = int(meta["trunk_length"])
    blocks = torch.nn.ModuleList(_build_block(spec, k) for k in range(1, trunk_length + 1))
    blocks.load_state_dict(
        {name[len("trunk.blocks."):]: t for name, t in tensors.items() if name.startswith("trunk.blocks.")}
    )
    stem = None
    if spec.wiring == "dense_concat":
        stem = torch.nn.Sequential(
            torch.nn.Conv2d(spec.input_shape[0], spec.stem_channels, 3, padding=1), torch.nn.ReLU()
        )
        stem.load_state_dict(
            {name[len("trunk.stem."):]: t for name, t in tensors.items() if name.startswith("trunk.stem.")}
        )
    trunk = Trunk(stem=stem, blocks=blocks, length=trunk_length)
    sizes = spec.feature_sizes()
    nets = []
    for entry in meta["tasks"]:
        task_id = int(entry["task_id"])
        branch = int(entry["branch_block"])
        filt = FilterModule(
            int(entry["teacher_index"]), branch, channels=sizes[branch - 1][0],
            reduction=int(entry["filter_reduction"]),
        )
        suffix = torch.nn.ModuleList(
            _build_block(spec, k) for k in range(branch + 1, spec.num_blocks + 1)
        )
        head = TaskHead(spec.head_input_dim(), int(entry["arity"]))
        prefix = f"task{task_id}"
        filt.load_state_dict(
            {n[len(f"{prefix}.filt."):]: t for n, t in tensors.items() if n.startswith(f"{prefix}.filt.")}
        )
        suffix.load_state_dict(
            {n[len(f"{prefix}.suffix."):]: t for n, t in tensors.items() if n.startswith(f"{prefix}.suffix.")}
        )
        head.load_state_dict(
            {n[len(f"{prefix}.head."):]: t for n, t in tensors.items() if n.startswith(f"{prefix}.head.")}
        )
        nets.append(
            TaskSpecificNet(
                task_id=task_id,
                teacher_index=int(entry["teacher_index"]),
                branch_block=branch,
                wiring=spec.wiring,
                trunk_stem=stem,
                trunk_blocks=list(blocks[:branch]),
                filt=filt,
                suffix_blocks=list(suffix),
                head=head,
            )
        )
    return nets, trunk, meta
