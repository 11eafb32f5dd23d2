"""Blockified networks: stacks of B freezable blocks plus per-task sigmoid heads.

Two wirings are supported. ``sequential`` is the residual reading: block k
consumes block k-1's output (block 1 consumes the image). ``dense_concat``
is the densely-connected reading: a stem maps the image into feature space
and block k consumes the channel concatenation of the stem and every prior
block output, with earlier (larger) maps average-pooled down to the current
spatial size before concatenation.

The module also provides substitution-resume forwarding: replace the block-k
feature with an externally supplied tensor and run the remaining blocks and
heads as if it were the network's own, which is the mechanism the entangled
amalgamation loss is built on.
"""

import hashlib
import json
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .nncore import derive_seed, generator


class SpecValidationError(ValueError):
    """Architecture description is internally inconsistent."""


class ShapeMismatchError(RuntimeError):
    """A tensor does not match the shape the architecture declares for its slot."""


WIRINGS = ("sequential", "dense_concat")


@dataclass(frozen=True)
class TaskHeadSpec:
    task_id: int
    arity: int = 1


@dataclass(frozen=True)
class ArchitectureSpec:
    """Static description of a blockified network.

    input_shape is (channels, height, width). block_channels / block_strides
    give each block's output width and spatial stride. stem_channels is used
    only by dense_concat wiring (sequential networks have no stem and block 1
    reads the image directly).
    """

    input_shape: tuple[int, int, int]
    block_channels: tuple[int, ...]
    block_strides: tuple[int, ...]
    task_heads: tuple[TaskHeadSpec, ...]
    wiring: str = "sequential"
    stem_channels: int = 0

    def __post_init__(self):
        if self.wiring not in WIRINGS:
            raise SpecValidationError(f"unknown wiring '{self.wiring}'; expected one of {WIRINGS}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise SpecValidationError(f"input_shape must be 3 positive dims, got {self.input_shape}")
        if not self.block_channels:
            raise SpecValidationError("at least one block is required")
        if len(self.block_channels) != len(self.block_strides):
            raise SpecValidationError(
                f"block_channels ({len(self.block_channels)}) and block_strides "
                f"({len(self.block_strides)}) must have equal length"
            )
        if any(c < 1 for c in self.block_channels) or any(s < 1 for s in self.block_strides):
            raise SpecValidationError("block channels and strides must be positive")
        if not self.task_heads:
            raise SpecValidationError("at least one task head is required")
        ids = [h.task_id for h in self.task_heads]
        if len(set(ids)) != len(ids):
            raise SpecValidationError(f"duplicate task ids in heads: {ids}")
        if any(h.arity < 1 for h in self.task_heads):
            raise SpecValidationError("head arity must be >= 1")
        if self.wiring == "dense_concat" and self.stem_channels < 1:
            raise SpecValidationError("dense_concat wiring requires stem_channels >= 1")
        if self.wiring == "sequential" and self.stem_channels != 0:
            raise SpecValidationError("sequential wiring takes no stem (stem_channels must be 0)")

    @property
    def num_blocks(self) -> int:
        return len(self.block_channels)

    @property
    def task_ids(self) -> tuple[int, ...]:
        return tuple(h.task_id for h in self.task_heads)

    def head_arity(self, task_id: int) -> int:
        for h in self.task_heads:
            if h.task_id == task_id:
                return h.arity
        raise KeyError(f"no head for task {task_id}")

    def block_input_channels(self, k: int) -> int:
        """Channels entering block k (1-indexed)."""
        self._check_block_index(k)
        if self.wiring == "sequential":
            return self.input_shape[0] if k == 1 else self.block_channels[k - 2]
        return self.stem_channels + sum(self.block_channels[: k - 1])

    def feature_sizes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) of each block's output, in order.

        All convolutions are 3x3 with padding 1, so a stride-s block maps
        spatial size H to ceil(H / s); both wirings share the recurrence
        because the dense stem is stride 1.
        """
        sizes = []
        h, w = self.input_shape[1], self.input_shape[2]
        for c, s in zip(self.block_channels, self.block_strides):
            h = -(-h // s)
            w = -(-w // s)
            sizes.append((c, h, w))
        return sizes

    def head_input_dim(self) -> int:
        if self.wiring == "sequential":
            return self.block_channels[-1]
        return sum(self.block_channels)

    def to_json(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "block_channels": list(self.block_channels),
            "block_strides": list(self.block_strides),
            "task_heads": [[h.task_id, h.arity] for h in self.task_heads],
            "wiring": self.wiring,
            "stem_channels": self.stem_channels,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ArchitectureSpec":
        return cls(
            input_shape=tuple(data["input_shape"]),
            block_channels=tuple(data["block_channels"]),
            block_strides=tuple(data["block_strides"]),
            task_heads=tuple(TaskHeadSpec(int(t), int(a)) for t, a in data["task_heads"]),
            wiring=data["wiring"],
            stem_channels=int(data.get("stem_channels", 0)),
        )

    def spec_hash(self) -> str:
        payload = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def _check_block_index(self, k: int) -> None:
        if not 1 <= k <= self.num_blocks:
            raise ShapeMismatchError(f"block index {k} outside [1, {self.num_blocks}]")


# ---------------------------------------------------------------------------
# Selected task subsets C = {C_n}: (teacher index, global task id) pairs.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSelection:
    """The customized task set: which tasks are kept, and from which teacher."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.pairs:
            raise SpecValidationError("task selection must be nonempty")
        seen = set()
        for teacher, task in self.pairs:
            if teacher < 0 or task < 0:
                raise SpecValidationError(f"negative index in selection pair ({teacher}, {task})")
            if (teacher, task) in seen:
                raise SpecValidationError(f"duplicate selection pair ({teacher}, {task})")
            seen.add((teacher, task))
        object.__setattr__(self, "pairs", tuple(sorted(self.pairs)))

    @classmethod
    def parse(cls, text: str) -> "TaskSelection":
        """Parse 'n:i,n:j' pairs, e.g. '0:2,1:5'."""
        pairs = []
        for chunk in text.split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            teacher, _, task = chunk.partition(":")
            try:
                pairs.append((int(teacher), int(task)))
            except ValueError as exc:
                raise SpecValidationError(f"bad selection chunk '{chunk}' (want teacher:task)") from exc
        return cls(tuple(pairs))

    def to_string(self) -> str:
        return ",".join(f"{n}:{i}" for n, i in self.pairs)

    @property
    def total(self) -> int:
        """|C| = sum over teachers of the number of selected tasks."""
        return len(self.pairs)

    @property
    def teacher_indices(self) -> tuple[int, ...]:
        return tuple(sorted({n for n, _ in self.pairs}))

    @property
    def task_ids(self) -> tuple[int, ...]:
        return tuple(i for _, i in self.pairs)

    def for_teacher(self, teacher_index: int) -> tuple[int, ...]:
        return tuple(i for n, i in self.pairs if n == teacher_index)

    def teacher_of(self, task_id: int) -> int:
        for n, i in self.pairs:
            if i == task_id:
                return n
        raise KeyError(f"task {task_id} not in selection")


# ---------------------------------------------------------------------------
# Runtime values: feature maps, predictions, traces.
# ---------------------------------------------------------------------------


@dataclass
class FeatureMap:
    block_index: int
    tensor: torch.Tensor
    producer: str = "network"


@dataclass
class PredictionSet:
    """Per-task probability tensors, each of shape (batch, arity), values in [0, 1]."""

    probs: dict[int, torch.Tensor]

    @property
    def task_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.probs))

    def __getitem__(self, task_id: int) -> torch.Tensor:
        return self.probs[task_id]

    def restrict(self, task_ids) -> "PredictionSet":
        missing = [t for t in task_ids if t not in self.probs]
        if missing:
            raise KeyError(f"prediction set has no tasks {missing}")
        return PredictionSet({t: self.probs[t] for t in task_ids})

    def detach(self) -> "PredictionSet":
        return PredictionSet({t: p.detach() for t, p in self.probs.items()})


@dataclass
class ForwardTrace:
    """Everything a forward pass produced: stem output (dense wiring only),
    one FeatureMap per block, and the head predictions."""

    stem: torch.Tensor | None
    features: list[FeatureMap] = field(default_factory=list)
    predictions: PredictionSet | None = None

    def feature_tensors(self) -> list[torch.Tensor]:
        return [f.tensor for f in self.features]


# ---------------------------------------------------------------------------
# Wiring arithmetic shared by networks and regrouped task nets.
# ---------------------------------------------------------------------------


def dense_block_input(stem_out: torch.Tensor, prior: list[torch.Tensor]) -> torch.Tensor:
    """Concatenate stem + all prior block features along channels, average-pooling
    every earlier map down to the most recent spatial size."""
    pieces = [stem_out, *prior]
    target = pieces[-1].shape[-2:]
    aligned = [p if p.shape[-2:] == tuple(target) else F.adaptive_avg_pool2d(p, target) for p in pieces]
    return torch.cat(aligned, dim=1)


def block_input(wiring: str, batch: torch.Tensor | None, stem_out: torch.Tensor | None,
                prior: list[torch.Tensor], k: int) -> torch.Tensor:
    if wiring == "sequential":
        if k == 1:
            if batch is None:
                raise ShapeMismatchError("sequential block 1 needs the input batch")
            return batch
        return prior[k - 2]
    if stem_out is None:
        raise ShapeMismatchError("dense_concat wiring needs the stem output")
    return dense_block_input(stem_out, prior[: k - 1])


def head_features(wiring: str, features: list[torch.Tensor]) -> torch.Tensor:
    """Pooled vector the task heads consume: final block's global average for
    sequential wiring, concatenation of every block's global average for dense."""
    if wiring == "sequential":
        return F.adaptive_avg_pool2d(features[-1], 1).flatten(1)
    return torch.cat([F.adaptive_avg_pool2d(f, 1).flatten(1) for f in features], dim=1)


# ---------------------------------------------------------------------------
# Blocks and heads.
# ---------------------------------------------------------------------------


class ResidualBlock(nn.Module):
    """conv3x3(stride) -> ReLU -> conv3x3, plus a projection shortcut when the
    shape changes; ReLU after the add. No normalization layers (substitution
    semantics stay deterministic with no running statistics)."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels or stride != 1:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        else:
            self.shortcut = None

    def forward(self, x):
        y = self.conv2(torch.relu(self.conv1(x)))
        s = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(y + s)


class DenseBlock(nn.Module):
    """1x1 channel-reducing conv -> ReLU -> 3x3 strided conv -> ReLU. The 1x1
    stage absorbs the growing concatenated input width."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.reduce = nn.Conv2d(in_channels, out_channels, 1)
        self.conv = nn.Conv2d(out_channels, out_channels, 3, stride=stride, padding=1)

    def forward(self, x):
        return torch.relu(self.conv(torch.relu(self.reduce(x))))


class TaskHead(nn.Module):
    """Affine map + sigmoid over the pooled feature vector; one per task."""

    def __init__(self, in_features: int, arity: int):
        super().__init__()
        self.fc = nn.Linear(in_features, arity)

    def forward(self, pooled):
        return torch.sigmoid(self.fc(pooled))


def _fan_in(param: torch.Tensor) -> int:
    if param.ndim == 4:  # conv weight (out, in, kh, kw)
        return param.shape[1] * param.shape[2] * param.shape[3]
    if param.ndim == 2:  # linear weight (out, in)
        return param.shape[1]
    raise ValueError(f"no fan-in rule for parameter of shape {tuple(param.shape)}")


def init_parameters(module: nn.Module, base_seed: int) -> None:
    """Deterministic fan-in-scaled uniform init: weights ~ U(-b, b) with
    b = sqrt(6 / fan_in) (variance-preserving for ReLU stacks, which have no
    normalization layers here), each tensor drawn from its own generator
    seeded by parameter name; biases zero. Independent of registration order."""
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if name.endswith("bias"):
                p.zero_()
                continue
            bound = (6.0 / _fan_in(p)) ** 0.5
            gen = generator(derive_seed(base_seed, name))
            p.uniform_(-bound, bound, generator=gen)


class BlockifiedNetwork(nn.Module):
    """A stack of B blocks plus per-task heads, with feature capture and
    substitution-resume forwarding."""

    def __init__(self, spec: ArchitectureSpec, producer: str = "network"):
        super().__init__()
        self.spec = spec
        self.producer = producer
        if spec.wiring == "dense_concat":
            self.stem = nn.Sequential(
                nn.Conv2d(spec.input_shape[0], spec.stem_channels, 3, padding=1), nn.ReLU()
            )
            block_cls = DenseBlock
        else:
            self.stem = None
            block_cls = ResidualBlock
        self.blocks = nn.ModuleList(
            block_cls(spec.block_input_channels(k), spec.block_channels[k - 1], spec.block_strides[k - 1])
            for k in range(1, spec.num_blocks + 1)
        )
        self.heads = nn.ModuleDict(
            {str(h.task_id): TaskHead(spec.head_input_dim(), h.arity) for h in spec.task_heads}
        )

    # -- forward passes -----------------------------------------------------

    def _check_batch(self, batch: torch.Tensor) -> None:
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.spec.input_shape:
            raise ShapeMismatchError(
                f"batch shape {tuple(batch.shape)} does not match input shape {self.spec.input_shape}"
            )

    def _check_feature(self, k: int, tensor: torch.Tensor) -> None:
        want = self.spec.feature_sizes()[k - 1]
        if tensor.ndim != 4 or tuple(tensor.shape[1:]) != want:
            raise ShapeMismatchError(
                f"block {k} feature has shape {tuple(tensor.shape)}, expected (batch, {want[0]}, {want[1]}, {want[2]})"
            )

    def predict(self, features: list[torch.Tensor]) -> PredictionSet:
        pooled = head_features(self.spec.wiring, features)
        return PredictionSet({int(t): head(pooled) for t, head in self.heads.items()})

    def forward_collect(self, batch: torch.Tensor) -> ForwardTrace:
        """Run the full network, returning every block feature and all head outputs."""
        self._check_batch(batch)
        stem_out = self.stem(batch) if self.stem is not None else None
        feats: list[torch.Tensor] = []
        for k, block in enumerate(self.blocks, start=1):
            x = block_input(self.spec.wiring, batch, stem_out, feats, k)
            feats.append(block(x))
        maps = [FeatureMap(k, t, self.producer) for k, t in enumerate(feats, start=1)]
        return ForwardTrace(stem=stem_out, features=maps, predictions=self.predict(feats))

    def forward(self, batch: torch.Tensor) -> PredictionSet:
        return self.forward_collect(batch).predictions

    def forward_substituted(
        self,
        block_index: int,
        substitute,
        prefix: ForwardTrace | None = None,
        task_ids=None,
    ) -> PredictionSet:
        """Resume the forward pass from block_index+1 with `substitute` in place
        of this network's own block-k feature.

        Sequential wiring needs no prefix (later blocks see only F^k). Dense
        wiring additionally concatenates features of blocks < k into later
        inputs, so a prefix trace over the same batch must be supplied; the
        substituted feature replaces position k in every later concatenation.
        """
        spec = self.spec
        spec._check_block_index(block_index)
        tensor = substitute.tensor if isinstance(substitute, FeatureMap) else substitute
        self._check_feature(block_index, tensor)
        stem_out = None
        if spec.wiring == "dense_concat":
            # dense heads pool every block and later inputs concatenate earlier
            # features, so the prefix is always needed
            if prefix is None:
                raise ShapeMismatchError("dense_concat substitution requires a prefix trace")
            stem_out = prefix.stem
            if stem_out is None:
                raise ShapeMismatchError("prefix trace is missing the stem output")
            if len(prefix.features) < block_index - 1:
                raise ShapeMismatchError(
                    f"prefix trace has {len(prefix.features)} features, need {block_index - 1}"
                )
            feats = [f.tensor for f in prefix.features[: block_index - 1]]
        else:
            feats = [None] * (block_index - 1)
        feats.append(tensor)
        for k in range(block_index + 1, spec.num_blocks + 1):
            x = block_input(spec.wiring, None, stem_out, feats, k)
            feats.append(self.blocks[k - 1](x))
        preds = self.predict(feats)
        return preds.restrict(task_ids) if task_ids is not None else preds

    # -- freezing -----------------------------------------------------------

    def set_trainable(self, *, blocks=None, heads: bool | None = None, stem: bool | None = None) -> None:
        """Set requires_grad per block index (1-indexed iterable), for all heads,
        and/or for the stem. Unmentioned parts are left as they are."""
        if blocks is not None:
            wanted = set(blocks)
            for k, block in enumerate(self.blocks, start=1):
                flag = k in wanted
                for p in block.parameters():
                    p.requires_grad_(flag)
        if heads is not None:
            for p in self.heads.parameters():
                p.requires_grad_(heads)
        if stem is not None and self.stem is not None:
            for p in self.stem.parameters():
                p.requires_grad_(stem)


def build_network(spec: ArchitectureSpec, init_seed: int, producer: str = "network") -> BlockifiedNetwork:
    net = BlockifiedNetwork(spec, producer=producer)
    init_parameters(net, init_seed)
    return net
