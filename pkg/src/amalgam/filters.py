"""Teacher-level filters: light channel-coding modules that translate student
block features into each teacher's feature space.

Each filter is a squeeze-excitation gate: global average pooling followed by
two affine layers and a sigmoid, whose output re-scales the input channels.
One filter exists per (teacher, block). The second affine layer is
zero-initialized so a fresh filter gates every channel at exactly 0.5.
"""

import torch
from torch import nn

from .blocknet import ArchitectureSpec, FeatureMap, ShapeMismatchError, init_parameters
from .nncore import derive_seed


class FilterModule(nn.Module):
    """Channel gate for one (teacher, block) pair.

    gate = sigmoid(W2 · ReLU(W1 · GAP(F))); output = F scaled channel-wise by
    the gate. Shape-preserving and differentiable in both the input feature
    and the filter parameters.
    """

    def __init__(self, teacher_index: int, block_index: int, channels: int, reduction: int = 4):
        super().__init__()
        if channels < 1:
            raise ValueError(f"channels must be positive, got {channels}")
        if reduction < 1:
            raise ValueError(f"reduction must be positive, got {reduction}")
        self.teacher_index = teacher_index
        self.block_index = block_index
        self.channels = channels
        self.reduction = reduction
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, feature: torch.Tensor) -> torch.Tensor:
        squeezed = feature.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(squeezed))))

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.ndim != 4 or feature.shape[1] != self.channels:
            raise ShapeMismatchError(
                f"filter ({self.teacher_index},{self.block_index}) expects {self.channels} "
                f"channels, got shape {tuple(feature.shape)}"
            )
        g = self.gate(feature)
        return feature * g.view(g.shape[0], g.shape[1], 1, 1)


def init_filter(module: FilterModule, base_seed: int) -> None:
    """Fan-in uniform on the first layer, zeros on the second: the initial
    gate is sigmoid(0) = 0.5 for every channel regardless of input."""
    init_parameters(module, base_seed)
    with torch.no_grad():
        module.fc2.weight.zero_()
        module.fc2.bias.zero_()


def apply_filter(filt: FilterModule, feature) -> FeatureMap:
    """Run a feature map (or raw tensor) through a filter, tagging the result
    as substituted input for the filter's teacher."""
    if isinstance(feature, FeatureMap):
        if feature.block_index != filt.block_index:
            raise ShapeMismatchError(
                f"filter for block {filt.block_index} applied to block {feature.block_index} feature"
            )
        tensor = feature.tensor
        k = feature.block_index
    else:
        tensor = feature
        k = filt.block_index
    return FeatureMap(k, filt(tensor), producer=f"substituted:{filt.teacher_index}")


class FilterBank(nn.Module):
    """All N×B filters for an amalgamation run, indexed by (teacher, block)."""

    def __init__(self, filters: dict[tuple[int, int], FilterModule]):
        super().__init__()
        self._index = sorted(filters)
        self.modules_by_key = nn.ModuleDict({f"{n}:{k}": filters[(n, k)] for n, k in self._index})

    def __getitem__(self, key: tuple[int, int]) -> FilterModule:
        n, k = key
        try:
            return self.modules_by_key[f"{n}:{k}"]
        except KeyError:
            raise KeyError(f"no filter for teacher {n}, block {k}") from None

    def __contains__(self, key: tuple[int, int]) -> bool:
        return f"{key[0]}:{key[1]}" in self.modules_by_key

    def __len__(self) -> int:
        return len(self.modules_by_key)

    def keys(self) -> list[tuple[int, int]]:
        return list(self._index)

    def for_block(self, block_index: int) -> list[FilterModule]:
        return [self[(n, k)] for n, k in self._index if k == block_index]

    def set_trainable(self, block_index: int | None, flag: bool) -> None:
        """Flip requires_grad for all filters of one block (or all blocks if None)."""
        for n, k in self._index:
            if block_index is None or k == block_index:
                for p in self[(n, k)].parameters():
                    p.requires_grad_(flag)


def make_filter_bank(
    teachers,
    spec: ArchitectureSpec,
    reduction: int = 4,
    seed: int = 0,
) -> FilterBank:
    """One filter per (teacher, block), each seeded independently so the bank
    is reproducible and insensitive to construction order.

    `teachers` is either a teacher registry (each teacher's block shapes are
    validated against `spec`) or a plain iterable of teacher indices.
    """
    models = getattr(teachers, "models", None)
    if models is not None:
        indices = range(len(models))
        for n, teacher in enumerate(models):
            theirs = teacher.network.spec.feature_sizes()
            if theirs != spec.feature_sizes():
                raise ShapeMismatchError(
                    f"teacher {n} block shapes {theirs} disagree with the shared spec"
                )
    else:
        indices = list(teachers)
    sizes = spec.feature_sizes()
    filters = {}
    for n in indices:
        for k in range(1, spec.num_blocks + 1):
            filt = FilterModule(n, k, channels=sizes[k - 1][0], reduction=reduction)
            init_filter(filt, derive_seed(seed, f"filter:{n}:{k}"))
            filters[(n, k)] = filt
    return FilterBank(filters)
