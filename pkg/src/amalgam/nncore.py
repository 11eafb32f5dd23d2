"""Numerical core shared by every other module.

Declares the differentiable-primitive contract the framework relies on
(convolution, pooling, affine, gates, soft binary cross-entropy), the plain
SGD optimizer with polynomial learning-rate decay and weight decay, the
deterministic seed-derivation rule, and a central finite-difference checker
used to verify analytic gradients.

The primitives are satisfied by torch; everything runs in 32-bit floats on
CPU. Forward passes must stay finite -- a NaN/Inf is an error state, not a
value.
"""

import hashlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F

# Probability clamp applied before any log() in cross-entropy terms.
PROB_EPS = 1e-7


class NonFiniteError(RuntimeError):
    """A tensor that must be finite contains NaN or Inf."""


class NonFiniteGradientError(NonFiniteError):
    """A gradient tensor contains NaN or Inf; names the offending tensor."""


class TrainingDivergenceError(RuntimeError):
    """Training loss exceeded 10x its initial value for 3 consecutive epochs."""


def configure_torch() -> None:
    """Pin global torch state for reproducible desk-scale runs."""
    torch.set_default_dtype(torch.float32)
    torch.use_deterministic_algorithms(True)


def derive_seed(base_seed: int, name: str) -> int:
    """Deterministic per-module seed: base seed XOR a hash of the module name.

    Uses sha256 so the rule is stable across processes and platforms
    (Python's built-in hash() is salted per process).
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return (int(base_seed) ^ int.from_bytes(digest[:8], "little")) & 0x7FFF_FFFF_FFFF_FFFF


def generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def check_finite(tensor: torch.Tensor, context: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"non-finite values in {context}")
    return tensor


# ---------------------------------------------------------------------------
# Optimizer: plain SGD with poly learning-rate decay and weight decay.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD hyperparameters. lr(t) = base_lr * (1 - t/T)^power.

    Defaults follow the poly policy used throughout the framework: base lr
    0.01, power 0.9, weight decay 5e-3, batch size 16. momentum is a config
    extension and defaults to plain SGD.
    """

    base_lr: float = 0.01
    power: float = 0.9
    weight_decay: float = 5e-3
    batch_size: int = 16
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def poly_lr(config: OptimizerConfig, step: int, total_steps: int) -> float:
    """Polynomial decay schedule; lr(0) = base_lr, lr(T) = 0 for power > 0."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    frac = min(max(step / total_steps, 0.0), 1.0)
    return config.base_lr * (1.0 - frac) ** config.power


class ParameterSet:
    """Named parameter tensors with gradient slots and per-tensor trainable flags.

    A thin view over torch parameters: trainable means requires_grad, the
    gradient slot is .grad. Frozen tensors are never touched by sgd_step.
    """

    def __init__(self, named: dict[str, torch.nn.Parameter]):
        self.named = dict(named)

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "") -> "ParameterSet":
        return cls({prefix + name: p for name, p in module.named_parameters()})

    def merged(self, other: "ParameterSet") -> "ParameterSet":
        overlap = self.named.keys() & other.named.keys()
        if overlap:
            raise ValueError(f"duplicate parameter names: {sorted(overlap)}")
        return ParameterSet({**self.named, **other.named})

    def trainable_items(self):
        return [(name, p) for name, p in self.named.items() if p.requires_grad]

    def grads(self) -> dict[str, torch.Tensor]:
        return {name: p.grad for name, p in self.named.items() if p.grad is not None}

    def zero_grads(self) -> None:
        for p in self.named.values():
            p.grad = None

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {name: p.detach().clone() for name, p in self.named.items()}

    def __len__(self) -> int:
        return len(self.named)


def sgd_step(
    params: ParameterSet,
    grads: dict[str, torch.Tensor],
    config: OptimizerConfig,
    step_index: int,
    total_steps: int,
    velocity: dict[str, torch.Tensor] | None = None,
) -> ParameterSet:
    """One SGD step: p <- p - lr(t) * (g + weight_decay * p) for trainable tensors.

    Frozen tensors (requires_grad False) and tensors without a gradient entry
    are left untouched. Raises NonFiniteGradientError naming the tensor on a
    NaN/Inf gradient. With nonzero momentum a velocity buffer dict must be
    supplied; it is updated in place.
    """
    lr = poly_lr(config, step_index, total_steps)
    with torch.no_grad():
        for name, p in params.named.items():
            if not p.requires_grad:
                continue
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient for parameter '{name}'")
            update = g + config.weight_decay * p
            if config.momentum != 0.0:
                if velocity is None:
                    raise ValueError("momentum > 0 requires a velocity buffer dict")
                buf = velocity.get(name)
                if buf is None:
                    buf = velocity[name] = torch.zeros_like(p)
                buf.mul_(config.momentum).add_(update)
                update = buf
            p.add_(update, alpha=-lr)
    return params


def batch_indices(count: int, batch_size: int, gen: torch.Generator | None = None):
    """Split range(count) into batches of index tensors, optionally shuffled by
    the supplied generator. The final partial batch is kept."""
    order = torch.randperm(count, generator=gen) if gen is not None else torch.arange(count)
    return [order[start : start + batch_size] for start in range(0, count, batch_size)]


# ---------------------------------------------------------------------------
# Differentiable primitives. The network modules call the same torch kernels;
# these wrappers are the declared, finite-difference-checked contract surface.
# ---------------------------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0):
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def linear(x, weight, bias=None):
    return F.linear(x, weight, bias)


def relu(x):
    return torch.relu(x)


def sigmoid(x):
    return torch.sigmoid(x)


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C, 1, 1) spatial mean."""
    return F.adaptive_avg_pool2d(x, 1)


def max_pool(x, kernel_size, stride=None):
    return F.max_pool2d(x, kernel_size, stride=stride)


def avg_pool(x, kernel_size, stride=None):
    return F.avg_pool2d(x, kernel_size, stride=stride)


def channel_scale(x, gate):
    """Scale (B, C, H, W) features channel-wise by a (B, C) gate."""
    return x * gate.view(gate.shape[0], gate.shape[1], 1, 1)


def concat_channels(tensors):
    return torch.cat(list(tensors), dim=1)


def add(a, b):
    return a + b


def binary_cross_entropy_soft(target, prob):
    """Elementwise -[t*log(p) + (1-t)*log(1-p)] with p clamped to [eps, 1-eps].

    Targets may be soft (any value in [0, 1]); only the prediction is clamped,
    so the self-target value bce(p, p) is the binary entropy of p.
    """
    p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))


def soft_target_entropy(p):
    """Binary entropy H(p): the soft cross-entropy floor bce(p, p)."""
    return binary_cross_entropy_soft(p, p)


@dataclass(frozen=True)
class PrimitiveSpec:
    name: str
    kind: str  # "differentiable" | "optimizer"
    description: str


def required_primitives() -> tuple[PrimitiveSpec, ...]:
    """The exact operation set the framework needs from its numerical backend."""
    return (
        PrimitiveSpec("conv2d", "differentiable", "2-D convolution with stride and padding"),
        PrimitiveSpec("global_avg_pool", "differentiable", "global average pooling to 1x1"),
        PrimitiveSpec("max_pool", "differentiable", "spatial max pooling"),
        PrimitiveSpec("avg_pool", "differentiable", "spatial average pooling"),
        PrimitiveSpec("linear", "differentiable", "fully connected affine map"),
        PrimitiveSpec("relu", "differentiable", "rectified linear unit"),
        PrimitiveSpec("sigmoid", "differentiable", "logistic gate"),
        PrimitiveSpec("channel_scale", "differentiable", "channel-wise feature scaling"),
        PrimitiveSpec("concat_channels", "differentiable", "concatenation along channels"),
        PrimitiveSpec("add", "differentiable", "elementwise addition"),
        PrimitiveSpec(
            "binary_cross_entropy_soft",
            "differentiable",
            "binary cross-entropy with soft targets and clamped probabilities",
        ),
        PrimitiveSpec("sgd_step", "optimizer", "SGD with poly lr decay and weight decay"),
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.
# ---------------------------------------------------------------------------


def central_difference_gradients(fn, tensors, eps: float = 1e-3) -> list[torch.Tensor]:
    """Central finite-difference gradient of a scalar fn() w.r.t. each tensor.

    Perturbs tensor entries in place through .data; callers should pass
    float64 tensors for accurate differences. fn must recompute the scalar
    from the current tensor values on every call.
    """
    grads = []
    for t in tensors:
        flat = t.data.view(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = float(fn().detach())
            flat[i] = orig - eps
            f_minus = float(fn().detach())
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g.view_as(t))
    return grads


def relative_gradient_error(analytic, numeric) -> float:
    """Max absolute difference normalized by the largest gradient magnitude."""
    if isinstance(analytic, torch.Tensor):
        analytic, numeric = [analytic], [numeric]
    diff = max((a - n).abs().max().item() for a, n in zip(analytic, numeric))
    scale = max(
        max(a.abs().max().item() for a in analytic),
        max(n.abs().max().item() for n in numeric),
        1e-8,
    )
    return diff / scale
