"""Train a task-customized multi-task student network from multiple
pretrained multi-task teachers using only unlabeled inputs.

The pipeline: pretrain teachers on disjoint label groups, amalgamate a
student trunk block by block via entangled feature substitution through
learnable per-teacher channel filters, pick per-task branch-out blocks from
the converged loss table, regroup task-specific networks, fine-tune them
against teacher soft targets, and evaluate with multi-label AP / top-k
metrics.
"""

__version__ = "0.1.0"
