"""Long-term action quality assessment on clip features: low-rank temporal
attention, multi-step gap-minimization flow, and list-wise contrastive
regularization, in plain numpy."""

__version__ = "0.1.0"
