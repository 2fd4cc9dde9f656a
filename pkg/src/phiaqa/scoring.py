"""Mean clip pooling, the MLP score head, and the loss composition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, as_tensor
from .errors import ShapeError

LAMBDA_M = 0.5
LAMBDA_R = 0.01


@dataclass
class HeadParams:
    w1: object
    b1: object
    w2: object
    b2: object

    def __post_init__(self):
        self.w1, self.b1 = as_tensor(self.w1), as_tensor(self.b1)
        self.w2, self.b2 = as_tensor(self.w2), as_tensor(self.b2)
        D, hidden = self.w1.shape
        if self.b1.shape != (hidden,) or self.w2.shape != (hidden, 1) or self.b2.shape != (1,):
            raise ShapeError("score head shapes disagree")

    @classmethod
    def from_store(cls, params: Mapping[str, object], prefix: str = "head.") -> "HeadParams":
        return cls(params[prefix + "w1"], params[prefix + "b1"], params[prefix + "w2"], params[prefix + "b2"])


def init_head(store: dc.ParamStore, D: int, rng: np.random.Generator, prefix: str = "head.") -> None:
    hidden = max(D // 2, 1)
    store.add(prefix + "w1", dc.linear_init(rng, D, (D, hidden)))
    store.add(prefix + "b1", dc.linear_init(rng, D, hidden))
    store.add(prefix + "w2", dc.linear_init(rng, hidden, (hidden, 1)))
    store.add(prefix + "b2", dc.linear_init(rng, hidden, 1))


def pool_clips(H) -> Tensor:
    H = as_tensor(H)
    if H.shape[-2] < 1:
        raise ShapeError("cannot pool zero clips")
    return dc.mean_rows(H)


def predict_score(H_refined, head: HeadParams) -> Tensor:
    """Normalized score(s): a scalar for an (M, D) input, a (B,) vector for a stack."""
    v = pool_clips(H_refined)
    out = dc.relu(v @ head.w1 + head.b1) @ head.w2 + head.b2
    return dc.sum_last(out)


def score_loss(predictions, targets, mean: bool = False) -> Tensor:
    """0.5 * sum (s - s_hat)^2 (or the batch mean with ``mean=True``)."""
    predictions = as_tensor(predictions)
    targets = as_tensor(targets)
    if predictions.shape != targets.shape:
        raise ShapeError(f"{predictions.shape[0] if predictions.shape else 1} predictions for "
                         f"{targets.shape[0] if targets.shape else 1} targets")
    diff = predictions - targets
    loss = dc.sum_squares(diff) * 0.5
    if mean:
        loss = loss * (1.0 / max(diff.data.size, 1))
    return loss


def total_loss(l_s, l_m=0.0, l_r=0.0, lambda_m: float = LAMBDA_M, lambda_r: float = LAMBDA_R):
    """L_S + lambda_M L_M + lambda_R L_R; works on floats or tensors."""
    return l_s + lambda_m * l_m + lambda_r * l_r
