"""Gap minimization flow: a shared per-clip MLP predicts the gap added at each
of P steps, trained to follow the straight line from H0 to H1."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, as_tensor
from .errors import NonFiniteError, ShapeError


@dataclass
class GapNetParams:
    w1: object
    b1: object
    w2: object
    b2: object

    def __post_init__(self):
        self.w1, self.b1 = as_tensor(self.w1), as_tensor(self.b1)
        self.w2, self.b2 = as_tensor(self.w2), as_tensor(self.b2)
        d_in, d_h = self.w1.shape
        D = d_in - 1
        if self.b1.shape != (d_h,) or self.w2.shape != (d_h, D) or self.b2.shape != (D,):
            raise ShapeError(f"gap network shapes disagree: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                             f"w2 {self.w2.shape}, b2 {self.b2.shape}")

    @property
    def width(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def from_store(cls, params: Mapping[str, object], prefix: str = "flow.") -> "GapNetParams":
        return cls(params[prefix + "w1"], params[prefix + "b1"], params[prefix + "w2"], params[prefix + "b2"])


def init_gapnet(store: dc.ParamStore, D: int, hidden: int, rng: np.random.Generator,
                prefix: str = "flow.") -> None:
    store.add(prefix + "w1", dc.linear_init(rng, D + 1, (D + 1, hidden)))
    store.add(prefix + "b1", dc.linear_init(rng, D + 1, hidden))
    store.add(prefix + "w2", dc.linear_init(rng, hidden, (hidden, D)))
    store.add(prefix + "b2", dc.linear_init(rng, hidden, D))


@dataclass
class FlowTrajectory:
    steps: int
    gaps: list = field(default_factory=list)
    states: list = field(default_factory=list)
    teacher_forced: bool = False

    @property
    def final(self) -> Tensor:
        return self.states[-1]


def interpolate_target(H0, H1, j: int, P: int):
    """Point j/P of the way along the straight line from H0 to H1."""
    if P < 1 or not 0 <= j <= P:
        raise ValueError(f"need 0 <= j <= P and P >= 1, got j={j}, P={P}")
    if as_tensor(H0).shape != as_tensor(H1).shape:
        raise ShapeError(f"endpoint shapes differ: {as_tensor(H0).shape} vs {as_tensor(H1).shape}")
    if j == 0:
        return H0
    if j == P:
        return H1
    t = j / P
    if isinstance(H0, Tensor) or isinstance(H1, Tensor):
        return as_tensor(H0) * (1.0 - t) + as_tensor(H1) * t
    return (1.0 - t) * np.asarray(H0) + t * np.asarray(H1)


def gap_step(phi: GapNetParams, H_prev, step_size: float) -> Tensor:
    """Per-clip gap: W2^T relu(W1^T [h; step] + b1) + b2 for every row h."""
    if not 0.0 < step_size <= 1.0:
        raise ValueError(f"step size must be in (0, 1], got {step_size}")
    H_prev = as_tensor(H_prev)
    if H_prev.shape[-1] != phi.width:
        raise ShapeError(f"features of width {H_prev.shape[-1]} fed to a gap network of width {phi.width}")
    x = dc.concat_last(H_prev, np.array([step_size]))
    return dc.relu(x @ phi.w1 + phi.b1) @ phi.w2 + phi.b2


def rollout(phi: GapNetParams, H0, P: int) -> FlowTrajectory:
    """Apply the gap network P times from H0, accumulating states."""
    if P < 1:
        raise ValueError(f"step count must be >= 1, got {P}")
    H0 = as_tensor(H0)
    traj = FlowTrajectory(P, [], [H0])
    state = H0
    for j in range(1, P + 1):
        try:
            g = gap_step(phi, state, 1.0 / P)
            state = state + g
        except NonFiniteError as exc:
            raise NonFiniteError(exc.op, f"flow step {j} of {P}") from None
        traj.gaps.append(g)
        traj.states.append(state)
    return traj


def teacher_forced_trajectory(phi: GapNetParams, H0, H1, P: int) -> FlowTrajectory:
    """Each step starts from the true interpolation point instead of the previous prediction."""
    if P < 1:
        raise ValueError(f"step count must be >= 1, got {P}")
    H0, H1 = as_tensor(H0), as_tensor(H1)
    traj = FlowTrajectory(P, [], [H0], teacher_forced=True)
    for j in range(1, P + 1):
        start = interpolate_target(H0, H1, j - 1, P)
        g = gap_step(phi, start, 1.0 / P)
        traj.gaps.append(g)
        traj.states.append(start + g)
    return traj


def gmf_loss(traj: FlowTrajectory, H0, H1, P: int) -> tuple[Tensor, Tensor]:
    """Global and local flow losses, summed over any leading batch axis.

    global = ||(H1 - H0) - sum_j g_j||^2
    local  = (1/P) sum_j ||interp(H0, H1, j, P) - state_j||^2
    """
    if traj.steps != P or len(traj.gaps) != P:
        raise ValueError(f"trajectory has {traj.steps} steps, loss asked for P={P}")
    H0, H1 = as_tensor(H0), as_tensor(H1)
    moved = traj.gaps[0]
    for g in traj.gaps[1:]:
        moved = moved + g
    l_global = dc.sum_squares((H1 - H0) - moved)
    l_local = None
    for j in range(1, P + 1):
        term = dc.sum_squares(interpolate_target(H0, H1, j, P) - traj.states[j])
        l_local = term if l_local is None else l_local + term
    return l_global, l_local * (1.0 / P)


def flow_loss(traj: FlowTrajectory, H0, H1, P: int) -> Tensor:
    """Batch flow loss: mean over samples of (global + local). Expects (B, M, D) stacks."""
    B = as_tensor(H0).shape[0] if as_tensor(H0).data.ndim == 3 else 1
    l_global, l_local = gmf_loss(traj, H0, H1, P)
    return (l_global + l_local) * (1.0 / B)
