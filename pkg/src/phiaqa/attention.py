"""Vanilla and low-rank prototype (TESA) self-attention, and the TETE encoder.

Inputs are ``(M, D)`` clip-feature matrices or ``(B, M, D)`` stacks of them.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, as_tensor
from .errors import ConfigError, ShapeError

MODES = ("vanilla", "tesa")


@dataclass
class AttentionParams:
    wq: object
    wk: object
    wv: object
    t: object = None
    mode: str = "tesa"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown attention mode {self.mode!r}")
        if (self.t is not None) != (self.mode == "tesa"):
            raise ConfigError("the low-rank matrix T is required for tesa and forbidden for vanilla")
        self.wq, self.wk, self.wv = as_tensor(self.wq), as_tensor(self.wk), as_tensor(self.wv)
        if self.t is not None:
            self.t = as_tensor(self.t)
        D, d_k = self.wq.shape
        if self.wk.shape != (D, d_k) or self.wv.shape != (D, D):
            raise ShapeError(f"embedding shapes disagree: wq {self.wq.shape}, wk {self.wk.shape}, "
                             f"wv {self.wv.shape}")
        if self.t is not None and self.t.shape[1] != d_k:
            raise ShapeError(f"T must be d_t x {d_k}, got {self.t.shape}")

    @property
    def width(self) -> int:
        return self.wq.shape[0]


def _check_input(H: Tensor, p: AttentionParams):
    if H.shape[-1] != p.width or H.shape[-2] < 1:
        raise ShapeError(f"clip features {H.shape} do not match embedding width {p.width}")


def vanilla_attention(H, p: AttentionParams) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V."""
    H = as_tensor(H)
    _check_input(H, p)
    q = H @ p.wq
    k = H @ p.wk
    v = H @ p.wv
    scores = (q @ k.T) * (1.0 / math.sqrt(p.wq.shape[1]))
    return dc.softmax_rows(scores) @ v


def tesa_attention(H, p: AttentionParams) -> Tensor:
    """Prototype attention with a d_t x d_k low-rank matrix T.

    T_q and T_k distribute each clip over the d_t prototypes. Each prototype
    then averages the clips with weights softmax(T_k^T) (a softmax over the M
    clips), and T_q mixes the d_t prototype rows back out per clip.

    The value projection is applied after the clip aggregation,
    ``(softmax(T_k^T) H) W_v``, which equals ``softmax(T_k^T) (H W_v)`` but
    costs d_t*D*D instead of M*D*D.
    """
    H = as_tensor(H)
    _check_input(H, p)
    if p.mode != "tesa":
        raise ConfigError("tesa_attention needs mode='tesa'")
    tq = dc.softmax_rows((H @ p.wq) @ p.t.T)
    tk = dc.softmax_rows((H @ p.wk) @ p.t.T)
    proto = dc.softmax_rows(tk.T) @ H
    tv = proto @ p.wv
    return tq @ tv


def attention(H, p: AttentionParams) -> Tensor:
    return tesa_attention(H, p) if p.mode == "tesa" else vanilla_attention(H, p)


def mac_count(mode: str, M: int, D: int, d_k: int, d_t: int = 0, core_only: bool = False) -> int:
    """Multiply-accumulate count of one attention call (Q, K, V embeddings plus core)."""
    if min(M, D, d_k) <= 0 or (mode == "tesa" and d_t <= 0):
        raise ValueError("dimensions must be positive")
    embed = M * D * d_k * 2 + M * D * D
    if mode == "vanilla":
        core = M * M * d_k + M * M * D
    elif mode == "tesa":
        core = 2 * M * d_k * d_t + M * d_t * D + M * d_t * D
    else:
        raise ConfigError(f"unknown attention mode {mode!r}")
    return core if core_only else embed + core


# ------------------------------------------------------------------- encoder


@dataclass(frozen=True)
class EncoderConfig:
    D: int
    d_k: int
    d_t: int
    m_max: int
    mode: str = "tesa"
    dropout: float = 0.3
    positions: bool = True

    @property
    def d_ff(self) -> int:
        return 2 * self.D


class CallCounter:
    """Thread-safe count of encoder invocations."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def bump(self):
        with self._lock:
            self.count += 1

    def reset(self):
        with self._lock:
            self.count = 0


TETE_CALLS = CallCounter()


def init_encoder(store: dc.ParamStore, cfg: EncoderConfig, rng: np.random.Generator,
                 prefix: str = "enc.") -> None:
    D, d_k, d_t, d_ff = cfg.D, cfg.d_k, cfg.d_t, cfg.d_ff
    if cfg.mode not in MODES:
        raise ConfigError(f"unknown attention mode {cfg.mode!r}")
    store.add(prefix + "wq", dc.linear_init(rng, D, (D, d_k)))
    store.add(prefix + "wk", dc.linear_init(rng, D, (D, d_k)))
    store.add(prefix + "wv", dc.linear_init(rng, D, (D, D)))
    if cfg.mode == "tesa":
        store.add(prefix + "t", dc.linear_init(rng, d_k, (d_t, d_k)))
    if cfg.positions:
        store.add(prefix + "pos", rng.normal(0.0, 0.02, (cfg.m_max, D)))
    store.add(prefix + "ln1.gain", np.ones(D))
    store.add(prefix + "ln1.bias", np.zeros(D))
    store.add(prefix + "ff1.w", dc.linear_init(rng, D, (D, d_ff)))
    store.add(prefix + "ff1.b", dc.linear_init(rng, D, d_ff))
    store.add(prefix + "ff2.w", dc.linear_init(rng, d_ff, (d_ff, D)))
    store.add(prefix + "ff2.b", dc.linear_init(rng, d_ff, D))
    store.add(prefix + "ln2.gain", np.ones(D))
    store.add(prefix + "ln2.bias", np.zeros(D))


def attention_params(params: Mapping[str, object], mode: str, prefix: str = "enc.") -> AttentionParams:
    return AttentionParams(params[prefix + "wq"], params[prefix + "wk"], params[prefix + "wv"],
                           params.get(prefix + "t") if mode == "tesa" else None, mode)


def tete_encode(H0, params: Mapping[str, object], cfg: EncoderConfig, training: bool = False,
                rng_seed=0, prefix: str = "enc.") -> Tensor:
    """Estimate the desired feature H1 from H0 with one pre-norm encoder block."""
    TETE_CALLS.bump()
    H0 = as_tensor(H0)
    M = H0.shape[-2]
    if M > cfg.m_max:
        raise ShapeError(f"sequence length M={M} exceeds the position table size m_max={cfg.m_max}")
    p = {k: as_tensor(v) for k, v in params.items() if k.startswith(prefix)}
    x = H0
    if cfg.positions:
        x = x + dc.slice_rows(p[prefix + "pos"], M)
    seed = rng_seed if isinstance(rng_seed, (tuple, list)) else (rng_seed,)
    h = dc.layer_norm(x, p[prefix + "ln1.gain"], p[prefix + "ln1.bias"])
    a, _ = dc.dropout(attention(h, attention_params(p, cfg.mode, prefix)), cfg.dropout,
                      (*seed, 1), training)
    x = x + a
    h = dc.layer_norm(x, p[prefix + "ln2.gain"], p[prefix + "ln2.bias"])
    f = dc.relu(h @ p[prefix + "ff1.w"] + p[prefix + "ff1.b"]) @ p[prefix + "ff2.w"] + p[prefix + "ff2.b"]
    f, _ = dc.dropout(f, cfg.dropout, (*seed, 2), training)
    return x + f
