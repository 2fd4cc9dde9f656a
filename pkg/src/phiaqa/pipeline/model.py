"""Parameter initialization and the forward paths / losses of the full model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..attention import EncoderConfig, init_encoder, tete_encode
from ..gmf import GapNetParams, flow_loss, init_gapnet, rollout, teacher_forced_trajectory
from ..lcr import distance_matrix, lcr_loss, score_distance_matrix
from ..scoring import HeadParams, init_head, predict_score, score_loss
from .config import TrainConfig

ENCODER, FLOW, HEAD = "enc.", "flow.", "head."


def encoder_config(cfg: TrainConfig, D: int, M: int) -> EncoderConfig:
    return EncoderConfig(D=D, d_k=cfg.d_k, d_t=cfg.d_t, m_max=M, mode=cfg.attention_mode,
                         dropout=cfg.dropout, positions=cfg.positions)


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def init_params(cfg: TrainConfig, D: int, M: int) -> dc.ParamStore:
    """Fresh parameters. Each block draws from its own stream so ablation arms
    that share a block's shapes also share its initial values."""
    store = dc.ParamStore()
    init_encoder(store, encoder_config(cfg, D, M), _stream(cfg.seed, 1), ENCODER)
    init_gapnet(store, D, cfg.flow_hidden(D), _stream(cfg.seed, 2), FLOW)
    init_head(store, D, _stream(cfg.seed, 3), HEAD)
    return store


def reinit_head(store: dc.ParamStore, cfg: TrainConfig, D: int) -> None:
    fresh = dc.ParamStore()
    init_head(fresh, D, _stream(cfg.seed, 4), HEAD)
    store.update(fresh)


def names_with(store: dc.ParamStore, *prefixes: str) -> list[str]:
    return [k for k in store.names() if k.startswith(prefixes)]


@dataclass
class LossParts:
    total: dc.Tensor
    score: float = 0.0
    flow: float = 0.0
    lcr: float = 0.0
    predictions: np.ndarray | None = None


def _lcr_term(features, targets, cfg: TrainConfig):
    D = distance_matrix(features)
    S = score_distance_matrix(targets)
    return lcr_loss(D, S, divergence="mse" if cfg.no_kl else "kl", normalize=cfg.lcr_normalize)


def stage1_loss(leaves, X, y, cfg: TrainConfig, enc: EncoderConfig, training: bool, seed) -> LossParts:
    """Encoder + head objective: L_S on the encoder path plus lambda_R L_R on H1."""
    H1 = tete_encode(X, leaves, enc, training, seed, ENCODER)
    pred = predict_score(H1, HeadParams.from_store(leaves, HEAD))
    l_s = score_loss(pred, y, cfg.mean_score_loss)
    total = l_s
    l_r = None
    if cfg.use_lcr and cfg.stage1_lcr and X.shape[0] >= 3:
        l_r = _lcr_term(H1, y, cfg)
        total = total + l_r * cfg.lambda_r
    return LossParts(total, l_s.item(), 0.0, 0.0 if l_r is None else l_r.item(), pred.data)


def stage2_loss(leaves, X, y, cfg: TrainConfig, enc: EncoderConfig, training: bool, seed,
                train_encoder: bool = True) -> LossParts:
    """Full objective L_S + lambda_M L_M + lambda_R L_R with the flow path scoring.

    The encoder output is the flow's target. A co-trained encoder learns only
    through L_M here; a frozen one supplies a constant target.
    """
    head = HeadParams.from_store(leaves, HEAD)
    H1 = tete_encode(X, leaves, enc, training and train_encoder, seed, ENCODER)
    phi = GapNetParams.from_store(leaves, FLOW)
    traj = rollout(phi, X, cfg.steps)
    refined = traj.final
    to_head = refined if cfg.flow_to_head else dc.detach(refined)
    pred = predict_score(to_head, head)
    l_s = score_loss(pred, y, cfg.mean_score_loss)
    target = H1 if train_encoder else dc.detach(H1)
    flow_traj = teacher_forced_trajectory(phi, X, target, cfg.steps) if cfg.teacher_forcing else traj
    l_m = flow_loss(flow_traj, X, target, cfg.steps)
    if cfg.flow_reduction == "element_mean":
        l_m = l_m * (1.0 / (X.shape[-2] * X.shape[-1]))
    total = l_s + l_m * cfg.lambda_m
    l_r = None
    if cfg.use_lcr and X.shape[0] >= 3:
        l_r = _lcr_term(refined, y, cfg)
        total = total + l_r * cfg.lambda_r
    return LossParts(total, l_s.item(), l_m.item(), 0.0 if l_r is None else l_r.item(), pred.data)


def predict_flow(params, X, cfg: TrainConfig) -> np.ndarray:
    """Inference path: H0 -> rollout -> head. Never touches the encoder."""
    phi = GapNetParams.from_store(params, FLOW)
    return predict_score(rollout(phi, X, cfg.steps).final, HeadParams.from_store(params, HEAD)).data


def predict_encoder(params, X, enc: EncoderConfig) -> np.ndarray:
    H1 = tete_encode(X, params, enc, False, 0, ENCODER)
    return predict_score(H1, HeadParams.from_store(params, HEAD)).data


def refined_features(params, X, cfg: TrainConfig, stage: str, enc: EncoderConfig) -> np.ndarray:
    if stage == "stage2":
        return rollout(GapNetParams.from_store(params, FLOW), X, cfg.steps).final.data
    return tete_encode(X, params, enc, False, 0, ENCODER).data
