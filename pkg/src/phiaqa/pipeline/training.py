"""Two-stage training, evaluation, and the ablation / strategy harnesses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import diffcore as dc
from ..errors import ConfigError, FingerprintMismatchError, ShapeError
from ..lcr import ordering_consistency
from ..metrics import EvalReport, spearman
from ..synthdata import DatasetManifest, ScoredSample, stack
from . import model as mdl
from .checkpoint import Checkpoint
from .config import TrainConfig

log = logging.getLogger("phiaqa")

STAGE_CODES = {"stage1": 1, "stage2": 2, "one_stage": 3}


@dataclass
class Dataset:
    """Standardized features and scores normalized to [0, 1] by the training bounds.

    ``X`` holds ``(raw - feat_mean) / feat_std`` with scalar statistics taken
    over the whole training split.
    """

    X: np.ndarray
    scores: np.ndarray
    s_min: float
    s_max: float
    feat_mean: float = 0.0
    feat_std: float = 1.0

    @classmethod
    def from_samples(cls, samples: list[ScoredSample], bounds: tuple[float, float] | None = None,
                     feature_stats: tuple[float, float] | None = None):
        if not samples:
            raise ShapeError("empty dataset")
        X, s = stack(samples)
        lo, hi = bounds if bounds is not None else (samples[0].s_min, samples[0].s_max)
        if not hi > lo:
            raise ConfigError(f"degenerate score bounds [{lo}, {hi}]")
        mu, sd = feature_stats if feature_stats is not None else (float(X.mean()), float(X.std()))
        if not sd > 0:
            raise ConfigError("features have zero spread")
        return cls((X - mu) / sd, s, float(lo), float(hi), float(mu), float(sd))

    @property
    def y(self) -> np.ndarray:
        return (self.scores - self.s_min) / (self.s_max - self.s_min)

    def unnormalize(self, y):
        return np.asarray(y) * (self.s_max - self.s_min) + self.s_min


@dataclass
class EpochLog:
    stage: str
    epoch: int
    lr: float
    total: float
    score: float
    flow: float
    lcr: float
    train_srcc: float

    def line(self) -> str:
        return (f"stage={self.stage} epoch={self.epoch} lr={self.lr:.6g} loss={self.total:.6g} "
                f"l_s={self.score:.6g} l_m={self.flow:.6g} l_r={self.lcr:.6g} "
                f"train_srcc={self.train_srcc:.4f}")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochLog] = field(default_factory=list)


def _batches(n: int, batch: int, seed: int, epoch: int, min_size: int):
    order = np.random.default_rng(np.random.SeedSequence([seed, 7, epoch])).permutation(n)
    for start in range(0, n, batch):
        chunk = order[start:start + batch]
        if len(chunk) >= min_size:
            yield start // batch, chunk


def _run_epochs(params: dc.ParamStore, names: list[str], data: Dataset, cfg: TrainConfig, epochs: int,
                stage: str, loss_fn) -> tuple[dc.OptimizerState, list[EpochLog]]:
    state = dc.OptimizerState.for_params(params, cfg.momentum, cfg.weight_decay, epochs)
    history = []
    y = data.y
    min_size = 4 if cfg.use_lcr else 1
    code = STAGE_CODES[stage]
    for epoch in range(epochs):
        lr = dc.cosine_lr(epoch, epochs, cfg.lr_max, cfg.lr_min)
        sums = np.zeros(4)
        preds, targets = [], []
        count = 0
        for b, idx in _batches(len(y), cfg.batch, cfg.seed, epoch, min_size):
            X, yb = data.X[idx], y[idx]
            seed = (cfg.seed, code, epoch, b)
            parts = {}

            def objective(leaves):
                out = loss_fn(leaves, X, yb, seed)
                parts["p"] = out
                return out.total

            total, grads = dc.gradient_of(objective, params, names)
            dc.sgd_step(params, grads, state, lr, names)
            p = parts["p"]
            sums += (total, p.score, p.flow, p.lcr)
            preds.append(p.predictions)
            targets.append(yb)
            count += 1
        state.epoch = epoch + 1
        if count == 0:
            raise ShapeError("no batch large enough to train on")
        preds_all, targets_all = np.concatenate(preds), np.concatenate(targets)
        try:
            srcc = spearman(preds_all, targets_all)
        except ValueError:
            srcc = float("nan")
        entry = EpochLog(stage, epoch, lr, *(sums / count), srcc)
        history.append(entry)
        log.info(entry.line())
    return state, history


def _meta(data: Dataset, D: int, M: int) -> dict:
    return {"D": D, "M": M, "norm_min": data.s_min, "norm_max": data.s_max,
            "feat_mean": data.feat_mean, "feat_std": data.feat_std}


def train_stage1(data: Dataset, cfg: TrainConfig, epochs: int | None = None) -> TrainResult:
    """Encoder + head on L_S + lambda_R L_R."""
    _, M, D = data.X.shape
    epochs = cfg.epochs if epochs is None else epochs
    params = mdl.init_params(cfg, D, M)
    enc = mdl.encoder_config(cfg, D, M)
    names = mdl.names_with(params, mdl.ENCODER, mdl.HEAD)

    def loss_fn(leaves, X, y, seed):
        return mdl.stage1_loss(leaves, X, y, cfg, enc, True, seed)

    state, history = _run_epochs(params, names, data, cfg, epochs, "stage1", loss_fn)
    ckpt = Checkpoint(cfg, params, "stage1", epochs, _meta(data, D, M), state)
    return TrainResult(ckpt, history)


def train_stage2(data: Dataset, stage1: Checkpoint, cfg: TrainConfig, epochs: int | None = None,
                 stage: str = "stage2") -> TrainResult:
    """Flow (+ head, + encoder unless frozen) on the full objective, starting from stage 1."""
    if stage1.fingerprint != cfg.fingerprint():
        raise FingerprintMismatchError("stage-1 checkpoint was trained under a different config")
    if cfg.no_gmf:
        raise ConfigError("stage 2 trains the flow; it is skipped under no_gmf")
    _, M, D = data.X.shape
    epochs = cfg.epochs if epochs is None else epochs
    params = stage1.params.copy()
    if cfg.reinit_head:
        mdl.reinit_head(params, cfg, D)
    enc = mdl.encoder_config(cfg, D, M)
    train_encoder = not cfg.freeze_tete
    prefixes = (mdl.FLOW, mdl.HEAD) + ((mdl.ENCODER,) if train_encoder else ())
    names = mdl.names_with(params, *prefixes)

    def loss_fn(leaves, X, y, seed):
        return mdl.stage2_loss(leaves, X, y, cfg, enc, True, seed, train_encoder)

    state, history = _run_epochs(params, names, data, cfg, epochs, stage, loss_fn)
    ckpt = Checkpoint(cfg, params, "stage2", stage1.epoch + epochs, _meta(data, D, M), state)
    return TrainResult(ckpt, history)


def initial_checkpoint(data: Dataset, cfg: TrainConfig) -> Checkpoint:
    _, M, D = data.X.shape
    return Checkpoint(cfg, mdl.init_params(cfg, D, M), "init", 0, _meta(data, D, M))


def train(data: Dataset, cfg: TrainConfig, epochs1: int | None = None,
          epochs2: int | None = None) -> TrainResult:
    """Run the configured strategy end to end.

    two_stage: stage 1, then stage 2 (skipped under no_gmf).
    one_stage: the full objective from scratch for epochs1 + epochs2 epochs.
    """
    e1 = cfg.epochs if epochs1 is None else epochs1
    e2 = cfg.epochs if epochs2 is None else epochs2
    if cfg.strategy == "one_stage":
        if cfg.no_gmf:
            return train_stage1(data, cfg, e1 + e2)
        return train_stage2(data, initial_checkpoint(data, cfg), cfg, e1 + e2, stage="one_stage")
    first = train_stage1(data, cfg, e1)
    if cfg.no_gmf:
        return first
    second = train_stage2(data, first.checkpoint, cfg, e2)
    return TrainResult(second.checkpoint, first.history + second.history)


def predict(ckpt: Checkpoint, X: np.ndarray) -> np.ndarray:
    """Normalized predictions through the stage-appropriate path (dropout off).

    ``X`` must already be standardized with the checkpoint's feature statistics.
    """
    cfg = ckpt.config
    _, M, D = X.shape
    if ckpt.stage == "stage2":
        return mdl.predict_flow(ckpt.params, X, cfg)
    m_max = int(ckpt.meta.get("M", M))
    return mdl.predict_encoder(ckpt.params, X, mdl.encoder_config(cfg, D, m_max))


def evaluate(ckpt: Checkpoint, samples: list[ScoredSample], manifest: DatasetManifest | None = None,
             category: str = "synthetic") -> EvalReport:
    if not samples:
        raise ShapeError("empty test set")
    norm = test_dataset(ckpt, samples)
    X, scores = norm.X, norm.scores
    raw = norm.unnormalize(predict(ckpt, X))
    s_min = manifest.s_min if manifest is not None else samples[0].s_min
    s_max = manifest.s_max if manifest is not None else samples[0].s_max
    report = EvalReport()
    report.add(category, raw, scores, s_max, s_min)
    report.extras["ordering_consistency"] = _ordering_diagnostic(ckpt, X)
    online, offline = parameter_counts(ckpt)
    report.extras["params_online"] = online
    report.extras["params_offline"] = offline
    return report


def test_dataset(ckpt: Checkpoint, samples: list[ScoredSample]) -> Dataset:
    """Held-out samples normalized with the training statistics stored in ``ckpt``."""
    m = ckpt.meta
    return Dataset.from_samples(samples, (float(m["norm_min"]), float(m["norm_max"])),
                                (float(m.get("feat_mean", 0.0)), float(m.get("feat_std", 1.0))))


def _ordering_diagnostic(ckpt: Checkpoint, X: np.ndarray, limit: int = 12) -> float:
    cfg = ckpt.config
    _, M, D = X.shape
    enc = mdl.encoder_config(cfg, D, int(ckpt.meta.get("M", M)))
    F = mdl.refined_features(ckpt.params, X[:limit], cfg, ckpt.stage, enc)
    vals = [ordering_consistency(F[i], F[j]) for i in range(len(F)) for j in range(len(F)) if i != j]
    return float(np.mean(vals)) if vals else 1.0


def parameter_counts(ckpt: Checkpoint) -> tuple[int, int]:
    """(online, offline): flow + head run at inference; the encoder only in training."""
    p = ckpt.params
    if ckpt.stage == "stage2":
        return p.count((mdl.FLOW, mdl.HEAD)), p.count((mdl.ENCODER,))
    return p.count((mdl.ENCODER, mdl.HEAD)), 0


ABLATIONS = ("full", "no_gmf", "no_tesa", "no_lcr", "no_kl", "half")


def ablation_config(base: TrainConfig, arm: str) -> TrainConfig:
    if arm == "full":
        return base
    if arm not in ABLATIONS:
        raise ConfigError(f"unknown ablation arm {arm!r}")
    return base.replace(**{arm: True})


def run_ablation(train_samples, test_samples, base: TrainConfig, steps=(1, 2, 4, 8), arms=ABLATIONS,
                 epochs1=None, epochs2=None, test_manifest=None) -> list[tuple[str, EvalReport]]:
    """Train and evaluate every ablation arm, then the flow-step sweep, under one seed."""
    data = Dataset.from_samples(train_samples)
    rows, cache = [], {}
    for arm in arms:
        cfg = ablation_config(base, arm)
        report = evaluate(train(data, cfg, epochs1, epochs2).checkpoint, test_samples, test_manifest)
        cache[cfg.fingerprint()] = report
        rows.append((arm, report))
    for P in steps:
        cfg = base.replace(steps=P)
        report = cache.get(cfg.fingerprint())
        if report is None:
            report = evaluate(train(data, cfg, epochs1, epochs2).checkpoint, test_samples, test_manifest)
            cache[cfg.fingerprint()] = report
        rows.append((f"steps={P}", report))
    return rows


def compare_strategies(train_samples, test_samples, base: TrainConfig, epochs1=None, epochs2=None,
                       test_manifest=None) -> dict[str, EvalReport]:
    data = Dataset.from_samples(train_samples)
    out = {}
    for strategy in ("two_stage", "one_stage"):
        cfg = base.replace(strategy=strategy)
        out[strategy] = evaluate(train(data, cfg, epochs1, epochs2).checkpoint, test_samples, test_manifest)
    return out


def format_table(rows) -> str:
    lines = ["arm srcc rl2"]
    for name, report in rows:
        lines.append(f"{name} {report.mean_srcc:.4f} {report.mean_rl2:.4f}")
    return "\n".join(lines) + "\n"
