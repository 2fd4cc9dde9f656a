"""Seeded synthetic clip features with a planted nuisance/score split, and the
PHIF binary dataset format.

Every video is drawn from one of a few large "scene" prototypes (score
unrelated, dominating raw distances) plus a small per-clip signal living in a
fixed low-dimensional subspace whose magnitude sets the quality score.

PHIF layout (little-endian): b"PHIF", version u32, N u32, M u32, D u32, then N
records of M*D float32 features followed by one float32 score. Each data file
has a sibling ``<file>.manifest`` of ``key=value`` lines.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, TruncatedPayloadError, VersionMismatchError

MAGIC = b"PHIF"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIII")
SCORE_LOW, SCORE_HIGH = 10.0, 30.0
CLIP_NOISE = 0.1
QUALITY_RANGE = (0.25, 1.75)


@dataclass(frozen=True)
class SyntheticConfig:
    n_train: int = 200
    n_test: int = 50
    M: int = 16
    D: int = 64
    d_s: int = 8
    nuisance_scale: float = 4.0
    signal_scale: float = 1.0
    label_noise: float = 0.02
    n_scenes: int = 6
    seed: int = 0

    def __post_init__(self):
        if not self.nuisance_scale > self.signal_scale:
            raise ConfigError("nuisance_scale must exceed signal_scale")
        if not 0 < self.d_s < self.D:
            raise ConfigError(f"need 0 < d_s < D, got d_s={self.d_s}, D={self.D}")
        if min(self.n_train, self.n_test, self.M, self.n_scenes) < 1:
            raise ConfigError("counts must be positive")
        if self.signal_scale < 0 or self.label_noise < 0:
            raise ConfigError("scales must be non-negative")

    @classmethod
    def from_mapping(cls, values: dict) -> "SyntheticConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"unknown generator option {key!r}")
            out[key] = float(raw) if kinds[key] in ("float", float) else int(raw)
        return cls(**out)


@dataclass
class ScoredSample:
    features: np.ndarray
    score: float
    s_min: float
    s_max: float


@dataclass
class DatasetManifest:
    n: int
    M: int
    D: int
    s_min: float
    s_max: float
    format_version: int = FORMAT_VERSION
    generator: dict | None = None

    def to_text(self) -> str:
        lines = [f"format_version={self.format_version}", f"n={self.n}", f"M={self.M}", f"D={self.D}",
                 f"s_min={self.s_min!r}", f"s_max={self.s_max!r}"]
        for k, v in (self.generator or {}).items():
            lines.append(f"gen.{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = parse_key_values(text)
        gen = {k[4:]: v for k, v in kv.items() if k.startswith("gen.")}
        return cls(int(kv["n"]), int(kv["M"]), int(kv["D"]), float(kv["s_min"]), float(kv["s_max"]),
                   int(kv.get("format_version", FORMAT_VERSION)), gen or None)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


# ------------------------------------------------------------------ generator


@dataclass
class World:
    scenes: np.ndarray      # (n_scenes, D)
    embed: np.ndarray       # (D, d_s), orthonormal columns
    clip_weights: np.ndarray  # (M,), mean 1


@dataclass
class Split:
    features: np.ndarray    # (N, M, D) float64
    scores: np.ndarray      # (N,) raw score units
    latents: np.ndarray     # (N, M, d_s)
    scene_ids: np.ndarray   # (N,)


def _seeds(cfg: SyntheticConfig):
    world, train, test = np.random.SeedSequence(cfg.seed).spawn(3)
    return world, train, test


def make_world(cfg: SyntheticConfig) -> World:
    rng = np.random.default_rng(_seeds(cfg)[0])
    scenes = rng.normal(0.0, 1.0, (cfg.n_scenes, cfg.D)) * cfg.nuisance_scale
    embed, _ = np.linalg.qr(rng.normal(size=(cfg.D, cfg.d_s)))
    w = rng.uniform(0.5, 1.5, cfg.M)
    return World(scenes, embed, w / w.mean())


def latent_quality(latents: np.ndarray, clip_weights: np.ndarray) -> np.ndarray:
    """sum_m w_m ||z_m|| scaled so a unit-scale latent gives about 1."""
    d_s = latents.shape[-1]
    norms = np.sqrt((latents * latents).sum(-1))
    return (norms * clip_weights).sum(-1) / (latents.shape[-2] * math.sqrt(d_s))


def squash(raw):
    return np.tanh(raw)


def synthesize(cfg: SyntheticConfig, split: str = "train") -> Split:
    if split not in ("train", "test"):
        raise ValueError(f"split must be train or test, got {split!r}")
    world = make_world(cfg)
    n = cfg.n_train if split == "train" else cfg.n_test
    rng = np.random.default_rng(_seeds(cfg)[1 if split == "train" else 2])
    scene_ids = rng.integers(0, cfg.n_scenes, n)
    quality = rng.uniform(*QUALITY_RANGE, n)
    # Half-normal coordinates keep each clip's signal on one side of the
    # subspace, so the clip average still carries it.
    xi = np.abs(rng.normal(size=(n, cfg.M, cfg.d_s)))
    latents = cfg.signal_scale * quality[:, None, None] * xi
    noise = rng.normal(size=(n, cfg.M, cfg.D)) * CLIP_NOISE
    features = world.scenes[scene_ids][:, None, :] + latents @ world.embed.T + noise
    q = squash(latent_quality(latents, world.clip_weights)) + rng.normal(size=n) * cfg.label_noise
    q = np.clip(q, 0.0, 1.0)
    scores = SCORE_LOW + (SCORE_HIGH - SCORE_LOW) * q
    return Split(features, scores, latents, scene_ids)


def oracle_predictions(cfg: SyntheticConfig, split: Split) -> np.ndarray:
    """Noise-free score read straight off the generator's latents."""
    world = make_world(cfg)
    return SCORE_LOW + (SCORE_HIGH - SCORE_LOW) * squash(latent_quality(split.latents, world.clip_weights))


# ------------------------------------------------------------------ file format


def write_phif(path, features: np.ndarray, scores: np.ndarray) -> DatasetManifest:
    path = Path(path)
    feats = np.ascontiguousarray(features, dtype="<f4")
    s = np.ascontiguousarray(scores, dtype="<f4")
    n, M, D = feats.shape
    records = np.concatenate([feats.reshape(n, M * D), s[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, n, M, D))
        fh.write(records.astype("<f4").tobytes())
    return DatasetManifest(n, M, D, float(s.min()), float(s.max()))


def read_phif(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(path, blob[:4])
    if len(blob) < HEADER.size:
        raise TruncatedPayloadError(path, "header")
    _, version, n, M, D = HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(path, version, FORMAT_VERSION)
    expected = HEADER.size + n * (M * D + 1) * 4
    if len(blob) < expected:
        raise TruncatedPayloadError(path, f"{len(blob)} bytes, expected {expected}")
    records = np.frombuffer(blob, dtype="<f4", count=n * (M * D + 1), offset=HEADER.size)
    records = records.reshape(n, M * D + 1)
    return records[:, :-1].reshape(n, M, D).astype(np.float64), records[:, -1].astype(np.float64)


def generate_dataset(cfg: SyntheticConfig, out_dir) -> tuple[Path, Path, DatasetManifest]:
    """Write ``train.phif`` and ``test.phif`` (plus manifests) into ``out_dir``.

    Returns both data paths and the training manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {k: v for k, v in asdict(cfg).items()}
    manifests = {}
    for split in ("train", "test"):
        data = synthesize(cfg, split)
        path = out_dir / f"{split}.phif"
        manifest = write_phif(path, data.features, data.scores)
        manifest.generator = dict(echo, split=split)
        Path(str(path) + ".manifest").write_text(manifest.to_text())
        manifests[split] = manifest
    return out_dir / "train.phif", out_dir / "test.phif", manifests["train"]


def load_dataset(path) -> tuple[list[ScoredSample], DatasetManifest]:
    features, scores = read_phif(path)
    mpath = Path(str(path) + ".manifest")
    if mpath.exists():
        manifest = DatasetManifest.from_text(mpath.read_text())
        if (manifest.n, manifest.M, manifest.D) != features.shape:
            raise ConfigError(f"{mpath} describes {(manifest.n, manifest.M, manifest.D)}, "
                              f"data holds {features.shape}")
    else:
        n, M, D = features.shape
        manifest = DatasetManifest(n, M, D, float(scores.min()), float(scores.max()))
    samples = [ScoredSample(f, float(s), manifest.s_min, manifest.s_max) for f, s in zip(features, scores)]
    return samples, manifest


def stack(samples: list[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.features for s in samples]), np.array([s.score for s in samples])
