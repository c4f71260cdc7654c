"""Siamese assembly: one weight-shared dual-channel backbone applied to
both branches, embedding via global average pooling, an identity
classification head, and a versioned binary checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import CMBlock, CMBlockConfig, Module
from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import Tensor
from .view_conversion import (
    STANDARD_VIEW,
    FactorRegistry,
    FeatureBatch,
    convert_to_standard,
)

CHECKPOINT_MAGIC = b"SMVT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    resolution: tuple = (64, 64)
    num_subjects: int = 4
    precision: int = 32  # 32 for training, 64 for gradient checking
    standard_view: int = STANDARD_VIEW
    contrastive_weight: float = 0.0  # optional pair-similarity term, off by default
    init_seed: int = 0
    backbone: CMBlockConfig = field(default_factory=CMBlockConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = CMBlockConfig(**self.backbone)
        if isinstance(self.backbone.mobile_channels, list):
            self.backbone.mobile_channels = tuple(self.backbone.mobile_channels)
        self.resolution = tuple(self.resolution)
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.num_subjects < 1:
            raise ConfigError("num_subjects must be positive")
        H, W = self.resolution
        ds = self.backbone.downsample
        if H % ds or W % ds:
            raise ConfigError(f"resolution {self.resolution} not divisible by downsample {ds}")
        fh, fw = H // ds, W // ds
        if fh % self.backbone.patch_h or fw % self.backbone.patch_w:
            raise ConfigError(
                f"feature map {fh}x{fw} not tiled by patch "
                f"{self.backbone.patch_h}x{self.backbone.patch_w}"
            )

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def feat_dim(self):
        return self.backbone.out_channels


@dataclass
class SiamesePair:
    """Two equal-size frame batches plus subject labels."""

    a_frames: np.ndarray  # [B,1,H,W]
    b_frames: np.ndarray
    view_a: int
    view_b: int
    labels: np.ndarray  # subject indices, shared by both branches

    def __post_init__(self):
        if self.a_frames.shape[0] != self.b_frames.shape[0]:
            raise ShapeError(
                f"siamese batch sizes differ: {self.a_frames.shape[0]} vs "
                f"{self.b_frames.shape[0]}"
            )


class SmvitModel(Module):
    """Weight-shared Siamese gait recognizer. Both branches are two
    applications of the single backbone parameter set."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        self.backbone = CMBlock(config.backbone, rng=rng, dtype=config.dtype)
        feat = config.feat_dim
        self.head_w = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(feat), size=(feat, config.num_subjects))
            .astype(config.dtype),
            requires_grad=True,
        )
        self.head_b = Tensor(np.zeros(config.num_subjects, dtype=config.dtype),
                             requires_grad=True)

    # ------------------------------------------------------------------
    # forward paths
    # ------------------------------------------------------------------

    def embed(self, frames, mode="train"):
        """Backbone forward then global average pooling -> [B, feat_dim]."""
        frames = T.as_tensor(frames)
        H, W = self.config.resolution
        if frames.ndim != 4 or frames.shape[1:] != (1, H, W):
            raise ShapeError(
                f"expected frames [B,1,{H},{W}], got {frames.shape}"
            )
        return T.global_avg_pool(self.backbone.forward(frames, mode))

    def embed_frames(self, frames, mode="infer") -> np.ndarray:
        """Embed a list of SilhouetteFrames without keeping the graph."""
        batch = np.stack([f.image for f in frames])[:, None].astype(self.config.dtype)
        return self.embed(Tensor(batch), mode=mode).data

    def classify(self, embeddings):
        return T.linear(embeddings, self.head_w, self.head_b)

    def _convert(self, emb, view, registry):
        if registry is None or view == registry.standard_view:
            return emb
        factor = registry.get(view)
        shift = Tensor(factor.factor.astype(self.config.dtype))
        return T.add(emb, shift)

    def forward_pair(self, pair: SiamesePair, registry: FactorRegistry | None = None,
                     mode="train"):
        """Embed both batches with the shared backbone, convert
        non-standard-view embeddings when a registry is given, classify."""
        emb_a = self.embed(Tensor(pair.a_frames.astype(self.config.dtype)), mode)
        emb_b = self.embed(Tensor(pair.b_frames.astype(self.config.dtype)), mode)
        conv_a = self._convert(emb_a, pair.view_a, registry)
        conv_b = self._convert(emb_b, pair.view_b, registry)
        return emb_a, emb_b, self.classify(conv_a), self.classify(conv_b)

    def loss(self, logits_a, logits_b, labels, emb_a=None, emb_b=None):
        """Mean of the two branch cross-entropies, plus the optional
        (default-off) pair-similarity term."""
        ce = T.mul(T.add(T.cross_entropy(logits_a, labels),
                         T.cross_entropy(logits_b, labels)), 0.5)
        w = self.config.contrastive_weight
        if w > 0 and emb_a is not None and emb_b is not None:
            diff = T.sub(emb_a, emb_b)
            ce = T.add(ce, T.mul(T.mean_all(T.mul(diff, diff)), w))
        return ce

    def predict(self, frames, registry: FactorRegistry | None, view: int) -> list:
        """Embed, convert toward the standard view, argmax over subjects."""
        emb = self.embed_frames(frames, mode="infer")
        if registry is not None and view != registry.standard_view:
            batch = FeatureBatch(
                view=view, embeddings=emb,
                sample_keys=[(f.subject, f.condition, f.sequence, f.frame_index)
                             for f in frames],
            )
            emb = convert_to_standard(batch, registry).embeddings
        logits = emb @ self.head_w.data + self.head_b.data
        return [int(i) for i in np.argmax(logits, axis=1)]

    # ------------------------------------------------------------------
    # state
    # ------------------------------------------------------------------

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, json header, raw arrays
# ---------------------------------------------------------------------------

def save_checkpoint(model: SmvitModel, path, seed=0, stage=0, subjects=None,
                    extra=None):
    params = list(model.named_parameters())
    states = list(model.named_bn_states())
    header = {
        "config": asdict(model.config),
        "seed": seed,
        "stage": stage,
        "subjects": list(subjects) if subjects else [],
        "extra": extra or {},
        "params": [{"name": n, "shape": list(p.shape), "dtype": str(p.dtype)}
                   for n, p in params],
        "bn_states": [{"name": n, "channels": int(s.running_mean.shape[0]),
                       "dtype": str(s.running_mean.dtype), "momentum": s.momentum}
                      for n, s in states],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(p.data.tobytes())
        for _, s in states:
            fh.write(s.running_mean.tobytes())
            fh.write(s.running_var.tobytes())


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; shapes are validated against the
    config before any data is accepted. Returns (model, header)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack_from("<BQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[13:13 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc

    config = ModelConfig(**header["config"])
    model = SmvitModel(config)
    params = dict(model.named_parameters())
    states = dict(model.named_bn_states())
    if [e["name"] for e in header["params"]] != list(params):
        raise CheckpointError(f"{path}: parameter names do not match the config")

    offset = 13 + hlen
    for entry in header["params"]:
        p = params[entry["name"]]
        if list(p.shape) != entry["shape"]:
            raise CheckpointError(
                f"{path}: shape mismatch for {entry['name']}: "
                f"checkpoint {entry['shape']} vs model {list(p.shape)}"
            )
        dt = np.dtype(entry["dtype"])
        nbytes = int(np.prod(entry["shape"]) * dt.itemsize) if entry["shape"] else dt.itemsize
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(entry["shape"]) or 1),
                            offset=offset).reshape(entry["shape"])
        p.data = arr.copy()
        offset += nbytes
    for entry in header["bn_states"]:
        s = states[entry["name"]]
        dt = np.dtype(entry["dtype"])
        ch = entry["channels"]
        if s.running_mean.shape[0] != ch:
            raise CheckpointError(f"{path}: bn channel mismatch for {entry['name']}")
        s.running_mean = np.frombuffer(raw, dtype=dt, count=ch, offset=offset).copy()
        offset += ch * dt.itemsize
        s.running_var = np.frombuffer(raw, dtype=dt, count=ch, offset=offset).copy()
        offset += ch * dt.itemsize
        s.momentum = entry["momentum"]
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes ({len(raw) - offset})")
    return model, header
