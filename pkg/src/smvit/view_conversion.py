"""View-feature conversion: per-view-pair conversion factors and their
application, mapping offset-view embeddings into the standard (90 deg)
feature domain.

A factor for a view pair is the elementwise mean difference between
paired embeddings of the two views. Pairing matches rows by (subject,
condition, sequence) and aligns frames in order, truncating to the
shorter sequence; with complete equal-size pairings the factor reduces
to the difference of per-view means, so converted source embeddings
mean-align with the target view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    InsufficientPairsError,
    MissingFactorError,
    ProtocolError,
    ShapeError,
)

VIEW_ANGLES = (0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180)
STANDARD_VIEW = 90


def validate_view(degrees: int) -> int:
    degrees = int(degrees)
    if degrees not in VIEW_ANGLES:
        raise ConfigError(f"view angle must be one of {VIEW_ANGLES}, got {degrees}")
    return degrees


@dataclass
class FeatureBatch:
    """Embeddings of one view plus the identity of every row."""

    view: int
    embeddings: np.ndarray  # [n_samples, feat_dim]
    sample_keys: list  # (subject, condition, sequence, frame_index) per row

    def __post_init__(self):
        self.view = validate_view(self.view)
        self.embeddings = np.asarray(self.embeddings)
        if self.embeddings.ndim != 2:
            raise ShapeError(f"embeddings must be [n, d], got {self.embeddings.shape}")
        if len(self.sample_keys) != self.embeddings.shape[0]:
            raise ShapeError(
                f"{len(self.sample_keys)} sample keys for "
                f"{self.embeddings.shape[0]} embedding rows"
            )

    @property
    def n_samples(self):
        return self.embeddings.shape[0]

    @property
    def feat_dim(self):
        return self.embeddings.shape[1]


@dataclass
class ViewConversionFactor:
    """Additive conversion vector for an ordered (source, target) view pair."""

    source: int
    target: int
    factor: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.source = validate_view(self.source)
        self.target = validate_view(self.target)
        self.factor = np.asarray(self.factor, dtype=np.float64)
        if not np.all(np.isfinite(self.factor)):
            raise ValueError("conversion factor must be finite")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def _metadata_pairs(x: FeatureBatch, y: FeatureBatch):
    """Align rows by (subject, condition, sequence), frames in order."""

    def group(batch):
        groups = {}
        for i, key in enumerate(batch.sample_keys):
            subject, condition, sequence, frame = key[0], key[1], key[2], key[3]
            groups.setdefault((subject, condition, sequence), []).append((frame, i))
        return {k: [i for _, i in sorted(v)] for k, v in groups.items()}

    gx, gy = group(x), group(y)
    pairs = []
    for k in sorted(set(gx) & set(gy)):
        for ix, iy in zip(gx[k], gy[k]):
            pairs.append((ix, iy))
    return pairs


def compute_pfc(x: FeatureBatch, y: FeatureBatch, pairing="metadata") -> ViewConversionFactor:
    """Mean elementwise difference x_i - y_i over N aligned pairs."""
    if x.feat_dim != y.feat_dim:
        raise ShapeError(f"feature dims differ: {x.feat_dim} vs {y.feat_dim}")
    if pairing == "metadata":
        pairs = _metadata_pairs(x, y)
    elif pairing == "index":
        pairs = [(i, i) for i in range(min(x.n_samples, y.n_samples))]
    else:
        raise ConfigError(f"unknown pairing rule {pairing!r}")
    if not pairs:
        raise InsufficientPairsError(
            f"no aligned pairs between views {x.view} and {y.view}"
        )
    ix = np.fromiter((i for i, _ in pairs), dtype=np.intp)
    iy = np.fromiter((j for _, j in pairs), dtype=np.intp)
    diff = x.embeddings[ix].astype(np.float64) - y.embeddings[iy].astype(np.float64)
    return ViewConversionFactor(
        source=x.view, target=y.view, factor=diff.mean(axis=0), sample_count=len(pairs)
    )


def apply_it(x_row: np.ndarray, factor: ViewConversionFactor) -> np.ndarray:
    """Translate one embedding row by the conversion factor: x + factor."""
    x_row = np.asarray(x_row)
    if x_row.shape[-1] != factor.factor.shape[0]:
        raise ShapeError(
            f"row dim {x_row.shape[-1]} != factor dim {factor.factor.shape[0]}"
        )
    return x_row + factor.factor.astype(x_row.dtype, copy=False)


@dataclass
class FactorRegistry:
    """Conversion factors from every non-standard view toward the standard."""

    standard_view: int = STANDARD_VIEW
    entries: dict = field(default_factory=dict)  # source view -> factor

    def __post_init__(self):
        self.standard_view = validate_view(self.standard_view)

    def add(self, factor: ViewConversionFactor):
        if factor.target != self.standard_view:
            raise ConfigError(
                f"registry target is {self.standard_view}, factor targets {factor.target}"
            )
        self.entries[factor.source] = factor

    def get(self, view: int) -> ViewConversionFactor:
        view = validate_view(view)
        if view not in self.entries:
            raise MissingFactorError(f"no conversion factor registered for view {view}")
        return self.entries[view]

    @property
    def feat_dim(self):
        for f in self.entries.values():
            return int(f.factor.shape[0])
        return 0

    def save(self, path):
        """Persist as JSON, numbers at 9 significant digits."""
        doc = {
            "standard_view": self.standard_view,
            "feat_dim": self.feat_dim,
            "entries": [
                {
                    "source": f.source,
                    "target": f.target,
                    "sample_count": f.sample_count,
                    "factor": [float(f"{v:.9g}") for v in f.factor],
                }
                for f in sorted(self.entries.values(), key=lambda f: f.source)
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        reg = cls(standard_view=doc["standard_view"])
        for e in doc["entries"]:
            reg.add(ViewConversionFactor(
                source=e["source"], target=e["target"],
                factor=np.asarray(e["factor"], dtype=np.float64),
                sample_count=e["sample_count"],
            ))
        return reg


def convert_to_standard(batch: FeatureBatch, registry: FactorRegistry) -> FeatureBatch:
    """Map a batch into the standard-view domain. Standard-view batches
    pass through unchanged; the original view is kept in the keys."""
    if batch.view == registry.standard_view:
        return batch
    factor = registry.get(batch.view)
    converted = apply_it(batch.embeddings, factor) if batch.n_samples else batch.embeddings
    return FeatureBatch(
        view=registry.standard_view,
        embeddings=converted,
        sample_keys=[key + (("origin_view", batch.view),) for key in batch.sample_keys],
    )


def build_factor_registry(model, frames, standard=STANDARD_VIEW, batch_size=64) -> FactorRegistry:
    """Embed training frames per view with the current model and compute
    the factor from every non-standard view toward the standard view.

    The factor stored for view v is mean(standard pairs) - mean(v pairs),
    so adding it to v-view embeddings aligns them with the standard-view
    feature domain.
    """
    standard = validate_view(standard)
    by_view = {}
    for fr in frames:
        by_view.setdefault(fr.view, []).append(fr)
    if standard not in by_view:
        raise ProtocolError(f"training data lacks the standard view {standard}")
    if len(by_view) < 2:
        raise ProtocolError("nothing to convert: only the standard view present")

    def embed_view(view_frames):
        rows = []
        for start in range(0, len(view_frames), batch_size):
            chunk = view_frames[start:start + batch_size]
            rows.append(model.embed_frames(chunk, mode="infer"))
        emb = np.concatenate(rows, axis=0)
        keys = [(f.subject, f.condition, f.sequence, f.frame_index) for f in view_frames]
        return emb, keys

    std_emb, std_keys = embed_view(by_view[standard])
    std_batch = FeatureBatch(view=standard, embeddings=std_emb, sample_keys=std_keys)

    registry = FactorRegistry(standard_view=standard)
    for view in sorted(v for v in by_view if v != standard):
        emb, keys = embed_view(by_view[view])
        vb = FeatureBatch(view=view, embeddings=emb, sample_keys=keys)
        try:
            fwd = compute_pfc(std_batch, vb, pairing="metadata")
        except InsufficientPairsError:
            raise InsufficientPairsError(
                f"view {view} has no samples pairable with the standard view"
            )
        registry.add(ViewConversionFactor(
            source=view, target=standard,
            factor=fwd.factor, sample_count=fwd.sample_count,
        ))
    return registry
